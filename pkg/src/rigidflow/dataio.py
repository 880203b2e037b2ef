"""Bit-exact dataset container and model (de)serialization.

A dataset is a directory holding ``manifest.json`` plus one raw
little-endian tensor file per entry, row-major, [T][H][W][C] order.
The manifest pins every tensor's shape and dtype, so reads validate
strictly and a write/read cycle is byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DtypeMismatchError,
    MissingTensorError,
    ShapeMismatchError,
    ValidationError,
)
from .geometry import CameraIntrinsics, RgbdFrame

SCHEMA_VERSION = 1

_DTYPES = {"<f4": np.dtype("<f4"), "|u1": np.dtype("uint8")}


@dataclass
class SequenceData:
    """In-memory form of one recorded RGB-D sequence.

    Tensors keep the container dtypes (float32/uint8) so that a write
    followed by a read reproduces this object exactly.
    """

    rgb: np.ndarray
    depth: np.ndarray
    valid: np.ndarray
    intr: CameraIntrinsics
    actions: np.ndarray | None = None
    gt_masks: np.ndarray | None = None
    gt_scene_flow: np.ndarray | None = None
    gt_optical_flow: np.ndarray | None = None
    gt_occlusion: np.ndarray | None = None
    k_gt: int = 0
    scene_spec: dict | None = None
    extra: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.rgb.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.rgb.shape[1:3]

    def frame(self, t: int) -> RgbdFrame:
        if not 0 <= t < self.T:
            raise ValidationError(f"frame index {t} out of range (T={self.T})")
        return RgbdFrame(
            rgb=self.rgb[t].astype(np.float64),
            depth=self.depth[t].astype(np.float64),
            valid=self.valid[t].astype(bool),
            intr=self.intr,
        )

    def frames(self) -> list[RgbdFrame]:
        return [self.frame(t) for t in range(self.T)]


def sequence_from_sim(spec, frames, masks, flows, actions) -> SequenceData:
    """Pack simulator outputs into container dtypes."""
    from .sim import spec_to_dict

    T = len(frames)
    rgb = np.stack([f.rgb for f in frames]).astype("<f4")
    depth = np.stack([f.depth for f in frames]).astype("<f4")
    valid = np.stack([f.valid for f in frames]).astype(np.uint8)
    K = masks[0].K if masks else 0
    gt_masks = (
        np.stack([np.moveaxis(m.masks, 0, -1) for m in masks]).astype("<f4")
        if masks
        else None
    )
    if flows:
        gsf = np.stack([f.scene_flow for f in flows]).astype("<f4")
        gof = np.stack([f.optical_flow for f in flows]).astype("<f4")
        gocc = np.stack([f.occlusion for f in flows]).astype(np.uint8)
    else:
        gsf = gof = gocc = None
    acts = None
    if actions is not None:
        acts = np.zeros((T, np.asarray(actions).shape[1]), dtype="<f4")
        acts[: T - 1] = np.asarray(actions, dtype="<f4")
    return SequenceData(
        rgb=rgb,
        depth=depth,
        valid=valid,
        intr=spec.intr,
        actions=acts,
        gt_masks=gt_masks,
        gt_scene_flow=gsf,
        gt_optical_flow=gof,
        gt_occlusion=gocc,
        k_gt=K,
        scene_spec=spec_to_dict(spec),
    )


def _tensor_entries(seq: SequenceData):
    entries = [("rgb", seq.rgb), ("depth", seq.depth), ("valid", seq.valid)]
    for name in ("actions", "gt_masks", "gt_scene_flow", "gt_optical_flow", "gt_occlusion"):
        arr = getattr(seq, name)
        if arr is not None:
            entries.append((name, arr))
    for name, arr in seq.extra.items():
        entries.append((name, arr))
    return entries


def write_sequence(seq: SequenceData, path) -> None:
    """Persist a sequence; overwrites tensor files already present."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = []
    for name, arr in _tensor_entries(seq):
        dtype = "|u1" if arr.dtype == np.uint8 else "<f4"
        arr = np.ascontiguousarray(arr.astype(_DTYPES[dtype], copy=False))
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": dtype})
        (path / f"{name}.bin").write_bytes(arr.tobytes())
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "H": int(seq.shape[0]),
        "W": int(seq.shape[1]),
        "T": int(seq.T),
        "K_gt": int(seq.k_gt),
        "intrinsics": {
            "fx": seq.intr.fx,
            "fy": seq.intr.fy,
            "cx": seq.intr.cx,
            "cy": seq.intr.cy,
        },
        "action_dim": 0 if seq.actions is None else int(seq.actions.shape[1]),
        "tensors": tensors,
    }
    if seq.scene_spec is not None:
        manifest["scene_spec"] = seq.scene_spec
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def read_sequence(path) -> SequenceData:
    """Load and strictly validate a dataset directory."""
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise MissingTensorError(f"no manifest.json under {path}")
    try:
        manifest = json.loads(mpath.read_text())
        H, W, T = int(manifest["H"]), int(manifest["W"]), int(manifest["T"])
        ci = manifest["intrinsics"]
        intr = CameraIntrinsics(
            fx=ci["fx"], fy=ci["fy"], cx=ci["cx"], cy=ci["cy"], width=W, height=H
        )
        tensor_list = manifest["tensors"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed manifest: {exc}") from exc

    arrays = {}
    for entry in tensor_list:
        name, shape, dtype = entry["name"], tuple(entry["shape"]), entry["dtype"]
        if dtype not in _DTYPES:
            raise DtypeMismatchError(
                f"tensor {name!r} declares unsupported dtype {dtype!r}"
            )
        fpath = path / f"{name}.bin"
        if not fpath.exists():
            raise MissingTensorError(f"tensor file missing: {fpath}")
        raw = fpath.read_bytes()
        want = int(np.prod(shape)) * _DTYPES[dtype].itemsize
        if len(raw) != want:
            raise ShapeMismatchError(
                f"tensor {name!r}: file has {len(raw)} bytes, "
                f"manifest shape {shape} needs {want}"
            )
        arrays[name] = np.frombuffer(raw, dtype=_DTYPES[dtype]).reshape(shape)

    for required, shape in (
        ("rgb", (T, H, W, 3)),
        ("depth", (T, H, W)),
        ("valid", (T, H, W)),
    ):
        if required not in arrays:
            raise MissingTensorError(f"manifest lacks required tensor {required!r}")
        if arrays[required].shape != shape:
            raise ShapeMismatchError(
                f"tensor {required!r} has shape {arrays[required].shape}, "
                f"expected {shape}"
            )

    known = {
        "rgb", "depth", "valid", "actions",
        "gt_masks", "gt_scene_flow", "gt_optical_flow", "gt_occlusion",
    }
    extra = {k: v for k, v in arrays.items() if k not in known}
    return SequenceData(
        rgb=arrays["rgb"],
        depth=arrays["depth"],
        valid=arrays["valid"],
        intr=intr,
        actions=arrays.get("actions"),
        gt_masks=arrays.get("gt_masks"),
        gt_scene_flow=arrays.get("gt_scene_flow"),
        gt_optical_flow=arrays.get("gt_optical_flow"),
        gt_occlusion=arrays.get("gt_occlusion"),
        k_gt=int(manifest.get("K_gt", 0)),
        scene_spec=manifest.get("scene_spec"),
        extra=extra,
    )


def sequence_from_predictions(
    preds, intr, scene_spec=None, actions=None
) -> SequenceData:
    """Pack rollout output (frame, flows) pairs into a container."""
    frames = [p[0] for p in preds]
    flows = [p[1] for p in preds]
    rgb = np.stack([f.rgb for f in frames]).astype("<f4")
    depth = np.stack([f.depth for f in frames]).astype("<f4")
    valid = np.stack([f.valid for f in frames]).astype(np.uint8)
    extra = {
        "pred_scene_flow": np.stack([f.scene_flow for f in flows]).astype("<f4"),
        "pred_optical_flow": np.stack([f.optical_flow for f in flows]).astype("<f4"),
        "pred_occlusion": np.stack([f.occlusion for f in flows]).astype(np.uint8),
    }
    acts = None
    if actions is not None:
        actions = np.asarray(actions, dtype="<f4")
        acts = np.zeros((len(frames), actions.shape[1]), dtype="<f4")
        acts[: actions.shape[0]] = actions
    return SequenceData(
        rgb=rgb, depth=depth, valid=valid, intr=intr,
        actions=acts, scene_spec=scene_spec, extra=extra,
    )


# ---------------------------------------------------------------------------
# fitted model persistence


def save_model(model, path) -> None:
    """Serialize a SceneModel or ActionModel to JSON (exact floats)."""
    from .fit import ActionModel, SceneModel

    if isinstance(model, SceneModel):
        payload = {
            "type": "scene_model",
            "mask_logits": model.mask_logits.tolist(),
            "twists": model.twists.tolist(),
            "converged": bool(model.converged),
            "loss_trace": [bd.as_dict() for bd in model.loss_trace],
        }
    elif isinstance(model, ActionModel):
        payload = {
            "type": "action_model",
            "A": model.A.tolist(),
            "b": model.b.tolist(),
            "action_dim": model.action_dim,
            "moving_object": int(model.moving_object),
            "degenerate": bool(model.degenerate),
        }
    else:
        raise ValidationError(f"cannot save model of type {type(model).__name__}")
    payload["intrinsics"] = {
        "fx": model.intr.fx, "fy": model.intr.fy,
        "cx": model.intr.cx, "cy": model.intr.cy,
        "width": model.intr.width, "height": model.intr.height,
    }
    payload["weights"] = {
        **{f"lambda{i}": getattr(model.weights, f"lambda{i}") for i in range(1, 7)},
        "alpha": model.weights.alpha,
        "knn_k": model.weights.knn_k,
    }
    payload["opts"] = {
        "K": model.opts.K,
        "steps": model.opts.steps,
        "lr": model.opts.lr,
        "mask_init": model.opts.mask_init,
        "seed": model.opts.seed,
        "init": model.opts.init,
        "init_radius": model.opts.init_radius,
        "knn_metric": model.opts.knn_metric,
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_model(path):
    from .fit import ActionModel, FitOptions, SceneModel
    from .losses import LossBreakdown, LossWeights

    try:
        payload = json.loads(Path(path).read_text())
        ci = payload["intrinsics"]
        intr = CameraIntrinsics(
            fx=ci["fx"], fy=ci["fy"], cx=ci["cx"], cy=ci["cy"],
            width=ci["width"], height=ci["height"],
        )
        weights = LossWeights(**payload["weights"])
        opts = FitOptions(**payload["opts"])
        if payload["type"] == "scene_model":
            return SceneModel(
                mask_logits=np.asarray(payload["mask_logits"]),
                twists=np.asarray(payload["twists"]),
                intr=intr,
                weights=weights,
                opts=opts,
                loss_trace=[LossBreakdown(**bd) for bd in payload["loss_trace"]],
                converged=payload["converged"],
            )
        if payload["type"] == "action_model":
            return ActionModel(
                A=np.asarray(payload["A"]),
                b=np.asarray(payload["b"]),
                action_dim=int(payload["action_dim"]),
                intr=intr,
                weights=weights,
                opts=opts,
                moving_object=int(payload["moving_object"]),
                degenerate=bool(payload["degenerate"]),
            )
        raise ValidationError(f"unknown model type {payload['type']!r}")
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed model file: {exc}") from exc
