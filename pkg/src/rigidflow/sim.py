"""Deterministic synthetic rigid-scene RGB-D renderer.

Analytic ray casting against planes, boxes, and spheres gives exact
depths, hard object masks, and exact correspondences, so rendered
scenes double as ground truth for flows, occlusion, and motion
recovery.  Textures are procedural (hashed cells in local object
coordinates) and every pixel is pure, so identical specs render
bit-identical frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .geometry import (
    CameraIntrinsics,
    FlowFields,
    MaskStack,
    PointCloud,
    RgbdFrame,
    Se3,
    occlusion_mask,
    pixel_grid,
    project_points,
    se3_realize,
)

_RAY_EPS = 1e-9
_U64 = np.uint64


@dataclass
class Texture:
    """Procedural surface color.

    ``uniform`` paints one color; ``checker`` alternates two colors on a
    3D grid of ``cell``-sized cells in local object coordinates;
    ``noise`` colors each cell from a hash of its index and ``seed``.
    """

    kind: str = "uniform"
    color: tuple[float, float, float] = (0.6, 0.6, 0.6)
    color2: tuple[float, float, float] = (0.25, 0.25, 0.25)
    cell: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("uniform", "checker", "noise"):
            raise ValidationError(f"unknown texture kind {self.kind!r}")
        if self.cell <= 0:
            raise ValidationError("texture cell size must be positive")


@dataclass
class ObjectSpec:
    """One analytic body: shape, metric size, initial pose, texture.

    ``size`` is (sx, sy) for a plane, (sx, sy, sz) for a box, and a
    radius for a sphere; the pose maps local to camera coordinates.
    ``velocity`` is the camera-frame rigid motion applied per frame when
    the scene is rolled forward.
    """

    shape: str
    size: tuple
    pose: Se3
    texture: Texture = field(default_factory=Texture)
    velocity: Se3 = field(default_factory=Se3.identity)

    def __post_init__(self):
        if self.shape not in ("plane", "box", "sphere"):
            raise ValidationError(f"unknown shape {self.shape!r}")
        size = np.atleast_1d(np.asarray(self.size, dtype=np.float64))
        want = {"plane": 2, "box": 3, "sphere": 1}[self.shape]
        if size.size != want or np.any(size <= 0):
            raise ValidationError(f"{self.shape} needs {want} positive size entries")
        self.size = tuple(float(s) for s in size)


@dataclass
class SceneSpec:
    """Scene layout: movable objects, a background plane, intrinsics."""

    objects: list[ObjectSpec]
    background: ObjectSpec
    intr: CameraIntrinsics
    depth_noise_std: float = 0.0
    action_dim: int = 0
    action_bound: float = 0.05

    def __post_init__(self):
        for obj in [*self.objects, self.background]:
            if obj.pose.trans[2] <= 0:
                raise ValidationError("all bodies must start in front of the camera")
        if self.depth_noise_std < 0:
            raise ValidationError("depth noise std must be non-negative")
        if self.action_dim < 0 or self.action_dim > 6:
            raise ValidationError("action_dim must be in [0, 6]")

    @property
    def num_objects(self) -> int:
        """Movable bodies, background excluded."""
        return len(self.objects)


@dataclass
class Scene:
    """A spec plus the current realized pose (R, t) of every body."""

    spec: SceneSpec
    poses: list[tuple[np.ndarray, np.ndarray]]

    @classmethod
    def from_spec(cls, spec: SceneSpec) -> "Scene":
        poses = [se3_realize(o.pose) for o in [*spec.objects, spec.background]]
        return cls(spec=spec, poses=poses)


def _splitmix(h: np.ndarray) -> np.ndarray:
    h = (h ^ (h >> _U64(30))) * _U64(0xBF58476D1CE4E5B9)
    h = (h ^ (h >> _U64(27))) * _U64(0x94D049BB133111EB)
    return h ^ (h >> _U64(31))


def _texture_rgb(tex: Texture, local: np.ndarray) -> np.ndarray:
    """Color of texture cells at (..., 3) local hit coordinates."""
    if tex.kind == "uniform":
        return np.broadcast_to(np.asarray(tex.color), local.shape).copy()
    cells = np.floor(local / tex.cell).astype(np.int64)
    if tex.kind == "checker":
        parity = (cells.sum(axis=-1) & 1).astype(bool)
        return np.where(
            parity[..., None], np.asarray(tex.color2), np.asarray(tex.color)
        )
    with np.errstate(over="ignore"):
        h = (
            cells[..., 0].astype(_U64) * _U64(0x9E3779B97F4A7C15)
            + cells[..., 1].astype(_U64) * _U64(0xC2B2AE3D27D4EB4F)
            + cells[..., 2].astype(_U64) * _U64(0x165667B19E3779F9)
            + _U64(tex.seed & 0xFFFFFFFF) * _U64(0xD6E8FEB86659FD93)
        )
        h = _splitmix(h)
    rgb = np.stack(
        [((h >> _U64(16 * i)) & _U64(0xFFFF)).astype(np.float64) for i in range(3)],
        axis=-1,
    )
    return 0.15 + 0.75 * rgb / 65535.0


def _intersect(obj: ObjectSpec, pose, origin_l: np.ndarray, dirs_l: np.ndarray):
    """Ray-object intersection in local coordinates.

    Returns (t, hit) with t the ray parameter (camera depth, since ray
    directions have unit Z in camera frame).
    """
    o, d = origin_l, dirs_l
    if obj.shape == "sphere":
        r = obj.size[0]
        a = (d * d).sum(-1)
        b = 2.0 * (o * d).sum(-1)
        c = float(o @ o) - r * r
        disc = b * b - 4 * a * c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t = (-b - sq) / (2 * a)
        t2 = (-b + sq) / (2 * a)
        t = np.where(t > _RAY_EPS, t, t2)
        return t, hit & (t > _RAY_EPS)
    if obj.shape == "plane":
        sx, sy = obj.size
        dz = d[..., 2]
        ok = np.abs(dz) > _RAY_EPS
        t = np.where(ok, -o[2] / np.where(ok, dz, 1.0), np.inf)
        p = o + t[..., None] * d
        hit = (
            ok
            & (t > _RAY_EPS)
            & (np.abs(p[..., 0]) <= sx / 2)
            & (np.abs(p[..., 1]) <= sy / 2)
        )
        return t, hit
    # box: slab test against half extents
    half = np.asarray(obj.size) / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    tmin = np.minimum(t1, t2).max(axis=-1)
    tmax = np.maximum(t1, t2).min(axis=-1)
    hit = (tmax >= tmin) & (tmax > _RAY_EPS)
    t = np.where(tmin > _RAY_EPS, tmin, tmax)
    return t, hit & (t > _RAY_EPS)


def render(
    scene: Scene, intr: CameraIntrinsics | None = None
) -> tuple[RgbdFrame, MaskStack, PointCloud]:
    """Ray-cast the scene; nearest hit per pixel wins.

    Returns the frame, hard one-hot masks (background channel last,
    no-hit pixels assigned to background), and the exact hit cloud.
    """
    intr = intr or scene.spec.intr
    h, w = intr.height, intr.width
    xs, ys = pixel_grid(h, w)
    dirs = np.stack(
        [(xs - intr.cx) / intr.fx, (ys - intr.cy) / intr.fy, np.ones((h, w))], axis=-1
    )

    bodies = [*scene.spec.objects, scene.spec.background]
    K = len(bodies)
    best_t = np.full((h, w), np.inf)
    winner = np.full((h, w), -1, dtype=np.int64)
    for k, (obj, (R, tr)) in enumerate(zip(bodies, scene.poses)):
        origin_l = -(R.T @ tr)
        dirs_l = dirs @ R  # R^T applied to each direction
        t, hit = _intersect(obj, (R, tr), origin_l, dirs_l)
        closer = hit & (t < best_t)
        best_t = np.where(closer, t, best_t)
        winner = np.where(closer, k, winner)

    valid = winner >= 0
    depth = np.where(valid, best_t, 0.0)
    points = np.where(valid[..., None], best_t[..., None] * dirs, 0.0)

    rgb = np.zeros((h, w, 3))
    for k, (obj, (R, tr)) in enumerate(zip(bodies, scene.poses)):
        sel = winner == k
        if not sel.any():
            continue
        local = (points[sel] - tr) @ R
        rgb[sel] = _texture_rgb(obj.texture, local)

    masks = np.zeros((K, h, w))
    for k in range(K):
        masks[k] = winner == k
    # no-hit pixels belong to the background channel so masks stay a
    # valid partition of unity
    masks[K - 1] = np.where(valid, masks[K - 1], 1.0)

    frame = RgbdFrame(rgb=rgb, depth=depth, valid=valid, intr=intr)
    return frame, MaskStack(masks), PointCloud(points, valid.copy(), ordered=True)


def action_to_twist(action: np.ndarray, scale: float = 1.0) -> Se3:
    """Fixed linear map from an action vector to the object-0 twist.

    The first three action entries are the translation in meters, the
    next up to three the axis-angle rotation in radians; missing
    entries are zero.
    """
    action = np.asarray(action, dtype=np.float64).ravel()
    if action.size > 6:
        raise ValidationError("actions have at most 6 dimensions")
    full = np.zeros(6)
    full[: action.size] = action * scale
    return Se3(omega=full[3:], trans=full[:3])


def step_scene(
    scene: Scene,
    motions: list[Se3] | None = None,
    action: np.ndarray | None = None,
) -> tuple[Scene, FlowFields]:
    """Advance every body one step and report exact flow ground truth.

    ``motions`` gives one camera-frame rigid motion per movable object
    (background stays fixed); alternatively ``action`` drives object 0
    through the fixed action map while the remaining objects follow
    their spec velocities.  Flows use exact surface correspondences from
    the pre-step render.
    """
    spec = scene.spec
    if (motions is None) == (action is None):
        raise ValidationError("pass exactly one of motions or action")
    if action is not None:
        motions = [action_to_twist(action)] + [
            o.velocity for o in spec.objects[1:]
        ]
    assert motions is not None
    if len(motions) != spec.num_objects:
        raise ValidationError(
            f"need {spec.num_objects} motions, got {len(motions)}"
        )

    frame, gmasks, cloud = render(scene)
    realized = [se3_realize(m) for m in motions]

    new_poses = []
    for k, (R, tr) in enumerate(scene.poses):
        if k < spec.num_objects:
            Rm, tm = realized[k]
            new_poses.append((Rm @ R, Rm @ tr + tm))
        else:
            new_poses.append((R.copy(), tr.copy()))
    scene2 = Scene(spec=spec, poses=new_poses)

    # exact moved point per pixel, from the hard winner mask
    winner = np.argmax(gmasks.masks, axis=0)
    moved = cloud.points.copy()
    for k, (Rm, tm) in enumerate(realized):
        sel = (winner == k) & cloud.valid
        moved[sel] = cloud.points[sel] @ Rm.T + tm

    V = np.where(cloud.valid[..., None], moved - cloud.points, 0.0)
    uv, in_front = project_points(moved, scene.spec.intr)
    xs, ys = pixel_grid(*cloud.shape)
    U = uv - np.stack([xs, ys], axis=-1)
    flow_valid = cloud.valid & in_front
    U[~flow_valid] = 0.0
    moved_cloud = PointCloud(moved, cloud.valid.copy(), ordered=False)
    O = occlusion_mask(moved_cloud, scene.spec.intr)
    return scene2, FlowFields(V, U, O, valid=flow_valid)


class SimEnv:
    """Closed-loop hook over a scene: observe frames, execute actions.

    Actions are clipped to the spec's symmetric bound and drive object 0
    through the fixed action map; other objects follow their spec
    velocities.  Optional Gaussian depth noise draws from a Philox
    stream, so an episode is a deterministic function of (spec, seed,
    actions).
    """

    def __init__(self, spec: SceneSpec, seed: int = 0):
        from .rng import subsystem_rng

        self.spec = spec
        self.scene = Scene.from_spec(spec)
        self._rng = subsystem_rng(seed, "sim-env")
        self.last_flow: FlowFields | None = None

    @property
    def intr(self) -> CameraIntrinsics:
        return self.spec.intr

    @property
    def action_dim(self) -> int:
        return self.spec.action_dim

    @property
    def action_bound(self) -> float:
        return self.spec.action_bound

    def observe(self) -> RgbdFrame:
        frame, _, _ = render(self.scene)
        if self.spec.depth_noise_std > 0:
            noise = self._rng.normal(0.0, self.spec.depth_noise_std, frame.shape)
            depth = np.where(frame.valid, np.maximum(frame.depth + noise, 1e-3), 0.0)
            frame = RgbdFrame(frame.rgb, depth, frame.valid, frame.intr)
        return frame

    def step(self, action: np.ndarray) -> RgbdFrame:
        action = np.clip(
            np.asarray(action, dtype=np.float64).ravel(),
            -self.spec.action_bound,
            self.spec.action_bound,
        )
        if action.size != self.spec.action_dim:
            raise ValidationError(
                f"expected {self.spec.action_dim}-dim action, got {action.size}"
            )
        self.scene, self.last_flow = step_scene(self.scene, action=action)
        return self.observe()

    def object_pose(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        return self.scene.poses[index]

    def camera_point(self, index: int, local_point: np.ndarray) -> np.ndarray:
        """Camera-frame position of a body-fixed point (evaluation aid)."""
        R, t = self.scene.poses[index]
        return R @ np.asarray(local_point, dtype=np.float64) + t

    def to_local(self, index: int, camera_point: np.ndarray) -> np.ndarray:
        R, t = self.scene.poses[index]
        return R.T @ (np.asarray(camera_point, dtype=np.float64) - t)


def rollout_scene(
    spec: SceneSpec, T: int, seed: int = 0, actions: np.ndarray | None = None
):
    """Render T frames, advancing objects by velocities or actions.

    When the spec declares an action dimension and no actions are
    passed, they are drawn uniformly inside the action bound.  Returns
    (frames, mask_stacks, flow_fields, actions) with T-1 flow records.
    """
    from .rng import subsystem_rng

    if T < 1:
        raise ValidationError("need at least one frame")
    rng = subsystem_rng(seed, "sim-dataset")
    env = SimEnv(spec, seed=seed)

    if spec.action_dim > 0:
        if actions is None:
            actions = rng.uniform(
                -spec.action_bound, spec.action_bound, size=(max(T - 1, 0), spec.action_dim)
            )
        actions = np.asarray(actions, dtype=np.float64)
        if actions.shape != (T - 1, spec.action_dim):
            raise ValidationError("actions must be (T-1, action_dim)")

    frames, masks, flows = [], [], []
    for t in range(T):
        frame, gmask, _ = render(env.scene)
        if spec.depth_noise_std > 0:
            noisy = env._rng.normal(0.0, spec.depth_noise_std, frame.shape)
            depth = np.where(frame.valid, np.maximum(frame.depth + noisy, 1e-3), 0.0)
            frame = RgbdFrame(frame.rgb, depth, frame.valid, frame.intr)
        frames.append(frame)
        masks.append(gmask)
        if t == T - 1:
            break
        if spec.action_dim > 0:
            env.scene, flow = step_scene(env.scene, action=actions[t])
        else:
            env.scene, flow = step_scene(
                env.scene, motions=[o.velocity for o in spec.objects]
            )
        flows.append(flow)
    return frames, masks, flows, actions


def generate_dataset(spec: SceneSpec, T: int, seed: int, path) -> "object":
    """Roll a scene and persist it in the dataset container format."""
    from . import dataio

    frames, masks, flows, actions = rollout_scene(spec, T, seed)
    seq = dataio.sequence_from_sim(spec, frames, masks, flows, actions)
    dataio.write_sequence(seq, path)
    return seq


# ---------------------------------------------------------------------------
# scene spec (de)serialization and stock scenes


def spec_to_dict(spec: SceneSpec) -> dict:
    def obj(o: ObjectSpec) -> dict:
        return {
            "shape": o.shape,
            "size": list(o.size),
            "pose": {"omega": o.pose.omega.tolist(), "trans": o.pose.trans.tolist()},
            "texture": {
                "kind": o.texture.kind,
                "color": list(o.texture.color),
                "color2": list(o.texture.color2),
                "cell": o.texture.cell,
                "seed": o.texture.seed,
            },
            "velocity": {
                "omega": o.velocity.omega.tolist(),
                "trans": o.velocity.trans.tolist(),
            },
        }

    return {
        "objects": [obj(o) for o in spec.objects],
        "background": obj(spec.background),
        "intrinsics": {
            "fx": spec.intr.fx,
            "fy": spec.intr.fy,
            "cx": spec.intr.cx,
            "cy": spec.intr.cy,
            "width": spec.intr.width,
            "height": spec.intr.height,
        },
        "depth_noise_std": spec.depth_noise_std,
        "action_dim": spec.action_dim,
        "action_bound": spec.action_bound,
    }


def spec_from_dict(data: dict) -> SceneSpec:
    def obj(d: dict) -> ObjectSpec:
        tex = d.get("texture", {})
        vel = d.get("velocity", {"omega": [0, 0, 0], "trans": [0, 0, 0]})
        return ObjectSpec(
            shape=d["shape"],
            size=tuple(d["size"]),
            pose=Se3(np.asarray(d["pose"]["omega"]), np.asarray(d["pose"]["trans"])),
            texture=Texture(
                kind=tex.get("kind", "uniform"),
                color=tuple(tex.get("color", (0.6, 0.6, 0.6))),
                color2=tuple(tex.get("color2", (0.25, 0.25, 0.25))),
                cell=tex.get("cell", 0.05),
                seed=tex.get("seed", 0),
            ),
            velocity=Se3(np.asarray(vel["omega"]), np.asarray(vel["trans"])),
        )

    try:
        ci = data["intrinsics"]
        intr = CameraIntrinsics(
            fx=ci["fx"], fy=ci["fy"], cx=ci["cx"], cy=ci["cy"],
            width=ci["width"], height=ci["height"],
        )
        return SceneSpec(
            objects=[obj(d) for d in data["objects"]],
            background=obj(data["background"]),
            intr=intr,
            depth_noise_std=data.get("depth_noise_std", 0.0),
            action_dim=data.get("action_dim", 0),
            action_bound=data.get("action_bound", 0.05),
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed scene spec: {exc}") from exc


def demo_scene(
    size: int = 32,
    textured: bool = True,
    object_velocity: Se3 | None = None,
    action_dim: int = 0,
    seed: int = 0,
) -> SceneSpec:
    """A desk-scale scene: one tilted box over a fronto-parallel plane."""
    intr = CameraIntrinsics(
        fx=1.1 * size, fy=1.1 * size, cx=(size - 1) / 2, cy=(size - 1) / 2,
        width=size, height=size,
    )
    if textured:
        obj_tex = Texture(kind="noise", cell=0.03, seed=seed * 7 + 1)
        bg_tex = Texture(kind="checker", color=(0.75, 0.7, 0.6), color2=(0.35, 0.4, 0.5), cell=0.11)
    else:
        obj_tex = Texture(kind="uniform", color=(0.55, 0.55, 0.55))
        bg_tex = Texture(kind="uniform", color=(0.55, 0.55, 0.55))
    box = ObjectSpec(
        shape="box",
        size=(0.26, 0.2, 0.16),
        pose=Se3(omega=(0.45, -0.35, 0.15), trans=(0.02, -0.03, 0.85)),
        texture=obj_tex,
        velocity=object_velocity or Se3.identity(),
    )
    background = ObjectSpec(
        shape="plane",
        size=(4.0, 4.0),
        pose=Se3(omega=(0.0, 0.0, 0.0), trans=(0.0, 0.0, 1.4)),
        texture=bg_tex,
    )
    return SceneSpec(
        objects=[box], background=background, intr=intr, action_dim=action_dim
    )


def motion_recovery_scene(seed: int = 0, textured: bool = True, size: int = 32) -> SceneSpec:
    """Jittered variant of the demo scene for repeated-seed experiments."""
    from .rng import subsystem_rng

    spec = demo_scene(size=size, textured=textured, seed=seed)
    rng = subsystem_rng(seed, "motion-recovery-scene")
    box = spec.objects[0]
    pose = Se3(
        box.pose.omega + rng.uniform(-0.03, 0.03, 3),
        box.pose.trans
        + np.concatenate([rng.uniform(-0.015, 0.015, 2), rng.uniform(-0.03, 0.03, 1)]),
    )
    jittered = ObjectSpec(box.shape, box.size, pose, box.texture, box.velocity)
    return SceneSpec(
        objects=[jittered],
        background=spec.background,
        intr=spec.intr,
        depth_noise_std=spec.depth_noise_std,
        action_dim=spec.action_dim,
        action_bound=spec.action_bound,
    )
