"""Shared builders and oracles for the test suite."""

import numpy as np
import pytest

from rigidflow.fit import FitOptions
from rigidflow.geometry import CameraIntrinsics, RgbdFrame, Se3, rodrigues
from rigidflow.losses import LossWeights
from rigidflow.rng import subsystem_rng
from rigidflow.sim import (
    Scene,
    SceneSpec,
    ObjectSpec,
    Texture,
    demo_scene,
    motion_recovery_scene,
    render,
    step_scene,
)

FULL_WEIGHTS = LossWeights(1.0, 1.0, 1.0, 0.01, 0.01, 0.0, alpha=2, knn_k=3)
M1_WEIGHTS = LossWeights(1.0, 1.0, 0.0, 0.0, 0.0, 0.0, alpha=2, knn_k=3)


def fd_gradient(f, x, eps=1e-5):
    """Central finite differences of a scalar function over an array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xp[idx] += eps
        xm = x.copy()
        xm[idx] -= eps
        g[idx] = (f(xp) - f(xm)) / (2.0 * eps)
    return g


def rel_err(analytic, numeric):
    """Vector-relative gradient agreement metric."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def random_frame(rng, h=8, w=8, intr=None):
    depth = 0.9 + 0.15 * rng.uniform(size=(h, w))
    rgb = rng.uniform(0.1, 0.9, size=(h, w, 3))
    return RgbdFrame(rgb, depth, np.ones((h, w), bool), intr)


def small_intrinsics(h=8, w=8):
    return CameraIntrinsics(
        fx=1.15 * w, fy=1.15 * h, cx=(w - 1) / 2, cy=(h - 1) / 2, width=w, height=h
    )


def recovery_pair(seed, textured=True, size=32):
    """Frame pair of the standard motion-recovery experiment.

    One textured box over a background plane, moved by 0.05 m in x and
    5 degrees about the vertical axis through its center.
    """
    spec = motion_recovery_scene(seed=seed, textured=textured, size=size)
    scene = Scene.from_spec(spec)
    f0, m0, _ = render(scene)
    center = scene.poses[0][1]
    omega = np.array([0.0, np.deg2rad(5.0), 0.0])
    Rm = rodrigues(omega)
    gt = Se3(omega, center - Rm @ center + np.array([0.05, 0.0, 0.0]))
    scene1, flow = step_scene(scene, motions=[gt])
    f1, m1, _ = render(scene1)
    return f0, f1, spec.intr, gt, m0


def rollout_scene_sequence(n_frames=8, seed=0):
    """Constant-velocity sequence for rollout-fidelity checks."""
    base = demo_scene(size=32, textured=True, seed=seed)
    box = base.objects[0]
    box2 = ObjectSpec(
        box.shape,
        box.size,
        Se3(box.pose.omega, (-0.08, -0.03, 0.85)),
        Texture(kind="noise", cell=0.06, seed=11 + seed),
    )
    spec = SceneSpec(objects=[box2], background=base.background, intr=base.intr)
    center = np.asarray(box2.pose.trans)
    omega = np.array([0.0, np.deg2rad(4.0), 0.0])
    Rm = rodrigues(omega)
    vel = Se3(omega, center - Rm @ center + np.array([0.035, 0.0, 0.0]))
    scene = Scene.from_spec(spec)
    frames, ids, occl = [], [], []
    for t in range(n_frames):
        f, m, _ = render(scene)
        frames.append(f)
        ids.append(np.argmax(m.masks, axis=0))
        if t < n_frames - 1:
            scene, flow = step_scene(scene, motions=[vel])
            occl.append(flow.occlusion)
    return frames, ids, occl, vel, spec


def servo_setup(seed):
    """Scene for the closed-loop reaching task (translation actions)."""
    base = demo_scene(size=32, textured=True, seed=seed)
    rng = subsystem_rng(seed, "servo-scene")
    box = base.objects[0]
    pose = Se3(
        box.pose.omega + rng.uniform(-0.05, 0.05, 3),
        box.pose.trans
        + np.concatenate([rng.uniform(-0.06, 0.06, 2), rng.uniform(-0.05, 0.05, 1)]),
    )
    obj = ObjectSpec(
        "box", (0.22, 0.18, 0.14), pose, Texture(kind="noise", cell=0.08, seed=seed * 7 + 1)
    )
    return SceneSpec(
        objects=[obj],
        background=base.background,
        intr=base.intr,
        action_dim=3,
        action_bound=0.05,
    )


def servo_goal(spec, seed):
    scene = Scene.from_spec(spec)
    center = scene.poses[0][1]
    rng = subsystem_rng(seed + 900, "goal")
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    goal = center + d * 0.25
    goal[2] = float(np.clip(goal[2], 0.55, 1.15))
    return goal


def erode_mask(mask, n=1):
    out = mask.copy()
    for _ in range(n):
        m = out.copy()
        out[1:, :] &= m[:-1, :]
        out[:-1, :] &= m[1:, :]
        out[:, 1:] &= m[:, :-1]
        out[:, :-1] &= m[:, 1:]
    return out


def depth_range3(d):
    """Max minus min depth over each 3x3 neighborhood."""
    mx = d.copy()
    mn = d.copy()
    for sy, sx in [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)]:
        r = np.roll(np.roll(d, sy, 0), sx, 1)
        mx = np.maximum(mx, r)
        mn = np.minimum(mn, r)
    return mx - mn


def covisible_mask(ctx_frame, ctx_id, gt_frame, gt_id, occlusions, pred_depth):
    """Pixels where the same smooth surface is visible in both frames.

    Excludes disocclusions, identity changes, and 3x3 depth
    discontinuities in the context, ground truth, and prediction,
    then erodes by two pixels so sample-based warping is judged away
    from boundaries.
    """
    covis = (ctx_id == gt_id) & gt_frame.valid & ctx_frame.valid
    for occ in occlusions:
        covis &= ~occ
    covis &= depth_range3(gt_frame.depth) < 0.05
    covis &= depth_range3(ctx_frame.depth) < 0.05
    covis &= depth_range3(pred_depth) < 0.05
    return erode_mask(covis, 2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
