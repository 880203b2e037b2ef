"""Gradient-based estimation of per-object rigid motions from RGB-D
frame pairs, multi-step rollout, and an action-conditioned motion model.

The fit optimizes per-pixel mask logits and K twists through the full
prediction pipeline (transform, flows, splatting, inpainting,
compositing) against the observed next frame.  Every stage ships a
hand-written backward pass and the chain is composed explicitly; there
is no autodiff anywhere.  Twist vectors are ordered
[tx, ty, tz, wx, wy, wz] (translation first).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from itertools import permutations

import numpy as np

from .errors import NumericalError, ValidationError
from .geometry import (
    CameraIntrinsics,
    FlowFields,
    MaskStack,
    PointCloud,
    RgbdFrame,
    RigidMotionSet,
    Se3,
    depth_to_pointcloud,
    occlusion_mask,
    pixel_grid,
    project_points,
    skew,
    project_points_backward,
    rodrigues,
    rodrigues_batch,
    rotation_log,
    transform_points,
    transform_points_backward,
)
from .losses import (
    LossBreakdown,
    LossWeights,
    knn_alignment_loss,
    knn_alignment_loss_grad,
    reconstruction_loss,
    reconstruction_loss_grad,
    smoothness_loss,
    smoothness_loss_grad,
    total_loss,
)
from .rng import subsystem_rng
from .warp import (
    COVERAGE_EPS,
    DEFAULT_SHARPNESS,
    composite_next_frame,
    inpaint_diffusion,
    inpaint_diffusion_backward,
    softmax_splat,
    softmax_splat_backward,
)


@dataclass
class FitOptions:
    """Optimizer configuration for fit_pair.

    ``init`` selects how the descent is started.  The default
    ``matched`` seeds masks and twists from windowed correspondences
    (clustered motion vectors, rigid absolute orientation per cluster);
    descent from a neutral start provably falls into mask/motion local
    minima on rigid scenes, so ``neutral`` (uniform-plus-noise masks,
    zero twists) is kept only as the degenerate baseline.  The matching
    cost uses exactly the signals the active loss weights trust, so a
    reconstruction-only configuration gets no geometric matching.

    ``mask_step_scale`` rescales the descent direction of the mask
    logits relative to the twists; mean-normalized losses make raw
    logit gradients smaller by roughly the pixel count, so the default
    scales by H*W.
    """

    K: int = 3
    steps: int = 100
    lr: float = 1.0
    mask_init: str = "seeded"
    seed: int = 0
    convergence_tol: float = 1e-9
    knn_metric: str = "euclidean"
    sharpness: float = DEFAULT_SHARPNESS
    inpaint_iterations: int = 500
    inpaint_tol: float = 1e-5
    mask_step_scale: float | None = None
    init: str = "matched"
    init_radius: int = 5
    init_mask_margin: float = 3.0
    # Softmax splatting is near-discontinuous where a close surface
    # barely grazes a pixel over a far one (softmax mass collapses while
    # bilinear coverage stays high).  Such contested pixels are treated
    # as holes, and the raw gradient is clipped elementwise as a second
    # guard so razor pixels cannot drown the descent direction.
    min_softmax_mass: float = 0.05
    grad_clip: float = 1e3

    def __post_init__(self):
        if self.K < 1:
            raise ValidationError("K must be at least 1")
        if self.steps < 1:
            raise ValidationError("steps must be at least 1")
        if self.lr <= 0:
            raise ValidationError("lr must be positive")
        if self.mask_init not in ("uniform", "seeded"):
            raise ValidationError("mask_init must be 'uniform' or 'seeded'")
        if self.init not in ("matched", "neutral"):
            raise ValidationError("init must be 'matched' or 'neutral'")
        if self.init_radius < 1:
            raise ValidationError("init_radius must be at least 1")


@dataclass
class SceneModel:
    """Fitted masks and twists for one frame pair.

    The masks are aligned with the first frame of the fitted pair.
    ``twists`` is K x 6 in [t, w] order; ``motion`` exposes the same
    state as a RigidMotionSet.
    """

    mask_logits: np.ndarray
    twists: np.ndarray
    intr: CameraIntrinsics
    weights: LossWeights
    opts: FitOptions
    loss_trace: list[LossBreakdown] = field(default_factory=list)
    converged: bool = False

    @property
    def masks(self) -> np.ndarray:
        return softmax_masks(self.mask_logits)

    @property
    def motion(self) -> RigidMotionSet:
        return RigidMotionSet(
            masks=MaskStack(self.masks),
            motions=[twist_to_se3(t) for t in self.twists],
        )


@dataclass
class ActionModel:
    """Per-object affine map from actions to twists.

    ``A`` is K x 6 x n and ``b`` K x 6; object k responds to action a
    with twist A[k] @ a + b[k].  ``moving_object`` is the object whose
    twist responds most strongly to the action.
    """

    A: np.ndarray
    b: np.ndarray
    action_dim: int
    intr: CameraIntrinsics
    weights: LossWeights
    opts: FitOptions
    moving_object: int = 0
    degenerate: bool = False

    def __post_init__(self):
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.b))):
            raise ValidationError("action model entries must be finite")

    def twists_for(self, action: np.ndarray) -> np.ndarray:
        action = np.asarray(action, dtype=np.float64).ravel()
        if action.size != self.action_dim:
            raise ValidationError(
                f"expected {self.action_dim}-dim action, got {action.size}"
            )
        return self.A @ action + self.b


def twist_to_se3(twist: np.ndarray) -> Se3:
    twist = np.asarray(twist, dtype=np.float64).reshape(6)
    return Se3(omega=twist[3:], trans=twist[:3])


def se3_to_twist(m: Se3) -> np.ndarray:
    return np.concatenate([m.trans, m.omega])


def softmax_masks(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def softmax_masks_backward(masks: np.ndarray, grad_masks: np.ndarray) -> np.ndarray:
    inner = (masks * grad_masks).sum(axis=0, keepdims=True)
    return masks * (grad_masks - inner)


# ---------------------------------------------------------------------------
# forward pipeline


def _pipeline_forward(
    frame: RgbdFrame,
    intr: CameraIntrinsics,
    masks: np.ndarray,
    omegas: np.ndarray,
    trans: np.ndarray,
    opts: FitOptions,
    extra_channels: np.ndarray | None = None,
    want_cache: bool = False,
) -> dict:
    """Transform, flow, splat, inpaint, composite: one prediction step.

    ``extra_channels`` rides along through splat and inpaint with the
    frame content (used to advance masks during rollout).
    """
    cloud = depth_to_pointcloud(frame, intr)
    phat, tcache = transform_points(cloud.points, masks, omegas, trans)

    V = np.where(cloud.valid[..., None], phat - cloud.points, 0.0)
    uv, in_front = project_points(phat, intr)
    xs, ys = pixel_grid(intr.height, intr.width)
    U = uv - np.stack([xs, ys], axis=-1)
    flow_valid = cloud.valid & in_front
    U[~flow_valid] = 0.0

    phat_cloud = PointCloud(phat, cloud.valid.copy(), ordered=False)
    O = occlusion_mask(phat_cloud, intr)

    zhat = phat[..., 2]
    channels = np.concatenate([frame.rgb, zhat[..., None]], axis=-1)
    if extra_channels is not None:
        channels = np.concatenate([channels, extra_channels], axis=-1)
    warped, cov, scache = softmax_splat(
        channels,
        U,
        importance=-zhat,
        sharpness=opts.sharpness,
        valid=flow_valid,
        return_cache=True,
    )

    # Holes: analytic disocclusions, splat holes, and contested pixels
    # whose softmax mass is negligible against their bilinear coverage.
    holes = (
        O
        | (cov <= COVERAGE_EPS)
        | (scache["den"] < opts.min_softmax_mass * cov)
    )
    inpainted = inpaint_diffusion(
        warped, holes, iterations=opts.inpaint_iterations, tol=opts.inpaint_tol
    )
    pred_rgb, pred_depth = composite_next_frame(
        warped[..., :3], warped[..., 3], inpainted[..., :3], inpainted[..., 3], holes
    )

    out = {
        "cloud": cloud,
        "phat": phat,
        "phat_cloud": phat_cloud,
        "V": V,
        "U": U,
        "flow_valid": flow_valid,
        "O": O,
        "holes": holes,
        "cov": cov,
        "warped": warped,
        "inpainted": inpainted,
        "pred_rgb": pred_rgb,
        "pred_depth": pred_depth,
    }
    if want_cache:
        out["tcache"] = tcache
        out["scache"] = scache
    return out


def predict_next_frame(
    frame: RgbdFrame,
    motion: RigidMotionSet,
    intr: CameraIntrinsics | None = None,
    opts: FitOptions | None = None,
) -> tuple[RgbdFrame, FlowFields]:
    """Predict the next RGB-D frame under a motion set."""
    intr = intr or frame.intr
    if intr is None:
        raise ValidationError("prediction needs camera intrinsics")
    opts = opts or FitOptions(K=motion.masks.K)
    omegas = np.stack([m.omega for m in motion.motions])
    trans = np.stack([m.trans for m in motion.motions])
    fw = _pipeline_forward(frame, intr, motion.masks.masks, omegas, trans, opts)
    pred = RgbdFrame(
        rgb=np.clip(fw["pred_rgb"], 0.0, 1.0),
        depth=np.maximum(fw["pred_depth"], 1e-6),
        valid=np.ones(frame.shape, dtype=bool),
        intr=intr,
    )
    flows = FlowFields(fw["V"], fw["U"], fw["O"], valid=fw["flow_valid"])
    return pred, flows


# ---------------------------------------------------------------------------
# loss and gradient of the full pipeline


def pipeline_loss(
    frame_t: RgbdFrame,
    frame_t1: RgbdFrame,
    intr: CameraIntrinsics,
    logits: np.ndarray,
    twists: np.ndarray,
    w: LossWeights,
    opts: FitOptions,
    obs_cloud: PointCloud | None = None,
) -> LossBreakdown:
    value, *_ = _loss_impl(
        frame_t, frame_t1, intr, logits, twists, w, opts, obs_cloud, want_grad=False
    )
    return value


def pipeline_loss_grad(
    frame_t: RgbdFrame,
    frame_t1: RgbdFrame,
    intr: CameraIntrinsics,
    logits: np.ndarray,
    twists: np.ndarray,
    w: LossWeights,
    opts: FitOptions,
    obs_cloud: PointCloud | None = None,
) -> tuple[LossBreakdown, np.ndarray, np.ndarray]:
    """Full-objective value plus gradients w.r.t. (logits, twists)."""
    return _loss_impl(
        frame_t, frame_t1, intr, logits, twists, w, opts, obs_cloud, want_grad=True
    )


def _loss_impl(
    frame_t: RgbdFrame,
    frame_t1: RgbdFrame,
    intr: CameraIntrinsics,
    logits: np.ndarray,
    twists: np.ndarray,
    w: LossWeights,
    opts: FitOptions,
    obs_cloud: PointCloud | None,
    want_grad: bool,
):
    masks = softmax_masks(logits)
    omegas = twists[:, 3:]
    trans = twists[:, :3]
    fw = _pipeline_forward(
        frame_t, intr, masks, omegas, trans, opts, want_cache=want_grad
    )
    if obs_cloud is None:
        obs_cloud = depth_to_pointcloud(frame_t1, intr)

    if not want_grad:
        # value-only path for line-search probes
        rec_rgb = reconstruction_loss(fw["pred_rgb"], frame_t1.rgb, w.alpha)
        rec_depth = reconstruction_loss(
            fw["pred_depth"], frame_t1.depth, w.alpha, valid=frame_t1.valid
        )
        knn = knn_alignment_loss(
            fw["phat_cloud"], obs_cloud, k=w.knn_k, metric=opts.knn_metric
        )
        sm_s = smoothness_loss(fw["V"], frame_t.rgb, valid=fw["cloud"].valid)
        sm_o = smoothness_loss(fw["U"], frame_t.rgb, valid=fw["flow_valid"])
        return total_loss(rec_rgb, rec_depth, knn, sm_s, sm_o, 0.0, w), None, None

    rec_rgb, g_pred_rgb = reconstruction_loss_grad(
        fw["pred_rgb"], frame_t1.rgb, w.alpha
    )
    rec_depth, g_pred_depth = reconstruction_loss_grad(
        fw["pred_depth"], frame_t1.depth, w.alpha, valid=frame_t1.valid
    )
    knn, g_knn_a, _ = knn_alignment_loss_grad(
        fw["phat_cloud"], obs_cloud, k=w.knn_k, metric=opts.knn_metric
    )
    sm_s, g_V = smoothness_loss_grad(fw["V"], frame_t.rgb, valid=fw["cloud"].valid)
    sm_o, g_U = smoothness_loss_grad(fw["U"], frame_t.rgb, valid=fw["flow_valid"])
    breakdown = total_loss(rec_rgb, rec_depth, knn, sm_s, sm_o, 0.0, w)

    # reconstruction -> composite -> { warped , inpainted }
    holes3 = fw["holes"][..., None]
    g_pred = np.concatenate(
        [w.lambda1 * g_pred_rgb, w.lambda2 * g_pred_depth[..., None]], axis=-1
    )
    g_warped = np.where(holes3, 0.0, g_pred)
    g_inpainted = np.where(holes3, g_pred, 0.0)
    g_warped += inpaint_diffusion_backward(
        g_inpainted, fw["holes"], opts.inpaint_iterations, opts.inpaint_tol
    )

    g_channels, g_flow, g_imp = softmax_splat_backward(fw["scache"], g_warped)

    # flows: splat flow gradient plus the optical smoothness term
    g_U_total = g_flow + w.lambda5 * g_U
    phat = fw["phat"]
    g_phat = project_points_backward(
        g_U_total, phat, intr, phat[..., 2] > 1e-4
    )
    g_phat[~fw["flow_valid"]] = 0.0

    # scene flow and alignment act on the transformed cloud directly
    g_phat += np.where(
        fw["cloud"].valid[..., None], w.lambda4 * g_V, 0.0
    )
    g_phat += w.lambda3 * g_knn_a
    # the splatted depth channel is phat's Z; importance is its negative
    g_phat[..., 2] += g_channels[..., 3] - g_imp

    g_masks, g_omegas, g_trans = transform_points_backward(fw["tcache"], g_phat)
    g_logits = softmax_masks_backward(masks, g_masks)
    g_twists = np.concatenate([g_trans, g_omegas], axis=1)
    return breakdown, g_logits, g_twists


# ---------------------------------------------------------------------------
# optimizer


def init_logits(opts: FitOptions, shape: tuple[int, int]) -> np.ndarray:
    """Uniform mask logits, plus seeded symmetry-breaking noise."""
    logits = np.zeros((opts.K, *shape))
    if opts.mask_init == "seeded":
        rng = subsystem_rng(opts.seed, "fit-mask-init")
        logits += 0.01 * rng.standard_normal(logits.shape)
    return logits


# meters of matching cost per unit of RGB patch-RMS distance
_COLOR_SCALE = 0.5
# the 3D term is a proximity prior, not a correspondence measure: at the
# true material match it equals the motion magnitude itself, so at full
# weight it drags matches toward small displacements (normal flow)
_PROXIMITY_PRIOR = 0.25
_PATCH_RADIUS = 1


def _box_mean(x: np.ndarray, r: int) -> np.ndarray:
    """Border-aware mean over (2r+1)^2 windows."""
    pad = np.zeros((x.shape[0] + 1, x.shape[1] + 1))
    np.cumsum(np.cumsum(x, axis=0), axis=1, out=pad[1:, 1:])
    h, w_ = x.shape
    y0 = np.clip(np.arange(h) - r, 0, h)
    y1 = np.clip(np.arange(h) + r + 1, 0, h)
    x0 = np.clip(np.arange(w_) - r, 0, w_)
    x1 = np.clip(np.arange(w_) + r + 1, 0, w_)
    s = (
        pad[np.ix_(y1, x1)] - pad[np.ix_(y0, x1)]
        - pad[np.ix_(y1, x0)] + pad[np.ix_(y0, x0)]
    )
    count = (y1 - y0)[:, None] * (x1 - x0)[None, :]
    return s / count


def _window_match(frame_t, frame_t1, cloud0, cloud1, w: LossWeights, radius: int):
    """Per-pixel best match of frame_t into frame_t1 in a pixel window.

    The cost mixes the distances the active weights trust: patch color
    for the photometric term, depth-image distance for depth
    reconstruction, and (down-weighted) 3D distance for the alignment
    term.  Returns (motion vectors, matched mask).
    """
    h, w_ = cloud0.shape
    best = np.full((h, w_), np.inf)
    bdy = np.zeros((h, w_), dtype=np.int64)
    bdx = np.zeros((h, w_), dtype=np.int64)
    for dy in range(-radius, radius + 1):
        ay0, ay1 = max(0, -dy), min(h, h - dy)
        by0, by1 = max(0, dy), min(h, h + dy)
        if ay0 >= ay1:
            continue
        for dx in range(-radius, radius + 1):
            ax0, ax1 = max(0, -dx), min(w_, w_ - dx)
            bx0, bx1 = max(0, dx), min(w_, w_ + dx)
            if ax0 >= ax1:
                continue
            a_sl = (slice(ay0, ay1), slice(ax0, ax1))
            b_sl = (slice(by0, by1), slice(bx0, bx1))
            cost = np.zeros((ay1 - ay0, ax1 - ax0))
            if w.lambda3 > 0:
                diff = cloud0.points[a_sl] - cloud1.points[b_sl]
                cost += (
                    w.lambda3
                    * _PROXIMITY_PRIOR
                    * np.sqrt((diff * diff).sum(-1))
                )
            if w.lambda2 > 0:
                cost += w.lambda2 * np.abs(
                    frame_t.depth[a_sl] - frame_t1.depth[b_sl]
                )
            if w.lambda1 > 0:
                cdiff = ((frame_t.rgb[a_sl] - frame_t1.rgb[b_sl]) ** 2).sum(-1)
                patch = np.sqrt(np.maximum(_box_mean(cdiff, _PATCH_RADIUS), 0.0))
                cost += w.lambda1 * _COLOR_SCALE * patch
            cost = np.where(cloud1.valid[b_sl], cost, np.inf)
            better = cost < best[a_sl]
            best[a_sl] = np.where(better, cost, best[a_sl])
            bdy[a_sl] = np.where(better, dy, bdy[a_sl])
            bdx[a_sl] = np.where(better, dx, bdx[a_sl])
    matched = cloud0.valid & np.isfinite(best)
    yy, xx = np.nonzero(matched)

    def patch_rms(qy, qx):
        acc = np.zeros(yy.shape)
        cnt = np.zeros(yy.shape)
        for oy in range(-_PATCH_RADIUS, _PATCH_RADIUS + 1):
            for ox in range(-_PATCH_RADIUS, _PATCH_RADIUS + 1):
                sy, sx = yy + oy, xx + ox
                ty, tx = qy + oy, qx + ox
                inb = (
                    (sy >= 0) & (sy < h) & (sx >= 0) & (sx < w_)
                    & (ty >= 0) & (ty < h) & (tx >= 0) & (tx < w_)
                )
                sy_c, sx_c = np.clip(sy, 0, h - 1), np.clip(sx, 0, w_ - 1)
                ty_c, tx_c = np.clip(ty, 0, h - 1), np.clip(tx, 0, w_ - 1)
                cd = ((frame_t.rgb[sy_c, sx_c] - frame_t1.rgb[ty_c, tx_c]) ** 2).sum(-1)
                acc += np.where(inb, cd, 0.0)
                cnt += inb
        return np.sqrt(acc / np.maximum(cnt, 1))

    def cost_at(qy, qx):
        inside = (qy >= 0) & (qy < h) & (qx >= 0) & (qx < w_)
        qy_c, qx_c = np.clip(qy, 0, h - 1), np.clip(qx, 0, w_ - 1)
        c = np.zeros(yy.shape)
        if w.lambda3 > 0:
            diff = cloud0.points[yy, xx] - cloud1.points[qy_c, qx_c]
            c += w.lambda3 * _PROXIMITY_PRIOR * np.sqrt((diff * diff).sum(-1))
        if w.lambda2 > 0:
            c += w.lambda2 * np.abs(frame_t.depth[yy, xx] - frame_t1.depth[qy_c, qx_c])
        if w.lambda1 > 0:
            c += w.lambda1 * _COLOR_SCALE * patch_rms(qy_c, qx_c)
        return np.where(inside & cloud1.valid[qy_c, qx_c], c, np.inf)

    def parabola(cm, c0, cp):
        den = cm - 2.0 * c0 + cp
        ok = np.isfinite(cm) & np.isfinite(cp) & (den > 1e-12)
        return np.where(ok, np.clip(0.5 * (cm - cp) / np.where(ok, den, 1.0), -0.6, 0.6), 0.0)

    # sub-pixel refinement: parabola fit of the cost around the integer
    # argmin, then bilinear resampling of the target cloud
    my, mx = yy + bdy[matched], xx + bdx[matched]
    c0v = best[matched]
    du = parabola(cost_at(my, mx - 1), c0v, cost_at(my, mx + 1))
    dv = parabola(cost_at(my - 1, mx), c0v, cost_at(my + 1, mx))
    fy, fx_ = my + dv, mx + du
    y0, x0 = np.floor(fy).astype(np.int64), np.floor(fx_).astype(np.int64)
    y0 = np.clip(y0, 0, h - 2)
    x0 = np.clip(x0, 0, w_ - 2)
    wy, wx = fy - y0, fx_ - x0
    corners = [
        (y0, x0, (1 - wy) * (1 - wx)),
        (y0, x0 + 1, (1 - wy) * wx),
        (y0 + 1, x0, wy * (1 - wx)),
        (y0 + 1, x0 + 1, wy * wx),
    ]
    target = np.zeros((yy.size, 3))
    depth_s = np.zeros(yy.size)
    color_s = np.zeros(yy.size)
    all_valid = np.ones(yy.size, dtype=bool)
    depths = []
    for cy, cx, cw in corners:
        all_valid &= cloud1.valid[cy, cx]
        target += cw[:, None] * cloud1.points[cy, cx]
        depth_s += cw * frame_t1.depth[cy, cx]
        if w.lambda1 > 0:
            color_s += cw * patch_rms(cy, cx)
        depths.append(cloud1.points[cy, cx, 2])
    # accept the sub-pixel candidate only when it is a genuine
    # improvement and does not interpolate across a depth discontinuity
    cost_sub = np.zeros(yy.size)
    if w.lambda3 > 0:
        cost_sub += (
            w.lambda3
            * _PROXIMITY_PRIOR
            * np.linalg.norm(cloud0.points[yy, xx] - target, axis=1)
        )
    if w.lambda2 > 0:
        cost_sub += w.lambda2 * np.abs(frame_t.depth[yy, xx] - depth_s)
    if w.lambda1 > 0:
        cost_sub += w.lambda1 * _COLOR_SCALE * color_s
    spread = np.max(depths, axis=0) - np.min(depths, axis=0)
    use = all_valid & (spread < 0.05) & (cost_sub < c0v)
    target[~use] = cloud1.points[my, mx][~use]

    motion = np.zeros((h, w_, 3))
    motion[yy, xx] = target - cloud0.points[yy, xx]
    return motion, matched


def _kmeans(pts: np.ndarray, K: int, iters: int = 25) -> np.ndarray:
    """K-means on motion vectors, seeded from magnitude quantile bands.

    The deterministic seeding puts one initial center per band of
    |motion|, which separates a static background from moving bodies
    far more reliably than random seeding.
    """
    mags = np.linalg.norm(pts, axis=1)
    order = np.argsort(mags, kind="stable")
    bands = np.array_split(order, K)
    centers = np.stack(
        [pts[b].mean(axis=0) if b.size else pts[order[-1]] for b in bands]
    )
    for _ in range(iters):
        d2 = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        labels = d2.argmin(axis=1)
        for k in range(K):
            sel = labels == k
            if sel.any():
                centers[k] = pts[sel].mean(axis=0)
    return centers


def _kabsch(X: np.ndarray, Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rigid motion R, T with Y ~ R X + T."""
    cx, cy = X.mean(axis=0), Y.mean(axis=0)
    H = (X - cx).T @ (Y - cy)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R, cy - R @ cx


def _trimmed_kabsch(X: np.ndarray, Y: np.ndarray, rounds: int = 3):
    """Kabsch with iterative outlier trimming on rigid residuals."""
    R, T = _kabsch(X, Y)
    for _ in range(rounds):
        resid = np.linalg.norm(Y - (X @ R.T + T), axis=1)
        keep = resid <= max(3.0 * np.median(resid), 1e-4)
        if keep.sum() < 3 or keep.all():
            break
        X, Y = X[keep], Y[keep]
        R, T = _kabsch(X, Y)
    return R, T


def _icp_point_refine(
    X: np.ndarray,
    target: PointCloud,
    intr: CameraIntrinsics,
    R: np.ndarray,
    T: np.ndarray,
    iterations: int = 6,
    window: int = 2,
) -> tuple[np.ndarray, np.ndarray]:
    """Point-to-point ICP with projective association.

    Texture-free surfaces give the window matcher only normal-flow
    vectors; re-associating under a global rigid hypothesis recovers the
    tangential component from silhouettes and oblique faces.
    """
    h, w_ = target.shape
    for _ in range(iterations):
        Xp = X @ R.T + T
        uv, in_front = project_points(Xp, intr)
        col = np.floor(uv[..., 0] + 0.5).astype(np.int64)
        row = np.floor(uv[..., 1] + 0.5).astype(np.int64)
        best = np.full(X.shape[0], np.inf)
        match = np.zeros((X.shape[0], 3))
        for dy in range(-window, window + 1):
            for dx in range(-window, window + 1):
                r_, c_ = row + dy, col + dx
                ok = in_front & (r_ >= 0) & (r_ < h) & (c_ >= 0) & (c_ < w_)
                r_c, c_c = np.clip(r_, 0, h - 1), np.clip(c_, 0, w_ - 1)
                ok &= target.valid[r_c, c_c]
                cand = target.points[r_c, c_c]
                d = np.where(ok, np.linalg.norm(cand - Xp, axis=1), np.inf)
                better = d < best
                best = np.where(better, d, best)
                match[better] = cand[better]
        good = np.isfinite(best)
        if good.sum() < 6:
            break
        R2, T2 = _trimmed_kabsch(X[good], match[good])
        if np.linalg.norm(R2 - R) < 1e-12 and np.linalg.norm(T2 - T) < 1e-12:
            R, T = R2, T2
            break
        R, T = R2, T2
    return R, T


def matched_init(
    frame_t: RgbdFrame,
    frame_t1: RgbdFrame,
    intr: CameraIntrinsics,
    w: LossWeights,
    opts: FitOptions,
) -> tuple[np.ndarray, np.ndarray]:
    """Correspondence-seeded (mask logits, twists) for fit_pair.

    Window-matches the frames, clusters the resulting motion vectors
    into K groups, and solves each cluster's rigid motion in closed
    form.  Falls back to the neutral start when no loss term provides a
    matching signal.
    """
    logits = init_logits(opts, frame_t.shape)
    twists = np.zeros((opts.K, 6))
    if w.lambda1 <= 0 and w.lambda2 <= 0 and w.lambda3 <= 0:
        return logits, twists
    cloud0 = depth_to_pointcloud(frame_t, intr)
    cloud1 = depth_to_pointcloud(frame_t1, intr)
    motion, matched = _window_match(
        frame_t, frame_t1, cloud0, cloud1, w, opts.init_radius
    )
    if matched.sum() < 4 * opts.K:
        return logits, twists

    vecs = motion[matched]
    centers = _kmeans(vecs, opts.K)
    d2 = ((motion[..., None, :] - centers[None, None, :, :]) ** 2).sum(-1)
    labels = np.where(matched, d2.argmin(axis=-1), -1)

    # Texture-starved frames leave the window matcher with normal flow
    # only (aperture); the rigid refinement below then re-associates
    # under a global hypothesis.  Textured frames skip it: sub-pixel
    # photometric matches are already better than its quantized floor.
    gx = np.abs(np.diff(frame_t.rgb, axis=1)).mean()
    gy = np.abs(np.diff(frame_t.rgb, axis=0)).mean()
    texture_starved = (gx + gy) < 0.02
    background = int(np.argmin(np.linalg.norm(centers, axis=1)))

    for k in range(opts.K):
        sel = labels == k
        mask_sel = sel
        if sel.sum() >= 3:
            X = cloud0.points[sel]
            # boundary pixels mismatch by whole texture cells; trim them
            R, T = _trimmed_kabsch(X, X + motion[sel])
            if (
                w.lambda3 > 0
                and texture_starved
                and k != background
                and sel.sum() >= 10
            ):
                # grow the support to the mover's depth slab: aperture
                # leaves only silhouette strips in the motion cluster,
                # but the rigid body includes the whole surface patch
                ys2, xs2 = np.nonzero(sel)
                z_m = np.median(cloud0.points[sel][:, 2])
                pad = opts.init_radius + 2
                box = np.zeros_like(sel)
                box[
                    max(ys2.min() - pad, 0) : ys2.max() + pad + 1,
                    max(xs2.min() - pad, 0) : xs2.max() + pad + 1,
                ] = True
                support = (
                    cloud0.valid
                    & box
                    & (np.abs(cloud0.points[..., 2] - z_m) < 0.05)
                )
                if support.sum() >= 10:
                    R, T = _icp_point_refine(
                        cloud0.points[support], cloud1, intr, R, T,
                        window=opts.init_radius,
                    )
                    mask_sel = support
            twists[k] = np.concatenate([T, rotation_log(R)])
        elif sel.any():
            twists[k, :3] = motion[sel].mean(axis=0)
        logits[k][mask_sel] += opts.init_mask_margin
    return logits, twists


def fit_pair(
    frame_t: RgbdFrame,
    frame_t1: RgbdFrame,
    w: LossWeights | None = None,
    opts: FitOptions | None = None,
    intr: CameraIntrinsics | None = None,
    init_mask_logits: np.ndarray | None = None,
    init_twists: np.ndarray | None = None,
) -> SceneModel:
    """Fit mask logits and K twists to one unlabeled frame pair.

    Gradient descent with backtracking line search (halving, Armijo
    c = 1e-4) on the full objective of the composed prediction pipeline;
    deterministic given the seed.  Optional ``init_*`` arrays warm-start
    the optimization (used for tracking and the permutation tests).
    """
    w = w or LossWeights()
    opts = opts or FitOptions()
    intr = intr or frame_t.intr
    if intr is None:
        raise ValidationError("fit_pair needs camera intrinsics")
    if frame_t.shape != frame_t1.shape:
        raise ValidationError("frames must share HxW")
    if frame_t1.intr is not None and frame_t1.intr != intr:
        raise ValidationError("frames must share intrinsics")

    h, w_ = frame_t.shape
    if init_mask_logits is None and init_twists is None and opts.init == "matched":
        logits, twists = matched_init(frame_t, frame_t1, intr, w, opts)
    else:
        logits, twists = init_logits(opts, (h, w_)), np.zeros((opts.K, 6))
    if init_mask_logits is not None:
        logits = np.array(init_mask_logits, dtype=np.float64)
    if init_twists is not None:
        twists = np.array(init_twists, dtype=np.float64)
    if logits.shape != (opts.K, h, w_):
        raise ValidationError("init mask logits must be KxHxW")
    if twists.shape != (opts.K, 6):
        raise ValidationError("init twists must be Kx6")

    mask_scale = (
        float(h * w_) if opts.mask_step_scale is None else opts.mask_step_scale
    )
    obs_cloud = depth_to_pointcloud(frame_t1, intr)

    def evaluate(lg, tw):
        try:
            return pipeline_loss(
                frame_t, frame_t1, intr, lg, tw, w, opts, obs_cloud
            ).total
        except (ValidationError, NumericalError, FloatingPointError):
            return np.inf

    breakdown, g_logits, g_twists = pipeline_loss_grad(
        frame_t, frame_t1, intr, logits, twists, w, opts, obs_cloud
    )
    if not np.isfinite(breakdown.total):
        raise NumericalError("non-finite loss at initialization")
    trace = [breakdown]
    converged = False
    armijo_c = 1e-4
    t_prev = opts.lr

    for _ in range(opts.steps):
        d_logits = np.clip(g_logits, -opts.grad_clip, opts.grad_clip)
        d_twists = np.clip(g_twists, -opts.grad_clip, opts.grad_clip)
        descent = mask_scale * (g_logits * d_logits).sum() + (
            g_twists * d_twists
        ).sum()
        if descent <= 0 or not np.isfinite(descent):
            converged = True
            break
        # warm-started backtracking: resume near the last accepted step,
        # rebounding by x4 so the pace can recover after a short step
        t = min(opts.lr, 4.0 * t_prev)
        f0 = trace[-1].total
        accepted = False
        while t >= 1e-13 * opts.lr:
            cand_logits = logits - t * mask_scale * d_logits
            cand_twists = twists - t * d_twists
            f_new = evaluate(cand_logits, cand_twists)
            if f_new < f0 - armijo_c * t * descent:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            converged = True
            break
        t_prev = t
        logits, twists = cand_logits, cand_twists
        breakdown, g_logits, g_twists = pipeline_loss_grad(
            frame_t, frame_t1, intr, logits, twists, w, opts, obs_cloud
        )
        trace.append(breakdown)
        if abs(f0 - breakdown.total) <= opts.convergence_tol * max(1.0, abs(f0)):
            converged = True
            break

    return SceneModel(
        mask_logits=logits,
        twists=twists,
        intr=intr,
        weights=w,
        opts=opts,
        loss_trace=trace,
        converged=converged,
    )


# ---------------------------------------------------------------------------
# rollout


def _advance_masks(masks: np.ndarray, fw: dict, opts: FitOptions) -> np.ndarray:
    """Carry masks to the next frame through the same warp as the image."""
    warped, _ = softmax_splat(
        np.moveaxis(masks, 0, -1),
        fw["U"],
        importance=-fw["phat"][..., 2],
        sharpness=opts.sharpness,
        valid=fw["flow_valid"],
    )
    filled = inpaint_diffusion(
        warped, fw["holes"], iterations=opts.inpaint_iterations, tol=opts.inpaint_tol
    )
    nxt = np.clip(np.moveaxis(filled, -1, 0), 1e-8, None)
    return nxt / nxt.sum(axis=0, keepdims=True)


def rollout(
    model: SceneModel | ActionModel,
    context: list[RgbdFrame],
    actions: np.ndarray | None = None,
    steps: int = 0,
    masks: np.ndarray | None = None,
) -> list[tuple[RgbdFrame, FlowFields]]:
    """Predict ``steps`` future frames from the last context frame.

    A SceneModel repeats its constant twists; an ActionModel maps each
    action to per-object twists (one action per step required).  Masks
    are taken from the model (advanced from the penultimate context
    frame when two or more are given, since fitted masks align with the
    first frame of the fitted pair) and are re-warped alongside every
    predicted frame; each prediction is re-lifted for the next step.
    """
    if steps < 0:
        raise ValidationError("steps must be non-negative")
    if steps == 0:
        return []
    if not context:
        raise ValidationError("need at least one context frame")
    if isinstance(model, ActionModel):
        if actions is None:
            raise ValidationError("ActionModel rollout needs an action sequence")
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        if actions.shape[0] != steps:
            raise ValidationError("need exactly one action per rollout step")
    opts, intr, weights = model.opts, model.intr, model.weights

    if masks is None:
        if isinstance(model, SceneModel):
            masks = model.masks
        else:
            if len(context) < 2:
                raise ValidationError(
                    "ActionModel rollout needs two context frames to fit masks"
                )
            fitted = fit_pair(context[-2], context[-1], weights, opts, intr=intr)
            masks = fitted.masks
    if isinstance(model, SceneModel) and len(context) >= 2:
        # advance pair-aligned masks onto the rollout start frame
        omegas, trans = model.twists[:, 3:], model.twists[:, :3]
        fw = _pipeline_forward(context[-2], intr, masks, omegas, trans, opts)
        masks = _advance_masks(masks, fw, opts)

    current = context[-1]
    out: list[tuple[RgbdFrame, FlowFields]] = []
    for t in range(steps):
        if isinstance(model, SceneModel):
            twists = model.twists
        else:
            twists = model.twists_for(actions[t])
        omegas, trans = twists[:, 3:], twists[:, :3]
        fw = _pipeline_forward(
            current, intr, masks, omegas, trans, opts
        )
        pred = RgbdFrame(
            rgb=np.clip(fw["pred_rgb"], 0.0, 1.0),
            depth=np.maximum(fw["pred_depth"], 1e-6),
            valid=np.ones(current.shape, dtype=bool),
            intr=intr,
        )
        flows = FlowFields(fw["V"], fw["U"], fw["O"], valid=fw["flow_valid"])
        out.append((pred, flows))
        masks = _advance_masks(masks, fw, opts)
        current = pred
    return out


# ---------------------------------------------------------------------------
# action model fitting


def _match_objects(ref_masks: np.ndarray, masks: np.ndarray) -> tuple[int, ...]:
    """Permutation of ``masks`` channels best overlapping ``ref_masks``."""
    K = ref_masks.shape[0]
    ref_hard = np.argmax(ref_masks, axis=0)
    hard = np.argmax(masks, axis=0)
    overlap = np.zeros((K, K))
    for i in range(K):
        for j in range(K):
            overlap[i, j] = np.count_nonzero((ref_hard == i) & (hard == j))
    best, best_score = tuple(range(K)), -1.0
    for perm in permutations(range(K)):
        score = sum(overlap[i, perm[i]] for i in range(K))
        if score > best_score:
            best, best_score = perm, score
    return best


def fit_action_model(
    dataset: list[tuple[RgbdFrame, np.ndarray, RgbdFrame]],
    K: int,
    w: LossWeights | None = None,
    opts: FitOptions | None = None,
    intr: CameraIntrinsics | None = None,
) -> ActionModel:
    """Regress per-object twists on actions across fitted transitions.

    Each (frame_t, action, frame_t1) transition is fitted independently;
    object identity across transitions is resolved by mask-overlap
    matching against the first transition.  A rank-deficient action
    design matrix is reported via ``degenerate`` and a warning, with the
    minimum-norm least-squares solution returned.
    """
    w = w or LossWeights()
    opts = opts or FitOptions(K=K)
    if opts.K != K:
        opts = replace(opts, K=K)
    if not dataset:
        raise ValidationError("empty transition dataset")
    n = np.asarray(dataset[0][1], dtype=np.float64).ravel().size
    if len(dataset) < 2 * K * n:
        raise ValidationError(
            f"need at least {2 * K * n} transitions for K={K}, n={n}"
        )
    intr = intr or dataset[0][0].intr
    if intr is None:
        raise ValidationError("fit_action_model needs camera intrinsics")

    ref_masks = None
    centroids = np.zeros((K, 3))
    twist_rows = np.zeros((len(dataset), K, 6))
    act_rows = np.zeros((len(dataset), n))
    for i, (f_t, action, f_t1) in enumerate(dataset):
        model = fit_pair(f_t, f_t1, w, opts, intr=intr)
        masks = model.masks
        if ref_masks is None:
            ref_masks = masks
            perm: tuple[int, ...] = tuple(range(K))
            cloud = depth_to_pointcloud(f_t, intr)
            hard = np.argmax(masks, axis=0)
            for k in range(K):
                sel = (hard == k) & cloud.valid
                centroids[k] = (
                    cloud.points[sel].mean(axis=0) if sel.any() else 0.0
                )
        else:
            perm = _match_objects(ref_masks, masks)
        twist_rows[i] = model.twists[list(perm)]
        act_rows[i] = np.asarray(action, dtype=np.float64).ravel()

    # A camera-origin twist is nearly degenerate in (T, omega) for small
    # distant objects; regress the well-determined centered form (object
    # centroid displacement + rotation) and map back, which is exact to
    # first order because the cross product is linear.
    for k in range(K):
        R_batch = rodrigues_batch(twist_rows[:, k, 3:])
        twist_rows[:, k, :3] = (
            np.einsum("bij,j->bi", R_batch, centroids[k])
            + twist_rows[:, k, :3]
            - centroids[k]
        )

    X = np.concatenate([act_rows, np.ones((len(dataset), 1))], axis=1)
    rank = int(np.linalg.matrix_rank(X))
    degenerate = rank < n + 1
    if degenerate:
        warnings.warn(
            f"action regression is rank-deficient (rank {rank} < {n + 1}); "
            "returning the minimum-norm solution",
            RuntimeWarning,
            stacklevel=2,
        )
    A = np.zeros((K, 6, n))
    b = np.zeros((K, 6))
    for k in range(K):
        # individual transitions occasionally fit badly; trim on rigid
        # regression residuals before trusting the map
        Xk, Yk = X, twist_rows[:, k, :]
        theta, *_ = np.linalg.lstsq(Xk, Yk, rcond=None)
        for _ in range(2):
            resid = np.linalg.norm(Yk - Xk @ theta, axis=1)
            keep = resid <= max(3.0 * np.median(resid), 1e-9)
            if keep.sum() <= n + 1 or keep.all():
                break
            Xk, Yk = Xk[keep], Yk[keep]
            theta, *_ = np.linalg.lstsq(Xk, Yk, rcond=None)
        A[k] = theta[:n].T
        b[k] = theta[n]
        # back to origin-anchored twists: T = T_centered + centroid x omega
        cx = skew(centroids[k])
        A[k][:3] += cx @ A[k][3:]
        b[k][:3] += cx @ b[k][3:]
    moving = int(np.argmax([np.linalg.norm(A[k]) for k in range(K)]))
    return ActionModel(
        A=A,
        b=b,
        action_dim=n,
        intr=intr,
        weights=w,
        opts=opts,
        moving_object=moving,
        degenerate=degenerate,
    )
