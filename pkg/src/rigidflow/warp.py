"""Forward warping by optical flow, diffusion filling of holes, and
occlusion-gated compositing of the next frame.

Splatting scatters every source pixel to the four bilinear neighbors of
its flow target.  Channel values are averaged under softmax importance
weights (nearer surfaces win), while the reported coverage is the plain
bilinear mass, so identity warps have coverage one regardless of the
importance field and pixels nothing lands on are detectable holes.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError

# Pixels with bilinear coverage at or below this are treated as holes.
COVERAGE_EPS = 1e-6

# Softmax sharpness in 1/m applied to the importance field; with
# importance = -depth this makes a surface 0.3 m nearer dominate by ~3e6.
DEFAULT_SHARPNESS = 50.0


def _bilinear_corners(tu, tv):
    """Corner indices and weights plus weight derivatives w.r.t. (tu, tv)."""
    u0 = np.floor(tu).astype(np.int64)
    v0 = np.floor(tv).astype(np.int64)
    fu = tu - u0
    fv = tv - v0
    corners = []
    for du, dv in ((0, 0), (1, 0), (0, 1), (1, 1)):
        wu = fu if du else 1.0 - fu
        wv = fv if dv else 1.0 - fv
        dwu = (1.0 if du else -1.0) * wv
        dwv = (1.0 if dv else -1.0) * wu
        corners.append((u0 + du, v0 + dv, wu * wv, dwu, dwv))
    return corners


def softmax_splat(
    channels: np.ndarray,
    flow: np.ndarray,
    importance: np.ndarray,
    sharpness: float = DEFAULT_SHARPNESS,
    valid: np.ndarray | None = None,
    return_cache: bool = False,
):
    """Forward-warp ``channels`` along ``flow`` with softmax weighting.

    Args:
        channels: HxWxC source values.
        flow: HxWx2 per-pixel displacement in pixels, (du, dv) order.
        importance: HxW source importance; contributions are weighted by
            exp(sharpness * importance) inside each target pixel.
        valid: optional HxW source mask; sources with non-finite flow or
            importance are dropped as well.

    Returns:
        (warped, coverage): warped HxWxC values (zero where coverage is
        at or below COVERAGE_EPS) and HxW bilinear coverage.
    """
    channels = np.asarray(channels, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    importance = np.asarray(importance, dtype=np.float64)
    if channels.ndim != 3:
        raise ValidationError("channels must be HxWxC")
    h, w = channels.shape[:2]
    if flow.shape != (h, w, 2) or importance.shape != (h, w):
        raise ValidationError("flow and importance must match channels HxW")

    src = np.isfinite(flow).all(axis=-1) & np.isfinite(importance)
    if valid is not None:
        src &= np.asarray(valid, dtype=bool)

    C = channels.shape[2]
    xs, ys = np.meshgrid(np.arange(w), np.arange(h))
    tu = xs + flow[..., 0]
    tv = ys + flow[..., 1]
    corners = _bilinear_corners(np.where(src, tu, -10.0), np.where(src, tv, -10.0))
    oks = [
        src & (b > 0.0) & (cu >= 0) & (cu < w) & (cv >= 0) & (cv < h)
        for cu, cv, b, _, _ in corners
    ]

    # Per-target shift of the softmax exponent: exp() stays in range for
    # any importance field and cancels exactly in the normalization.
    shift = np.full((h, w), -np.inf)
    for (cu, cv, _, _, _), ok in zip(corners, oks):
        np.maximum.at(shift.reshape(-1), (cv[ok] * w + cu[ok]).ravel(), importance[ok])

    num = np.zeros((h, w, C))
    den = np.zeros((h, w))
    cov = np.zeros((h, w))
    pair_weights = []
    flat_vals = channels.reshape(-1, C)
    for (cu, cv, b, _, _), ok in zip(corners, oks):
        idx = (cv[ok] * w + cu[ok]).ravel()
        pw = np.zeros((h, w))
        pw[ok] = np.exp(sharpness * (importance[ok] - shift.reshape(-1)[idx]))
        pair_weights.append(pw)
        bw = (b * pw)[ok].ravel()
        np.add.at(den.reshape(-1), idx, bw)
        np.add.at(cov.reshape(-1), idx, b[ok].ravel())
        np.add.at(num.reshape(-1, C), idx, bw[:, None] * flat_vals[ok.ravel()])

    filled = (cov > COVERAGE_EPS) & (den > 0.0)
    safe_den = np.where(filled, den, 1.0)
    warped = np.where(filled[..., None], num / safe_den[..., None], 0.0)

    if not return_cache:
        return warped, cov
    cache = {
        "channels": channels,
        "sharpness": sharpness,
        "corners": corners,
        "oks": oks,
        "pair_weights": pair_weights,
        "num": num,
        "den": den,
        "cov": cov,
        "filled": filled,
    }
    return warped, cov, cache


def softmax_splat_backward(
    cache: dict,
    grad_warped: np.ndarray,
    grad_coverage: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cotangents of softmax_splat w.r.t. (channels, flow, importance).

    Hole gating and the per-target exponent shift are treated as
    constant; the shift cancels analytically in the normalized output,
    so the returned importance gradient is exact.
    """
    channels = cache["channels"]
    h, w, C = channels.shape
    num, den, filled = cache["num"], cache["den"], cache["filled"]

    safe_den = np.where(filled, den, 1.0)
    g_num = np.where(filled[..., None], grad_warped / safe_den[..., None], 0.0)
    g_den = np.where(
        filled, -(grad_warped * num).sum(axis=-1) / (safe_den * safe_den), 0.0
    )
    g_cov = np.zeros((h, w)) if grad_coverage is None else grad_coverage

    grad_channels = np.zeros_like(channels)
    grad_flow = np.zeros((h, w, 2))
    grad_importance = np.zeros((h, w))
    flat_vals = channels.reshape(-1, C)

    for (cu, cv, b, dbu, dbv), ok, pw in zip(
        cache["corners"], cache["oks"], cache["pair_weights"]
    ):
        rows, cols = cv[ok], cu[ok]
        gn = g_num[rows, cols]  # (n, C)
        gd = g_den[rows, cols]
        gc = g_cov[rows, cols]
        vals = flat_vals[ok.ravel()]
        wv = pw[ok]
        bv = b[ok]
        # dL/d value through the numerator
        grad_channels[ok] += (bv * wv)[:, None] * gn
        # dL/d (softmax weight) and dL/d (bilinear weight)
        dot = (vals * gn).sum(axis=1) + gd
        g_w = bv * dot
        g_b = wv * dot + gc
        grad_importance[ok] += cache["sharpness"] * wv * g_w
        grad_flow[ok] += np.stack([dbu[ok] * g_b, dbv[ok] * g_b], axis=1)

    return grad_channels, grad_flow, grad_importance


def _neighbor_sum(x: np.ndarray) -> np.ndarray:
    """Sum of in-frame 4-neighbors, per pixel (edges see fewer)."""
    s = np.zeros_like(x)
    s[1:, ...] += x[:-1, ...]
    s[:-1, ...] += x[1:, ...]
    s[:, 1:, ...] += x[:, :-1, ...]
    s[:, :-1, ...] += x[:, 1:, ...]
    return s


def _neighbor_count(h: int, w: int) -> np.ndarray:
    return _neighbor_sum(np.ones((h, w)))


def inpaint_diffusion(
    channels: np.ndarray,
    holes: np.ndarray,
    iterations: int = 500,
    tol: float = 1e-5,
) -> np.ndarray:
    """Fill hole pixels with the fixed point of 4-neighbor averaging.

    Non-hole pixels are clamped to the input, so the fill is the
    discrete harmonic extension of the boundary values.  Iteration stops
    when the largest per-pixel change drops below ``tol`` or after
    ``iterations`` sweeps.
    """
    channels = np.asarray(channels, dtype=np.float64)
    holes = np.asarray(holes, dtype=bool)
    if channels.shape[:2] != holes.shape:
        raise ValidationError("holes must match channels HxW")
    if holes.all():
        raise ValidationError("cannot inpaint a frame that is all holes")
    if not holes.any():
        return channels.copy()

    deg = _neighbor_count(*holes.shape)[..., None]
    out = channels.copy()
    hole3 = holes[..., None]
    for _ in range(iterations):
        avg = _neighbor_sum(out) / deg
        new = np.where(hole3, avg, out)
        delta = np.abs(new - out).max()
        out = new
        if delta < tol:
            break
    return out


def inpaint_diffusion_backward(
    grad_out: np.ndarray,
    holes: np.ndarray,
    iterations: int = 500,
    tol: float = 1e-5,
) -> np.ndarray:
    """Cotangent of inpaint_diffusion w.r.t. the input channels.

    Solves the adjoint of the harmonic-extension system by the same
    Jacobi iteration the forward pass uses; values under holes receive
    zero gradient because the converged fill ignores them.
    """
    holes = np.asarray(holes, dtype=bool)
    if not holes.any():
        return grad_out.copy()
    deg = _neighbor_count(*holes.shape)[..., None]
    hole3 = np.broadcast_to(holes[..., None], grad_out.shape)

    # y solves (I - L^T) y = grad_h on hole pixels, with L the averaging
    # operator rows of the holes; L^T y spreads y/deg to the neighbors.
    y = np.where(hole3, grad_out, 0.0)
    g_h = y.copy()
    for _ in range(iterations):
        spread = _neighbor_sum(np.where(hole3, y / deg, 0.0))
        new = np.where(hole3, g_h + spread, 0.0)
        delta = np.abs(new - y).max()
        y = new
        if delta < tol:
            break
    boundary_flow = _neighbor_sum(np.where(hole3, y / deg, 0.0))
    return np.where(hole3, 0.0, grad_out + boundary_flow)


def composite_next_frame(
    fw_rgb: np.ndarray,
    fw_depth: np.ndarray,
    in_rgb: np.ndarray,
    in_depth: np.ndarray,
    occlusion: np.ndarray,
):
    """Select forward-warped values where visible, inpainted where occluded.

    Returns (rgb, depth); the composed frame is valid everywhere.
    """
    occlusion = np.asarray(occlusion, dtype=bool)
    h, w = occlusion.shape
    if (
        fw_rgb.shape != (h, w, 3)
        or in_rgb.shape != (h, w, 3)
        or fw_depth.shape != (h, w)
        or in_depth.shape != (h, w)
    ):
        raise ValidationError("all composite planes must share HxW")
    rgb = np.where(occlusion[..., None], in_rgb, fw_rgb)
    depth = np.where(occlusion, in_depth, fw_depth)
    return rgb, depth
