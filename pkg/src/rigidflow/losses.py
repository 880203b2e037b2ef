"""Unsupervised objectives: photometric/depth reconstruction, windowed
point-cloud alignment, edge-aware second-order smoothness, and the
closed-form KL term, plus their weighted combination.

All losses are means over contributing pixels, which keeps the weight
vector resolution-independent.  Each differentiable loss has a
``*_grad`` companion returning the value together with the analytic
gradient; minima and masks are treated as locally constant, so the
gradients are exact almost everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .errors import NumericalError, ValidationError
from .geometry import PointCloud


@dataclass
class LossWeights:
    """Weights of the full objective plus its two shape parameters.

    lambda1..lambda6 weight, in order: RGB reconstruction, depth
    reconstruction, point-cloud alignment, scene-flow smoothness,
    optical-flow smoothness, and the KL term.  ``alpha`` selects
    absolute (1) or squared (2) reconstruction error; ``knn_k`` is the
    window radius in pixels for the alignment loss.
    """

    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda4: float = 0.1
    lambda5: float = 0.1
    lambda6: float = 0.0
    alpha: int = 2
    knn_k: int = 3

    def __post_init__(self):
        for i in range(1, 7):
            if getattr(self, f"lambda{i}") < 0:
                raise ValidationError("loss weights must be non-negative")
        if self.alpha not in (1, 2):
            raise ValidationError("alpha must be 1 or 2")
        if self.knn_k < 1:
            raise ValidationError("knn_k must be at least 1")

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([getattr(self, f"lambda{i}") for i in range(1, 7)])


@dataclass
class GaussianParams:
    """Diagonal Gaussian (mean, standard deviation per dimension)."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        self.sigma = np.atleast_1d(np.asarray(self.sigma, dtype=np.float64))
        if self.mu.shape != self.sigma.shape:
            raise ValidationError("mu and sigma must share shape")
        if np.any(self.sigma <= 0):
            raise ValidationError("sigma must be positive")


@dataclass
class LossBreakdown:
    """Unweighted loss terms and their weighted total."""

    rec_rgb: float = 0.0
    rec_depth: float = 0.0
    knn: float = 0.0
    smooth_scene: float = 0.0
    smooth_optical: float = 0.0
    kl: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


def reconstruction_loss(
    pred: np.ndarray,
    gt: np.ndarray,
    alpha: int,
    valid: np.ndarray | None = None,
) -> float:
    """Mean |pred - gt|^alpha over valid pixels (channels included)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValidationError("pred and gt must share shape")
    if alpha not in (1, 2):
        raise ValidationError("alpha must be 1 or 2")
    if valid is None:
        diff = pred - gt
        n = diff.size
    else:
        mask = np.asarray(valid, dtype=bool)
        if mask.shape != pred.shape:
            mask = np.broadcast_to(mask[..., None], pred.shape)
        n = int(mask.sum())
        if n == 0:
            raise ValidationError("reconstruction loss needs at least one valid pixel")
        diff = np.where(mask, pred - gt, 0.0)
    if n == 0:
        raise ValidationError("reconstruction loss needs at least one valid pixel")
    if alpha == 1:
        return float(np.abs(diff).sum() / n)
    return float((diff * diff).sum() / n)


def reconstruction_loss_grad(
    pred: np.ndarray,
    gt: np.ndarray,
    alpha: int,
    valid: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValidationError("pred and gt must share shape")
    if alpha not in (1, 2):
        raise ValidationError("alpha must be 1 or 2")
    if valid is None:
        mask = np.ones(pred.shape, dtype=bool)
    else:
        mask = np.asarray(valid, dtype=bool)
        if mask.shape != pred.shape:
            mask = np.broadcast_to(mask[..., None], pred.shape)
    n = int(mask.sum())
    if n == 0:
        raise ValidationError("reconstruction loss needs at least one valid pixel")
    diff = np.where(mask, pred - gt, 0.0)
    if alpha == 1:
        value = np.abs(diff).sum() / n
        grad = np.sign(diff) / n
    else:
        value = (diff * diff).sum() / n
        grad = 2.0 * diff / n
    return float(value), grad


def _directed_knn(
    a_pts: np.ndarray,
    a_valid: np.ndarray,
    b_pts: np.ndarray,
    b_valid: np.ndarray,
    k: int,
    metric: str,
):
    """Min window distance from each valid A pixel into B.

    Returns (best_dist, best_dy, best_dx, contrib) where contrib flags A
    pixels with at least one valid B pixel in their window.  Offsets are
    scanned in row-major order with strict improvement, so ties resolve
    to the lowest linear index of the matched B pixel.
    """
    h, w = a_valid.shape
    best = np.full((h, w), np.inf)
    best_dy = np.zeros((h, w), dtype=np.int64)
    best_dx = np.zeros((h, w), dtype=np.int64)
    for dy in range(-k, k + 1):
        ay0, ay1 = max(0, -dy), min(h, h - dy)
        by0, by1 = max(0, dy), min(h, h + dy)
        if ay0 >= ay1:
            continue
        for dx in range(-k, k + 1):
            ax0, ax1 = max(0, -dx), min(w, w - dx)
            bx0, bx1 = max(0, dx), min(w, w + dx)
            if ax0 >= ax1:
                continue
            a_sl = (slice(ay0, ay1), slice(ax0, ax1))
            b_sl = (slice(by0, by1), slice(bx0, bx1))
            if metric == "depth":
                d = np.abs(a_pts[a_sl + (2,)] - b_pts[b_sl + (2,)])
            else:
                diff = a_pts[a_sl] - b_pts[b_sl]
                d = np.sqrt((diff * diff).sum(axis=-1))
            d = np.where(b_valid[b_sl], d, np.inf)
            better = d < best[a_sl]
            best[a_sl] = np.where(better, d, best[a_sl])
            best_dy[a_sl] = np.where(better, dy, best_dy[a_sl])
            best_dx[a_sl] = np.where(better, dx, best_dx[a_sl])
    contrib = a_valid & np.isfinite(best)
    return best, best_dy, best_dx, contrib


def knn_alignment_loss(
    P_hat: PointCloud,
    P_obs: PointCloud,
    k: int,
    metric: str = "euclidean",
) -> float:
    """Bidirectional windowed nearest-neighbor distance between clouds.

    For each valid pixel the nearest valid point of the other cloud is
    searched in a (2k+1)^2 pixel window; the loss is the mean matched
    distance, summed over both directions.  ``metric`` selects full 3D
    Euclidean matching (default) or depth-only matching.
    """
    if P_hat.shape != P_obs.shape:
        raise ValidationError("clouds must share HxW")
    if k < 1:
        raise ValidationError("window radius k must be at least 1")
    if metric not in ("euclidean", "depth"):
        raise ValidationError(f"unknown knn metric {metric!r}")
    total = 0.0
    n_dirs = 0
    for src, dst in ((P_hat, P_obs), (P_obs, P_hat)):
        best, _, _, contrib = _directed_knn(
            src.points, src.valid, dst.points, dst.valid, k, metric
        )
        n = int(contrib.sum())
        if n == 0:
            continue
        n_dirs += 1
        total += best[contrib].sum() / n
    if n_dirs == 0:
        raise ValidationError("no valid pixel has a valid window neighbor")
    return float(total)


def knn_alignment_loss_grad(
    P_hat: PointCloud,
    P_obs: PointCloud,
    k: int,
    metric: str = "euclidean",
    tip_smooth: float = 1e-4,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Alignment loss plus gradients w.r.t. both clouds' points.

    Gradient flows only through the matched pairs.  The distance cone is
    Charbonnier-smoothed in the gradient only (factor d/sqrt(d^2+mu^2),
    mu = ``tip_smooth`` meters): already-matched points would otherwise
    pull with unit-magnitude vectors at any residual, drowning the
    signal of genuinely moving points during fitting.  The returned
    value is the exact cone loss.
    """
    if P_hat.shape != P_obs.shape:
        raise ValidationError("clouds must share HxW")
    if k < 1:
        raise ValidationError("window radius k must be at least 1")
    if metric not in ("euclidean", "depth"):
        raise ValidationError(f"unknown knn metric {metric!r}")

    h, w = P_hat.shape
    grad_a = np.zeros((h, w, 3))
    grad_b = np.zeros((h, w, 3))
    total = 0.0
    n_dirs = 0
    for src, dst, g_src, g_dst in (
        (P_hat, P_obs, grad_a, grad_b),
        (P_obs, P_hat, grad_b, grad_a),
    ):
        best, bdy, bdx, contrib = _directed_knn(
            src.points, src.valid, dst.points, dst.valid, k, metric
        )
        n = int(contrib.sum())
        if n == 0:
            continue
        n_dirs += 1
        total += best[contrib].sum() / n

        yy, xx = np.nonzero(contrib)
        my, mx = yy + bdy[contrib], xx + bdx[contrib]
        if metric == "depth":
            dz = src.points[yy, xx, 2] - dst.points[my, mx, 2]
            unit = np.zeros((yy.size, 3))
            unit[:, 2] = dz / np.sqrt(dz * dz + tip_smooth * tip_smooth)
        else:
            diff = src.points[yy, xx] - dst.points[my, mx]
            dist = best[contrib]
            unit = diff / np.sqrt(dist * dist + tip_smooth * tip_smooth)[:, None]
        np.add.at(g_src, (yy, xx), unit / n)
        np.subtract.at(g_dst, (my, mx), unit / n)
    if n_dirs == 0:
        raise ValidationError("no valid pixel has a valid window neighbor")
    return float(total), grad_a, grad_b


def _edge_weights(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """exp(-|grad I|) per direction on the common interior.

    Image gradients use central differences, with the magnitude averaged
    over color channels.
    """
    if image.ndim == 2:
        image = image[..., None]
    gx = np.abs(image[1:-1, 2:] - image[1:-1, :-2]).mean(axis=-1) / 2.0
    gy = np.abs(image[2:, 1:-1] - image[:-2, 1:-1]).mean(axis=-1) / 2.0
    return np.exp(-gx), np.exp(-gy)


def smoothness_loss(
    F: np.ndarray,
    image: np.ndarray,
    valid: np.ndarray | None = None,
) -> float:
    """Edge-aware second-order smoothness of a flow field.

    Mean over interior pixels and channels of the absolute second
    difference of F along each axis, each weighted by exp(-|grad I|)
    along that axis.
    """
    F = np.asarray(F, dtype=np.float64)
    if F.ndim == 2:
        F = F[..., None]
    h, w, C = F.shape
    if h < 3 or w < 3:
        raise ValidationError("smoothness needs at least a 3x3 field")
    image = np.asarray(image, dtype=np.float64)
    if image.shape[:2] != (h, w):
        raise ValidationError("image must match flow HxW")
    wx, wy = _edge_weights(image)
    if valid is None:
        ok_x = ok_y = None
        denom = C * (h - 2) * (w - 2)
    else:
        valid = np.asarray(valid, dtype=bool)
        ok_x = valid[1:-1, :-2] & valid[1:-1, 1:-1] & valid[1:-1, 2:]
        ok_y = valid[:-2, 1:-1] & valid[1:-1, 1:-1] & valid[2:, 1:-1]
        denom = C * (int(ok_x.sum()) + int(ok_y.sum())) / 2.0
        if denom == 0:
            return 0.0
    d2x = F[1:-1, 2:] - 2.0 * F[1:-1, 1:-1] + F[1:-1, :-2]
    d2y = F[2:, 1:-1] - 2.0 * F[1:-1, 1:-1] + F[:-2, 1:-1]
    tx = np.abs(d2x) * wx[..., None]
    ty = np.abs(d2y) * wy[..., None]
    if ok_x is not None:
        tx = np.where(ok_x[..., None], tx, 0.0)
        ty = np.where(ok_y[..., None], ty, 0.0)
    return float((tx.sum() + ty.sum()) / denom)


def smoothness_loss_grad(
    F: np.ndarray,
    image: np.ndarray,
    valid: np.ndarray | None = None,
    kink_smooth: float = 1e-6,
) -> tuple[float, np.ndarray]:
    """Smoothness value and gradient w.r.t. F.

    Like the alignment loss, the absolute value is Charbonnier-smoothed
    in the gradient only (sign(x) -> x/sqrt(x^2+mu^2)) so noise-scale
    second differences do not emit full-magnitude sign flips; the
    returned value is the exact L1 form.
    """
    F = np.asarray(F, dtype=np.float64)
    squeeze = F.ndim == 2
    if squeeze:
        F = F[..., None]
    h, w, C = F.shape
    if h < 3 or w < 3:
        raise ValidationError("smoothness needs at least a 3x3 field")
    image = np.asarray(image, dtype=np.float64)
    if image.shape[:2] != (h, w):
        raise ValidationError("image must match flow HxW")
    wx, wy = _edge_weights(image)

    if valid is None:
        ok_x = np.ones((h - 2, w - 2), dtype=bool)
        ok_y = np.ones((h - 2, w - 2), dtype=bool)
    else:
        valid = np.asarray(valid, dtype=bool)
        ok_x = valid[1:-1, :-2] & valid[1:-1, 1:-1] & valid[1:-1, 2:]
        ok_y = valid[:-2, 1:-1] & valid[1:-1, 1:-1] & valid[2:, 1:-1]

    d2x = F[1:-1, 2:] - 2.0 * F[1:-1, 1:-1] + F[1:-1, :-2]
    d2y = F[2:, 1:-1] - 2.0 * F[1:-1, 1:-1] + F[:-2, 1:-1]

    denom = C * (int(ok_x.sum()) + int(ok_y.sum())) / 2.0
    grad = np.zeros((h, w, C))
    if denom == 0:
        return 0.0, grad[..., 0] if squeeze else grad

    tx = np.where(ok_x[..., None], np.abs(d2x) * wx[..., None], 0.0)
    ty = np.where(ok_y[..., None], np.abs(d2y) * wy[..., None], 0.0)
    value = (tx.sum() + ty.sum()) / denom

    mu2 = kink_smooth * kink_smooth
    sgn_x = d2x / np.sqrt(d2x * d2x + mu2)
    sgn_y = d2y / np.sqrt(d2y * d2y + mu2)
    sx = np.where(ok_x[..., None], sgn_x * wx[..., None], 0.0) / denom
    sy = np.where(ok_y[..., None], sgn_y * wy[..., None], 0.0) / denom
    grad[1:-1, 2:] += sx
    grad[1:-1, 1:-1] += -2.0 * sx
    grad[1:-1, :-2] += sx
    grad[2:, 1:-1] += sy
    grad[1:-1, 1:-1] += -2.0 * sy
    grad[:-2, 1:-1] += sy
    return float(value), grad[..., 0] if squeeze else grad


def kl_unit_gaussian(q: GaussianParams) -> float:
    """KL divergence of a diagonal Gaussian from the unit Gaussian."""
    s2 = q.sigma * q.sigma
    return float(0.5 * np.sum(s2 + q.mu * q.mu - 1.0 - np.log(s2)))


def total_loss(
    rec_rgb: float,
    rec_depth: float,
    knn: float,
    smooth_scene: float,
    smooth_optical: float,
    kl: float,
    w: LossWeights,
) -> LossBreakdown:
    """Combine unweighted terms into the weighted full objective."""
    terms = np.array([rec_rgb, rec_depth, knn, smooth_scene, smooth_optical, kl])
    if not np.all(np.isfinite(terms)):
        raise NumericalError(f"non-finite loss terms: {terms}")
    return LossBreakdown(
        rec_rgb=float(rec_rgb),
        rec_depth=float(rec_depth),
        knn=float(knn),
        smooth_scene=float(smooth_scene),
        smooth_optical=float(smooth_optical),
        kl=float(kl),
        total=float(w.lambdas @ terms),
    )
