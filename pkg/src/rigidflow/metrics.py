"""Image and depth quality metrics for prediction evaluation."""

from __future__ import annotations

import numpy as np

from .errors import ValidationError

PSNR_CAP = 99.0
_MSE_FLOOR = 1e-10
SSIM_WINDOW = 7
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def psnr_from_mse(mse: float) -> float:
    """PSNR in dB for unit-peak signals; exact matches cap at 99 dB."""
    if mse < _MSE_FLOOR:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def _window_means(x: np.ndarray, win: int) -> np.ndarray:
    """Mean over every fully interior win x win window (2D input)."""
    c = np.cumsum(np.cumsum(x, axis=0), axis=1)
    c = np.pad(c, ((1, 0), (1, 0)))
    s = c[win:, win:] - c[:-win, win:] - c[win:, :-win] + c[:-win, :-win]
    return s / (win * win)


def ssim(pred: np.ndarray, gt: np.ndarray, win: int = SSIM_WINDOW) -> float:
    """Structural similarity with a uniform window and standard constants.

    Window moments are population statistics; the score is averaged
    over all fully interior windows, and over channels for color input.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValidationError("pred and gt must share shape")
    if pred.ndim == 2:
        pred, gt = pred[..., None], gt[..., None]
    h, w = pred.shape[:2]
    if h < win or w < win:
        raise ValidationError(f"frame must be at least {win}x{win} for SSIM")
    scores = []
    for c in range(pred.shape[2]):
        x, y = pred[..., c], gt[..., c]
        mx = _window_means(x, win)
        my = _window_means(y, win)
        vx = _window_means(x * x, win) - mx * mx
        vy = _window_means(y * y, win) - my * my
        cxy = _window_means(x * y, win) - mx * my
        num = (2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)
        den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)
        scores.append((num / den).mean())
    return float(np.mean(scores))


def image_metrics(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    """(PSNR dB, SSIM) of a predicted image against ground truth.

    Values must lie in [0, 1]; the MSE is taken over all pixels and
    channels.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValidationError("pred and gt must share shape")
    mse = float(((pred - gt) ** 2).mean())
    return psnr_from_mse(mse), ssim(pred, gt)


def depth_metrics(
    pred: np.ndarray, gt: np.ndarray, valid: np.ndarray | None = None
) -> tuple[float, float]:
    """(RMSE meters, AbsRel) of a predicted depth map over valid pixels."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValidationError("pred and gt must share shape")
    mask = np.ones(gt.shape, dtype=bool) if valid is None else np.asarray(valid, bool)
    if mask.shape != gt.shape:
        raise ValidationError("valid must match depth shape")
    if not mask.any():
        raise ValidationError("depth metrics need at least one valid pixel")
    if np.any(gt[mask] <= 0):
        raise ValidationError("ground-truth depth must be positive where valid")
    err = pred[mask] - gt[mask]
    rmse = float(np.sqrt((err * err).mean()))
    absrel = float((np.abs(err) / gt[mask]).mean())
    return rmse, absrel
