"""Image export and report figures.

PPM export covers raw frames and hue-coded flow fields; the report
helpers render matplotlib figures next to the delimited outputs the CLI
writes.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import ValidationError

_PNG_METADATA = {"Software": "rigidflow"}


def write_ppm(rgb: np.ndarray, path) -> None:
    """Write an HxWx3 image in [0,1] as binary PPM."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValidationError("PPM export expects HxWx3")
    data = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    h, w = rgb.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def _hsv_to_rgb(h, s, v):
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - f * s)
    t = v * (1.0 - (1.0 - f) * s)
    out = np.zeros((*h.shape, 3))
    table = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    for idx, (r, g, b) in enumerate(table):
        sel = i == idx
        out[sel, 0] = r[sel]
        out[sel, 1] = g[sel]
        out[sel, 2] = b[sel]
    return out


def flow_to_rgb(flow: np.ndarray, max_mag: float | None = None) -> np.ndarray:
    """Colorize a 2-channel flow by the standard hue-by-angle wheel.

    Hue encodes direction, saturation the magnitude relative to
    ``max_mag`` (the field's own maximum when omitted).
    """
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValidationError("flow colorization expects HxWx2")
    mag = np.linalg.norm(flow, axis=-1)
    if max_mag is None:
        max_mag = float(mag.max())
    ang = np.arctan2(flow[..., 1], flow[..., 0])
    hue = (ang / (2.0 * np.pi)) % 1.0
    sat = np.clip(mag / max_mag, 0.0, 1.0) if max_mag > 0 else np.zeros_like(mag)
    return _hsv_to_rgb(hue, sat, np.ones_like(hue))


def depth_to_rgb(depth: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """Grayscale depth visualization, near bright, far dark."""
    depth = np.asarray(depth, dtype=np.float64)
    if valid is None:
        valid = np.isfinite(depth) & (depth > 0)
    vals = depth[valid]
    lo, hi = (vals.min(), vals.max()) if vals.size else (0.0, 1.0)
    span = max(hi - lo, 1e-9)
    g = np.where(valid, 1.0 - (depth - lo) / span * 0.9, 0.0)
    return np.repeat(g[..., None], 3, axis=-1)


def save_eval_figure(rows: list[dict], path) -> None:
    """Per-frame metric curves next to the eval CSV."""
    frames = [r["frame"] for r in rows]
    fig, axes = plt.subplots(2, 2, figsize=(8, 6), sharex=True)
    for ax, key, label in zip(
        axes.ravel(),
        ("psnr_rgb", "ssim", "rmse", "absrel"),
        ("PSNR (dB)", "SSIM", "depth RMSE (m)", "AbsRel"),
    ):
        ax.plot(frames, [r[key] for r in rows], marker="o", ms=3)
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
    for ax in axes[1]:
        ax.set_xlabel("frame")
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_PNG_METADATA)
    plt.close(fig)


def save_servo_figure(record, path) -> None:
    """Distance-to-goal trace of one servoing episode."""
    dists = [s[2] for s in record.steps]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(dists, marker="o", ms=3)
    if record.initial_distance > 0:
        ax.axhline(
            0.1 * record.initial_distance, color="tab:red", ls="--",
            label="success threshold",
        )
        ax.legend()
    ax.set_xlabel("step")
    ax.set_ylabel("distance to goal (m)")
    ax.set_title(f"success={record.success}, hits={record.within_count}")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_PNG_METADATA)
    plt.close(fig)


def save_correlation_figure(table: list[dict], path) -> None:
    """Budget-correlation matrix in the style of a rank-correlation grid."""
    budgets = sorted({r["budget_low"] for r in table} | {r["budget_high"] for r in table})
    n = len(budgets)
    grid = np.full((n, n), np.nan)
    for row in table:
        i = budgets.index(row["budget_low"])
        j = budgets.index(row["budget_high"])
        grid[i, j] = row["r"]
    fig, ax = plt.subplots(figsize=(5.5, 4.5))
    im = ax.imshow(grid, vmin=-1, vmax=1, cmap="RdYlGn")
    for row in table:
        i = budgets.index(row["budget_low"])
        j = budgets.index(row["budget_high"])
        ax.text(
            j, i, f"r={row['r']:.3f}\np={row['p']:.3f}\nn={row['n']}",
            ha="center", va="center", fontsize=8,
        )
    ax.set_xticks(range(n), [str(b) for b in budgets])
    ax.set_yticks(range(n), [str(b) for b in budgets])
    ax.set_xlabel("budget (fit iterations)")
    ax.set_ylabel("budget (fit iterations)")
    fig.colorbar(im, ax=ax, label="Spearman r")
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_PNG_METADATA)
    plt.close(fig)
