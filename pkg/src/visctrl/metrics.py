"""Desk-scale quality metrics: SSIM, background MAD and latent MSE."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InputError, ShapeError

LUMA = (0.299, 0.587, 0.114)
SSIM_WINDOW = 8
SSIM_C1 = (0.01 * 255) ** 2
SSIM_C2 = (0.03 * 255) ** 2


def to_gray255(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img * 255.0
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected (h, w, 3) or (h, w) image, got {img.shape}")
    return (LUMA[0] * img[..., 0] + LUMA[1] * img[..., 1] + LUMA[2] * img[..., 2]) * 255.0


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over all 8x8 windows (stride 1) of the 8-bit luma planes.

    Window statistics are unweighted; variances and covariance use the
    population (1/N) normalisation.
    """
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"ssim: {np.shape(a)} vs {np.shape(b)}")
    x, y = to_gray255(a), to_gray255(b)
    if x.shape[0] < SSIM_WINDOW or x.shape[1] < SSIM_WINDOW:
        raise InputError(f"ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {x.shape}")
    wx = sliding_window_view(x, (SSIM_WINDOW, SSIM_WINDOW))
    wy = sliding_window_view(y, (SSIM_WINDOW, SSIM_WINDOW))
    mx = wx.mean(axis=(-2, -1))
    my = wy.mean(axis=(-2, -1))
    dx = wx - mx[..., None, None]
    dy = wy - my[..., None, None]
    vx = (dx * dx).mean(axis=(-2, -1))
    vy = (dy * dy).mean(axis=(-2, -1))
    cxy = (dx * dy).mean(axis=(-2, -1))
    num = (2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)
    return float((num / den).mean())


def bg_error(a: np.ndarray, b: np.ndarray, mask) -> float:
    """Mean absolute difference over background (mask == 0) pixels.

    A pixel's difference is the mean over its channels.  Defined as 0 when
    the mask covers the whole image.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    pixel_mask = getattr(mask, "pixel", mask)
    if a.shape != b.shape or a.shape[:2] != np.shape(pixel_mask):
        raise ShapeError(f"bg_error: {a.shape}, {b.shape}, mask {np.shape(pixel_mask)}")
    bg = ~np.asarray(pixel_mask, dtype=bool)
    if not bg.any():
        return 0.0
    diff = np.abs(a - b)
    if diff.ndim == 3:
        diff = diff.mean(axis=2)
    return float(diff[bg].mean())


def bg_max_error(a: np.ndarray, b: np.ndarray, mask) -> float:
    pixel_mask = getattr(mask, "pixel", mask)
    bg = ~np.asarray(pixel_mask, dtype=bool)
    if not bg.any():
        return 0.0
    return float(np.abs(np.asarray(a, dtype=np.float64) - b)[bg].max())


def latent_mse(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"latent_mse: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def masked_latent_mse(a: np.ndarray, b: np.ndarray, latent_mask: np.ndarray) -> float:
    """MSE restricted to latent cells inside the mask (0 for an empty mask)."""
    if a.shape != b.shape or a.shape[:2] != latent_mask.shape:
        raise ShapeError("masked_latent_mse: shape mismatch")
    if not latent_mask.any():
        return 0.0
    return float(np.mean((np.asarray(a) - b)[latent_mask] ** 2))


@dataclass
class MetricReport:
    ssim: float
    bg_error: float
    latent_mse: float
    ssim_series: list[float] = field(default_factory=list)
    bg_series: list[float] = field(default_factory=list)
    latent_mse_series: list[float] = field(default_factory=list)
    subject_latent_distance: float | None = None

    def lines(self) -> list[str]:
        out = [
            f"ssim={self.ssim:.10g}",
            f"bg_mad={self.bg_error:.10g}",
            f"latent_mse={self.latent_mse:.10g}",
        ]
        if self.subject_latent_distance is not None:
            out.append(f"subject_latent_distance={self.subject_latent_distance:.10g}")
        for i, (s, bg, m) in enumerate(zip(self.ssim_series, self.bg_series, self.latent_mse_series), 1):
            out.append(f"iter{i}.ssim={s:.10g}")
            out.append(f"iter{i}.bg_mad={bg:.10g}")
            out.append(f"iter{i}.latent_mse={m:.10g}")
        return out

    def csv(self) -> str:
        rows = ["iteration,ssim,bg_mad,latent_mse"]
        for i, (s, bg, m) in enumerate(zip(self.ssim_series, self.bg_series, self.latent_mse_series), 1):
            rows.append(f"{i},{s:.10g},{bg:.10g},{m:.10g}")
        return "\n".join(rows) + "\n"
