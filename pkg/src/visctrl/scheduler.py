"""Noise schedule and deterministic DDIM stepping.

All step functions share one closed form::

    z0_hat = (z_t - sqrt(1 - abar_t) * eps) / sqrt(abar_t)
    z_s    = sqrt(abar_s) * z0_hat + sqrt(1 - abar_s) * eps

with ``s`` the next (noisier) grid point for inversion and the previous one
for denoising.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, ShapeError

DEFAULT_T_TRAIN = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    t_train: int
    alpha_bar: np.ndarray  # length t_train + 1, alpha_bar[0] == 1

    def __post_init__(self):
        ab = self.alpha_bar
        if ab.shape != (self.t_train + 1,):
            raise ConfigError(f"alpha_bar must have {self.t_train + 1} entries")
        if ab[0] != 1.0 or not (ab > 0).all() or not (np.diff(ab) < 0).all():
            raise ConfigError("alpha_bar must start at 1 and decrease strictly inside (0, 1]")
        ab.setflags(write=False)

    def __getitem__(self, t: int) -> float:
        return float(self.alpha_bar[t])


@dataclass(frozen=True)
class StepGrid:
    t_infer: int
    indices: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.indices)


def make_schedule(
    t_train: int = DEFAULT_T_TRAIN,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    if t_train < 1:
        raise ConfigError(f"t_train must be >= 1, got {t_train}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, t_train, dtype=np.float64)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(t_train, alpha_bar)


def make_grid(t_infer: int, t_train: int = DEFAULT_T_TRAIN) -> StepGrid:
    """Evenly spaced grid ``floor(i * t_train / T)`` for ``i = 0..T``."""
    if t_infer < 1 or t_infer > t_train:
        raise ConfigError(f"inference steps must lie in [1, {t_train}], got {t_infer}")
    return StepGrid(t_infer, tuple(i * t_train // t_infer for i in range(t_infer + 1)))


def _check_abar(*values: float) -> None:
    for a in values:
        if not (0.0 < a <= 1.0):
            raise DomainError(f"alpha_bar must lie in (0, 1], got {a}")


def _check_same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")


def predict_z0(z_t: np.ndarray, eps: np.ndarray, abar_t: float) -> np.ndarray:
    _check_abar(abar_t)
    _check_same(z_t, eps)
    return (z_t - math.sqrt(1.0 - abar_t) * eps) / math.sqrt(abar_t)


def _ddim_move(z_t, eps, abar_t, abar_to):
    _check_abar(abar_t, abar_to)
    z0 = predict_z0(z_t, eps, abar_t)
    return math.sqrt(abar_to) * z0 + math.sqrt(1.0 - abar_to) * eps


def ddim_invert_step(z_t: np.ndarray, eps: np.ndarray, abar_t: float, abar_next: float) -> np.ndarray:
    """One inversion step toward higher noise, ``z_t -> z_{t+1}``."""
    return _ddim_move(z_t, eps, abar_t, abar_next)


def ddim_denoise_step(z_t: np.ndarray, eps: np.ndarray, abar_t: float, abar_prev: float) -> np.ndarray:
    return _ddim_move(z_t, eps, abar_t, abar_prev)


def cfg_combine(eps_cond: np.ndarray, eps_uncond: np.ndarray, omega: float) -> np.ndarray:
    _check_same(eps_cond, eps_uncond)
    # endpoints returned as-is so omega=0/1 are exact collapses
    if omega == 1.0:
        return eps_cond
    if omega == 0.0:
        return eps_uncond
    return eps_uncond + omega * (eps_cond - eps_uncond)
