"""DDPM forward process: linear beta schedule and the closed-form q(z_t | z_0)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .config import ConfigurationError
from .errors import ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    """Beta/alpha-bar tables indexed by timestep; float64 throughout."""

    T: int
    betas: np.ndarray        # (T,), each in (0, 1)
    alpha_bars: np.ndarray   # (T,), strictly decreasing, in (0, 1]

    def sigma(self, t) -> np.ndarray:
        """sqrt(1 - alpha_bar_t), the noise scale of q(z_t | z_0)."""
        return np.sqrt(1.0 - self.alpha_bars[t])


def make_noise_schedule(T: int, beta_start: float = 1e-4,
                        beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ConfigurationError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigurationError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bars = np.cumprod(1.0 - betas)
    return NoiseSchedule(T=T, betas=betas, alpha_bars=alpha_bars)


def forward_diffuse(z0: torch.Tensor, t, eps: torch.Tensor,
                    sched: NoiseSchedule) -> torch.Tensor:
    """z_t = sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps.

    ``t`` is an int or a 1-D tensor of per-sample indices (then z0 is batched
    with the batch on dim 0).
    """
    if eps.shape != z0.shape:
        raise ShapeError(f"eps shape {tuple(eps.shape)} != z0 shape {tuple(z0.shape)}")
    t_idx = np.asarray(t.cpu() if isinstance(t, torch.Tensor) else t)
    if np.any(t_idx < 0) or np.any(t_idx >= sched.T):
        raise ShapeError(f"t out of range [0, {sched.T})")
    abar = sched.alpha_bars[t_idx]
    a = torch.as_tensor(np.sqrt(abar), dtype=z0.dtype, device=z0.device)
    b = torch.as_tensor(np.sqrt(1.0 - abar), dtype=z0.dtype, device=z0.device)
    if a.ndim > 0:  # per-sample t: broadcast over trailing dims
        shape = (-1,) + (1,) * (z0.ndim - 1)
        a, b = a.reshape(shape), b.reshape(shape)
    return a * z0 + b * eps
