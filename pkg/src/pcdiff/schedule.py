"""Variance schedule for the forward/reverse diffusion chains.

Tables are 1-indexed by timestep t = 1..T; index 0 holds the t=0
convention (beta 0, cumulative signal 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class VarianceSchedule:
    """Per-step noise levels and their cumulative products.

    betas[t] in (0, 1) for t >= 1; alphas = 1 - betas;
    alpha_bars[t] = prod_{s<=t} alphas[s], strictly decreasing.
    """

    betas: np.ndarray
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)

    @property
    def num_steps(self) -> int:
        return len(self.betas) - 1

    def coefficients(self, t: int) -> tuple[float, float, float]:
        """(c0, c1, beta_t) with c0 = sqrt(alpha_bar_t), c1 = sqrt(1 - alpha_bar_t)."""
        self._check_t(t)
        ab = self.alpha_bars[t]
        return float(np.sqrt(ab)), float(np.sqrt(1.0 - ab)), float(self.betas[t])

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.num_steps:
            raise ValueError(f"timestep {t} out of range [1, {self.num_steps}]")


def linear_schedule(beta_start: float, beta_end: float, num_steps: int) -> VarianceSchedule:
    """Linearly interpolated betas over t = 1..num_steps, endpoints included."""
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if num_steps < 1:
        raise ValueError(f"num_steps must be >= 1, got {num_steps}")
    if num_steps == 1:
        betas = np.array([0.0, beta_start])
    else:
        betas = np.concatenate([[0.0], np.linspace(beta_start, beta_end, num_steps)])
    alphas = 1.0 - betas
    # sequential cumprod keeps the recursion alpha_bars[t] =
    # alpha_bars[t-1] * (1 - betas[t]) exact in float64
    alpha_bars = np.cumprod(alphas)
    return VarianceSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)
