"""Forward diffusion kernels over (n, 4) point states.

State layout: columns 0..2 are spatial coordinates, column 3 is the
float-encoded part label. Guided mode noises only the spatial columns
and keeps the label column bit-identical; unguided mode noises all
four.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LabeledPointCloud
from .schedule import VarianceSchedule

GUIDED = "guided"
UNGUIDED = "unguided"
MODES = (GUIDED, UNGUIDED)


@dataclass
class DiffusedCloud:
    """An (n, 4) diffusion state at timestep t."""

    state: np.ndarray
    t: int
    mode: str


def encode_labels(labels, num_classes: int, encoding: str = "centered") -> np.ndarray:
    """Map integer labels to the float channel the diffusion acts on.

    "centered" places labels evenly in [-1, 1] so the channel's scale
    matches unit-variance noise; "raw" keeps the plain integer value
    (ablation knob).
    """
    labels = np.asarray(labels, dtype=np.float64)
    if encoding == "raw":
        return labels.copy()
    if encoding != "centered":
        raise ValueError(f"unknown label encoding {encoding!r}")
    half = (num_classes - 1) / 2.0
    return (labels - half) * (2.0 / max(num_classes - 1, 1))


def decode_labels(channel, num_classes: int, encoding: str = "centered") -> np.ndarray:
    """Invert encode_labels, round to nearest integer, clamp to [0, K-1]."""
    channel = np.asarray(channel, dtype=np.float64)
    if encoding == "raw":
        raw = channel
    else:
        raw = channel * (max(num_classes - 1, 1) / 2.0) + (num_classes - 1) / 2.0
    return np.clip(np.rint(raw), 0, num_classes - 1).astype(np.int64)


def cloud_state(cloud: LabeledPointCloud, encoding: str = "centered") -> np.ndarray:
    """(n, 4) state: coordinates plus the encoded label channel."""
    return np.column_stack(
        [cloud.points, encode_labels(cloud.labels, cloud.num_classes, encoding)]
    )


def sample_noise_field(rng: np.random.Generator, n: int, mode: str) -> np.ndarray:
    """(n, 4) standard-normal noise; the label column is zero in guided mode."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    noise = rng.standard_normal((n, 4))
    if mode == GUIDED:
        noise[:, 3] = 0.0
    return noise


def noise_guided(state: np.ndarray, sched: VarianceSchedule, t: int, noise: np.ndarray) -> np.ndarray:
    """Noise the spatial columns toward N(0, I); label column untouched.

    spatial_t = sqrt(alpha_bar_t) * spatial_0 + sqrt(1 - alpha_bar_t) * noise
    """
    state = np.asarray(state, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    _check_state(state, noise)
    if np.any(noise[:, 3] != 0.0):
        raise ValueError("guided noising requires a zero label-noise column")
    c0, c1, _ = sched.coefficients(t)
    out = np.empty_like(state)
    out[:, :3] = c0 * state[:, :3] + c1 * noise[:, :3]
    out[:, 3] = state[:, 3]
    return out


def noise_unguided(state: np.ndarray, sched: VarianceSchedule, t: int, noise: np.ndarray) -> np.ndarray:
    """Noise all four columns toward N(0, I)."""
    state = np.asarray(state, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    _check_state(state, noise)
    c0, c1, _ = sched.coefficients(t)
    return c0 * state + c1 * noise


def noise_single_step(state: np.ndarray, sched: VarianceSchedule, t: int, noise: np.ndarray) -> np.ndarray:
    """One forward Markov step: sqrt(1 - beta_t) * x_{t-1} + sqrt(beta_t) * eps.

    Composing this for t = 1..t* reproduces the closed-form marginal
    of noise_unguided at t*.
    """
    state = np.asarray(state, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    beta = sched.betas[t]
    sched._check_t(t)
    return np.sqrt(1.0 - beta) * state + np.sqrt(beta) * noise


def _check_state(state: np.ndarray, noise: np.ndarray) -> None:
    if state.ndim != 2 or state.shape[1] != 4:
        raise ValueError(f"state must be (n, 4), got {state.shape}")
    if noise.shape != state.shape:
        raise ValueError(f"noise shape {noise.shape} != state shape {state.shape}")
