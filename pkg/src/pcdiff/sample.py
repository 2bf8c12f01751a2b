"""Reverse-diffusion generation and reconstruction.

Two reverse-step variants:
  - "paper-direct": x_{t-1} = x_t - e_theta, a literal subtraction of
    the predicted noise with no coefficients and no added noise. It can
    diverge for schedules whose late steps carry little noise; it is
    kept as the default for fidelity to the training formulation.
  - "ancestral": the standard posterior-mean step with variance beta_t,
    x_{t-1} = (x_t - beta_t / sqrt(1 - alpha_bar_t) * e_theta) / sqrt(alpha_t)
    plus sqrt(beta_t) * z for t > 1.

Guided trajectories never touch the label channel; unguided ones decode
labels from the final state by inverting the label encoding, rounding,
and clamping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .data import LabeledPointCloud, apportion
from .networks import Checkpoint, NetConfig, decoder_forward, encode, time_embedding
from .noising import (
    GUIDED,
    UNGUIDED,
    DiffusedCloud,
    cloud_state,
    decode_labels,
    encode_labels,
)
from .rng import DOMAIN_LABELS, DOMAIN_SAMPLE_START, DOMAIN_SAMPLE_STEP, stream
from .schedule import VarianceSchedule

VARIANTS = ("paper-direct", "ancestral")


@dataclass(frozen=True)
class SamplerConfig:
    variant: str = "paper-direct"
    seed: int = 0
    trace: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")


@dataclass(frozen=True)
class LabelSpec:
    """Either explicit per-point labels or K ratios summing to 1."""

    labels: np.ndarray | None = None
    ratios: np.ndarray | None = None

    def __post_init__(self):
        if (self.labels is None) == (self.ratios is None):
            raise ValueError("give exactly one of labels or ratios")


def realize_labels(spec: LabelSpec, n: int, num_classes: int, seed: int, lane: int = 0) -> np.ndarray:
    """Materialize a label array of length n from a LabelSpec.

    Ratios use largest-remainder apportionment (exact counts) followed
    by a seeded shuffle; explicit labels are validated and passed
    through.
    """
    if spec.labels is not None:
        labels = np.asarray(spec.labels, dtype=np.int64)
        if labels.shape != (n,):
            raise ValueError(f"explicit labels have length {labels.shape}, need {n}")
        if labels.min() < 0 or labels.max() >= num_classes:
            raise ValueError(f"explicit labels must lie in [0, {num_classes - 1}]")
        return labels.copy()
    ratios = np.asarray(spec.ratios, dtype=np.float64)
    if ratios.shape != (num_classes,):
        raise ValueError(f"need {num_classes} ratios, got {ratios.shape}")
    if ratios.min() < 0 or abs(ratios.sum() - 1.0) > 1e-9:
        raise ValueError("ratios must be non-negative and sum to 1 (within 1e-9)")
    counts = apportion(ratios, n, ensure_nonzero=False)
    labels = np.repeat(np.arange(num_classes), counts)
    perm = stream(seed, DOMAIN_LABELS, lane).permutation(n)
    return labels[perm]


def _reverse_step(
    x: np.ndarray,
    eps_hat: np.ndarray,
    t: int,
    sched: VarianceSchedule,
    variant: str,
    rng: np.random.Generator,
) -> np.ndarray:
    if variant == "paper-direct":
        return x - eps_hat
    _, c1, beta = sched.coefficients(t)
    mean = (x - (beta / c1) * eps_hat) / np.sqrt(sched.alphas[t])
    if t > 1:
        mean = mean + np.sqrt(beta) * rng.standard_normal(x.shape)
    return mean


def sample_guided(
    ckpt: Checkpoint,
    sched: VarianceSchedule,
    z: np.ndarray,
    labels: np.ndarray,
    cfg: SamplerConfig,
    lane: int = 0,
) -> tuple[LabeledPointCloud, list[DiffusedCloud]]:
    """Reverse trajectory with the label channel held bit-constant."""
    net = ckpt.net
    n = len(labels)
    enc = encode_labels(labels, ckpt.num_classes, ckpt.label_encoding)
    x = stream(cfg.seed, DOMAIN_SAMPLE_START, lane).standard_normal((n, 3))
    z_t = Tensor(np.asarray(z, dtype=np.float64))
    trace: list[DiffusedCloud] = []
    state = np.column_stack([x, enc])
    if cfg.trace:
        trace.append(DiffusedCloud(state.copy(), sched.num_steps, GUIDED))
    for t in range(sched.num_steps, 0, -1):
        e = decoder_forward(ckpt.params, net, Tensor(state), time_embedding(t, sched, net), z_t).data
        x = _reverse_step(x, e[:, :3], t, sched, cfg.variant, stream(cfg.seed, DOMAIN_SAMPLE_STEP, lane, t))
        state = np.column_stack([x, enc])
        assert np.array_equal(state[:, 3], enc)  # guided labels are immutable
        if cfg.trace:
            trace.append(DiffusedCloud(state.copy(), t - 1, GUIDED))
    cloud = LabeledPointCloud(points=x, labels=labels.copy(), num_classes=ckpt.num_classes)
    return cloud, trace


def sample_unguided(
    ckpt: Checkpoint,
    sched: VarianceSchedule,
    z: np.ndarray,
    n: int,
    cfg: SamplerConfig,
    lane: int = 0,
) -> tuple[LabeledPointCloud, list[DiffusedCloud]]:
    """Reverse trajectory over all four channels; labels decoded at the end."""
    net = ckpt.net
    x = stream(cfg.seed, DOMAIN_SAMPLE_START, lane).standard_normal((n, 4))
    z_t = Tensor(np.asarray(z, dtype=np.float64))
    trace: list[DiffusedCloud] = []
    if cfg.trace:
        trace.append(DiffusedCloud(x.copy(), sched.num_steps, UNGUIDED))
    for t in range(sched.num_steps, 0, -1):
        e = decoder_forward(ckpt.params, net, Tensor(x), time_embedding(t, sched, net), z_t).data
        x = _reverse_step(x, e, t, sched, cfg.variant, stream(cfg.seed, DOMAIN_SAMPLE_STEP, lane, t))
        if cfg.trace:
            trace.append(DiffusedCloud(x.copy(), t - 1, UNGUIDED))
    labels = decode_labels(x[:, 3], ckpt.num_classes, ckpt.label_encoding)
    cloud = LabeledPointCloud(points=x[:, :3], labels=labels, num_classes=ckpt.num_classes)
    return cloud, trace


def sample_prior_z(ckpt: Checkpoint, seed: int, lane: int = 0) -> np.ndarray:
    """Latent draw from the standard-normal prior (consistent with the KL term)."""
    return stream(seed, DOMAIN_SAMPLE_START, lane, 0xD0).standard_normal(ckpt.net.latent_dim)


def encode_latent(ckpt: Checkpoint, cloud: LabeledPointCloud) -> np.ndarray:
    """Deterministic latent (the posterior mean) for a normalized cloud."""
    state = cloud_state(cloud, ckpt.label_encoding)
    return encode(ckpt.params, ckpt.net, Tensor(state), eps=None).mu.data.copy()


def reconstruct(
    ckpt: Checkpoint,
    sched: VarianceSchedule,
    cloud: LabeledPointCloud,
    cfg: SamplerConfig,
    lane: int = 0,
) -> tuple[LabeledPointCloud, list[DiffusedCloud]]:
    """Encode (posterior mean, no sampling noise) then run the reverse chain.

    Guided mode reuses the cloud's labels; unguided mode decodes them.
    The input is expected to be normalized.
    """
    z = encode_latent(ckpt, cloud)
    if ckpt.mode == GUIDED:
        return sample_guided(ckpt, sched, z, cloud.labels, cfg, lane)
    return sample_unguided(ckpt, sched, z, len(cloud), cfg, lane)


def trace_cloud(dc: DiffusedCloud, num_classes: int, encoding: str = "centered") -> LabeledPointCloud:
    """View a trace state as a labeled cloud (labels decoded from channel 4)."""
    return LabeledPointCloud(
        points=dc.state[:, :3].copy(),
        labels=decode_labels(dc.state[:, 3], num_classes, encoding),
        num_classes=num_classes,
    )
