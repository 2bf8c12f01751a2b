"""Latent shape encoder and conditional noise-prediction decoder.

The encoder is a per-point MLP followed by a max-pool over points (so
it is exactly permutation invariant) with two linear heads for the
latent mean and log-variance. The decoder is a per-point MLP on
concat(point state, time embedding, latent), predicting an (n, 4)
noise field; permuting input points permutes output rows identically.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import DOMAIN_INIT, stream
from .schedule import VarianceSchedule

EPS_CLIP = 6.0  # reparameterization noise is truncated at +/- 6 sigma

CHECKPOINT_MAGIC = b"PCDK"
CHECKPOINT_VERSION = 1
_MODE_CODES = {"guided": 0, "unguided": 1}
_MODE_NAMES = {v: k for k, v in _MODE_CODES.items()}
_TIME_CODES = {"full": 0, "beta-only": 1}
_TIME_NAMES = {v: k for k, v in _TIME_CODES.items()}
_ENC_CODES = {"centered": 0, "raw": 1}
_ENC_NAMES = {v: k for k, v in _ENC_CODES.items()}


@dataclass(frozen=True)
class NetConfig:
    latent_dim: int = 128
    time_dim: int = 32
    encoder_widths: tuple[int, ...] = (128, 256, 512)
    decoder_widths: tuple[int, ...] = (256, 256, 128)
    time_features: str = "full"  # "beta-only" conditions on beta_t alone

    def __post_init__(self):
        if self.time_dim < 4 or self.time_dim % 2:
            raise ValueError(f"time_dim must be even and >= 4, got {self.time_dim}")
        if self.time_features not in _TIME_CODES:
            raise ValueError(f"time_features must be one of {tuple(_TIME_CODES)}")


@dataclass
class LatentCode:
    mu: Tensor
    logvar: Tensor
    z: Tensor


def param_names(cfg: NetConfig) -> list[str]:
    """Canonical parameter order; checkpoints rely on it."""
    names = []
    for i in range(len(cfg.encoder_widths)):
        names += [f"enc{i}_w", f"enc{i}_b"]
    names += ["mu_w", "mu_b", "lv_w", "lv_b"]
    for i in range(len(cfg.decoder_widths) + 1):
        names += [f"dec{i}_w", f"dec{i}_b"]
    return names


def init_params(cfg: NetConfig, seed: int) -> dict[str, Tensor]:
    rng = stream(seed, DOMAIN_INIT)
    params: dict[str, Tensor] = {}

    def linear(name, fan_in, fan_out, gain=1.0):
        w = rng.standard_normal((fan_in, fan_out)) * gain * np.sqrt(2.0 / fan_in)
        params[f"{name}_w"] = Tensor(w, requires_grad=True)
        params[f"{name}_b"] = Tensor(np.zeros(fan_out), requires_grad=True)

    widths = (4,) + cfg.encoder_widths
    for i in range(len(cfg.encoder_widths)):
        linear(f"enc{i}", widths[i], widths[i + 1])
    # small heads keep the latent near the prior at init
    linear("mu", cfg.encoder_widths[-1], cfg.latent_dim, gain=0.01)
    linear("lv", cfg.encoder_widths[-1], cfg.latent_dim, gain=0.01)
    d_in = 4 + cfg.time_dim + cfg.latent_dim
    widths = (d_in,) + cfg.decoder_widths + (4,)
    for i in range(len(cfg.decoder_widths) + 1):
        linear(f"dec{i}", widths[i], widths[i + 1])
    return params


def encoder_forward(params, cfg: NetConfig, state: Tensor) -> tuple[Tensor, Tensor]:
    """(mu, logvar) from an (n, 4) state; exactly permutation invariant."""
    h = state
    for i in range(len(cfg.encoder_widths)):
        h = ad.leaky_relu(ad.add(ad.matmul(h, params[f"enc{i}_w"]), params[f"enc{i}_b"]))
    feat = ad.max_reduce(h)  # (width,)
    mu = ad.add(ad.matmul(feat, params["mu_w"]), params["mu_b"])
    logvar = ad.add(ad.matmul(feat, params["lv_w"]), params["lv_b"])
    return mu, logvar


def encode(params, cfg: NetConfig, state: Tensor, eps: np.ndarray | None = None) -> LatentCode:
    """Encode a state to a LatentCode; eps=None uses mu (evaluation mode).

    eps is the reparameterization draw, expected pre-clipped to
    [-EPS_CLIP, EPS_CLIP].
    """
    mu, logvar = encoder_forward(params, cfg, state)
    if eps is None:
        z = mu
    else:
        std = ad.exp(ad.mul(logvar, 0.5))
        z = ad.add(mu, ad.mul(std, Tensor(eps)))
    return LatentCode(mu=mu, logvar=logvar, z=z)


def draw_latent_eps(rng: np.random.Generator, cfg: NetConfig) -> np.ndarray:
    return np.clip(rng.standard_normal(cfg.latent_dim), -EPS_CLIP, EPS_CLIP)


def decoder_forward(params, cfg: NetConfig, state: Tensor, temb: np.ndarray, z: Tensor) -> Tensor:
    """(n, 4) predicted noise from state, time embedding, and latent."""
    n = state.shape[0]
    trows = Tensor(np.tile(np.asarray(temb, dtype=np.float64), (n, 1)))
    zrows = ad.add(Tensor(np.zeros((n, cfg.latent_dim))), z)  # broadcast over points
    h = ad.concat([state, trows, zrows])
    depth = len(cfg.decoder_widths)
    for i in range(depth):
        h = ad.leaky_relu(ad.add(ad.matmul(h, params[f"dec{i}_w"]), params[f"dec{i}_b"]))
    return ad.add(ad.matmul(h, params[f"dec{depth}_w"]), params[f"dec{depth}_b"])


def kl_to_prior(latent: LatentCode) -> Tensor:
    """KL(N(mu, diag exp(logvar)) || N(0, I)) = 0.5 sum(exp(lv) + mu^2 - 1 - lv)."""
    d = latent.mu.data.size
    s = ad.add(
        ad.add(ad.total(ad.exp(latent.logvar)), ad.total(ad.square(latent.mu))),
        ad.mul(ad.total(latent.logvar), -1.0),
    )
    return ad.mul(ad.add(s, -float(d)), 0.5)


def time_embedding(t: int, sched: VarianceSchedule, cfg: NetConfig) -> np.ndarray:
    """Conditioning vector for timestep t.

    Layout: [beta_t, t/T, sin/cos of 2 pi 2^j t/T for j = 0..d_t/2 - 2].
    The t/T coordinate makes the embedding injective over t = 1..T;
    "beta-only" zeroes everything past beta_t.
    """
    sched._check_t(t)
    beta = sched.betas[t]
    out = np.zeros(cfg.time_dim)
    out[0] = beta
    if cfg.time_features == "beta-only":
        return out
    frac = t / sched.num_steps
    out[1] = frac
    n_freq = cfg.time_dim // 2 - 1
    freqs = 2.0 ** np.arange(n_freq)
    angles = 2.0 * np.pi * freqs * frac
    out[2 : 2 + n_freq] = np.sin(angles)
    out[2 + n_freq :] = np.cos(angles)
    return out


@dataclass
class Checkpoint:
    mode: str
    net: NetConfig
    beta_start: float
    beta_end: float
    num_steps: int
    num_classes: int
    params: dict[str, Tensor] = field(repr=False)
    label_encoding: str = "centered"


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Versioned binary: magic, version, mode, config echo, parameter tensors."""
    cfg = ckpt.net
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<B", _MODE_CODES[ckpt.mode]))
        f.write(
            struct.pack(
                "<IIBB",
                cfg.latent_dim,
                cfg.time_dim,
                _TIME_CODES[cfg.time_features],
                _ENC_CODES[ckpt.label_encoding],
            )
        )
        f.write(struct.pack("<I", len(cfg.encoder_widths)))
        f.write(struct.pack(f"<{len(cfg.encoder_widths)}I", *cfg.encoder_widths))
        f.write(struct.pack("<I", len(cfg.decoder_widths)))
        f.write(struct.pack(f"<{len(cfg.decoder_widths)}I", *cfg.decoder_widths))
        f.write(struct.pack("<ddII", ckpt.beta_start, ckpt.beta_end, ckpt.num_steps, ckpt.num_classes))
        names = param_names(cfg)
        f.write(struct.pack("<I", len(names)))
        for name in names:
            data = ckpt.params[name].data
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.astype("<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (mode_code,) = struct.unpack("<B", f.read(1))
        latent_dim, time_dim, time_code, enc_code = struct.unpack("<IIBB", f.read(10))
        (n_enc,) = struct.unpack("<I", f.read(4))
        enc = struct.unpack(f"<{n_enc}I", f.read(4 * n_enc))
        (n_dec,) = struct.unpack("<I", f.read(4))
        dec = struct.unpack(f"<{n_dec}I", f.read(4 * n_dec))
        beta_start, beta_end, num_steps, num_classes = struct.unpack("<ddII", f.read(24))
        cfg = NetConfig(
            latent_dim=latent_dim,
            time_dim=time_dim,
            encoder_widths=enc,
            decoder_widths=dec,
            time_features=_TIME_NAMES[time_code],
        )
        (count,) = struct.unpack("<I", f.read(4))
        names = param_names(cfg)
        if count != len(names):
            raise ValueError(f"{path}: expected {len(names)} parameters, found {count}")
        params = {}
        for name in names:
            (rank,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
            n_items = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(f.read(8 * n_items), dtype="<f8").reshape(shape)
            params[name] = Tensor(data.copy(), requires_grad=True)
        return Checkpoint(
            mode=_MODE_NAMES[mode_code],
            net=cfg,
            beta_start=beta_start,
            beta_end=beta_end,
            num_steps=num_steps,
            num_classes=num_classes,
            params=params,
            label_encoding=_ENC_NAMES[enc_code],
        )
