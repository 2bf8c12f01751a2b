"""Training loops for the guided and unguided diffusion objectives.

One step: per batch item, encode the clean state, draw a uniform
timestep and a forward-noise field, noise the state, predict the noise,
assemble the mode's objective; average the per-item totals in batch
order, backpropagate once, and apply an adaptive-moment update.

Every random draw comes from a counter-based stream addressed by
(seed, domain, step, item), so a (seed, config, dataset) triple fully
determines the loss trace and the final parameters.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import Dataset, LabeledPointCloud, normalize
from .losses import LossBreakdown, guided_total_graph, unguided_total_graph
from .networks import (
    Checkpoint,
    NetConfig,
    decoder_forward,
    draw_latent_eps,
    encode,
    init_params,
    kl_to_prior,
    load_checkpoint,
    param_names,
    save_checkpoint,
    time_embedding,
)
from .noising import (
    GUIDED,
    MODES,
    cloud_state,
    noise_guided,
    noise_unguided,
    sample_noise_field,
)
from .rng import (
    DOMAIN_BATCH,
    DOMAIN_FORWARD_NOISE,
    DOMAIN_LATENT_EPS,
    DOMAIN_TIMESTEP,
    stream,
)
from .schedule import VarianceSchedule, linear_schedule

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
EMA_WINDOW = 100

OPT_MAGIC = b"PCOP"
OPT_VERSION = 1


class NumericalAbort(RuntimeError):
    """Training hit a non-finite loss; carries the step and breakdown."""

    def __init__(self, step: int, breakdown: LossBreakdown):
        super().__init__(
            f"non-finite loss at step {step}: spatial={breakdown.spatial_mse} "
            f"label={breakdown.label_mse} cd={breakdown.per_class_cd} "
            f"kl={breakdown.kl} total={breakdown.total}"
        )
        self.step = step
        self.breakdown = breakdown


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "guided"
    batch_size: int = 16
    max_steps: int = 2000
    learning_rate: float = 1e-3
    lambda_kl: float = 1e-3
    beta_start: float = 1e-4
    beta_end: float = 0.02
    num_steps: int = 200
    seed: int = 0
    checkpoint_every: int = 500
    latent_dim: int = 128
    time_dim: int = 32
    encoder_widths: tuple[int, ...] = (128, 256, 512)
    decoder_widths: tuple[int, ...] = (256, 256, 128)
    time_features: str = "full"
    label_encoding: str = "centered"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")

    def net_config(self) -> NetConfig:
        return NetConfig(
            latent_dim=self.latent_dim,
            time_dim=self.time_dim,
            encoder_widths=tuple(self.encoder_widths),
            decoder_widths=tuple(self.decoder_widths),
            time_features=self.time_features,
        )

    def schedule(self) -> VarianceSchedule:
        return linear_schedule(self.beta_start, self.beta_end, self.num_steps)


_TUPLE_FIELDS = {"encoder_widths", "decoder_widths"}


def config_from_mapping(mapping: dict[str, str], base: TrainConfig | None = None) -> TrainConfig:
    """Build a TrainConfig from string key=value pairs; unknown keys rejected."""
    base = base or TrainConfig()
    known = {f.name: f for f in fields(TrainConfig)}
    updates = {}
    for key, raw in mapping.items():
        if key not in known:
            raise KeyError(f"unknown config key {key!r}")
        if key in _TUPLE_FIELDS:
            updates[key] = tuple(int(x) for x in raw.split(","))
        elif known[key].type in ("int", int):
            updates[key] = int(raw)
        elif known[key].type in ("float", float):
            updates[key] = float(raw)
        else:
            updates[key] = raw
    return replace(base, **updates)


def config_to_text(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(TrainConfig):
        value = getattr(cfg, f.name)
        if f.name in _TUPLE_FIELDS:
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


@dataclass
class AdamMoments:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def like(cls, params: dict[str, Tensor]) -> "AdamMoments":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adam_update(params: dict[str, Tensor], moments: AdamMoments, lr: float) -> None:
    """One bias-corrected adaptive-moment update from the tensors' grads."""
    moments.t += 1
    bc1 = 1.0 - ADAM_BETA1**moments.t
    bc2 = 1.0 - ADAM_BETA2**moments.t
    for name, p in params.items():
        g = p.grad
        m = moments.m[name]
        v = moments.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


@dataclass
class TrainState:
    config: TrainConfig
    num_classes: int
    params: dict[str, Tensor] = field(repr=False)
    moments: AdamMoments = field(repr=False)
    step: int = 0
    loss_ema: float = float("nan")

    @property
    def schedule(self) -> VarianceSchedule:
        if not hasattr(self, "_sched"):
            object.__setattr__(self, "_sched", self.config.schedule())
        return self._sched

    @property
    def net(self) -> NetConfig:
        return self.config.net_config()


def init_train_state(cfg: TrainConfig, num_classes: int) -> TrainState:
    params = init_params(cfg.net_config(), cfg.seed)
    return TrainState(
        config=cfg,
        num_classes=num_classes,
        params=params,
        moments=AdamMoments.like(params),
    )


def train_step(state: TrainState, batch: list[LabeledPointCloud]) -> LossBreakdown:
    """One optimizer step over a batch of normalized clouds."""
    cfg = state.config
    net = state.net
    sched = state.schedule
    step = state.step
    guided = cfg.mode == GUIDED

    item_totals = []
    parts = np.zeros(5)  # spatial, label, cd, kl, total
    with Tape() as tape:
        for i, cloud in enumerate(batch):
            x0 = cloud_state(cloud, cfg.label_encoding)
            n = len(cloud)
            t = int(stream(cfg.seed, DOMAIN_TIMESTEP, step, i).integers(1, sched.num_steps + 1))
            eps = draw_latent_eps(stream(cfg.seed, DOMAIN_LATENT_EPS, step, i), net)
            noise = sample_noise_field(stream(cfg.seed, DOMAIN_FORWARD_NOISE, step, i), n, cfg.mode)

            latent = encode(state.params, net, Tensor(x0), eps)
            kl = kl_to_prior(latent)
            temb_args = (sched, net)
            if guided:
                noised = noise_guided(x0, sched, t, noise)
                assert np.array_equal(noised[:, 3], x0[:, 3])  # labels never noised
                e_theta = decoder_forward(
                    state.params, net, Tensor(noised), time_embedding(t, *temb_args), latent.z
                )
                total, bd = guided_total_graph(
                    e_theta, noise[:, :3], noised[:, :3], x0[:, :3],
                    cloud.labels, kl, cfg.lambda_kl,
                )
            else:
                noised = noise_unguided(x0, sched, t, noise)
                e_theta = decoder_forward(
                    state.params, net, Tensor(noised), time_embedding(t, *temb_args), latent.z
                )
                total, bd = unguided_total_graph(e_theta, noise, kl, cfg.lambda_kl)
            item_totals.append(total)
            parts += (bd.spatial_mse, bd.label_mse, bd.per_class_cd, bd.kl, bd.total)

        batch_total = item_totals[0]
        for t_i in item_totals[1:]:
            batch_total = ad.add(batch_total, t_i)  # ordered reduction
        batch_total = ad.mul(batch_total, 1.0 / len(batch))

    parts /= len(batch)
    breakdown = LossBreakdown(*parts)
    if not np.isfinite(breakdown.total):
        raise NumericalAbort(step, breakdown)

    ad.zero_grads(state.params.values())
    tape.backward(batch_total)
    adam_update(state.params, state.moments, cfg.learning_rate)
    state.step += 1
    if np.isnan(state.loss_ema):
        state.loss_ema = breakdown.total
    else:
        state.loss_ema += (breakdown.total - state.loss_ema) / EMA_WINDOW
    return breakdown


def select_batch(cfg: TrainConfig, step: int, dataset_size: int) -> np.ndarray:
    """Deterministic batch indices for a step (without replacement)."""
    if dataset_size <= cfg.batch_size:
        return np.arange(dataset_size)
    rng = stream(cfg.seed, DOMAIN_BATCH, step)
    return rng.permutation(dataset_size)[: cfg.batch_size]


def normalize_dataset(dataset: Dataset) -> list[LabeledPointCloud]:
    return [normalize(cloud)[0] for cloud in dataset.shapes]


def train_model(
    cfg: TrainConfig,
    dataset: Dataset,
    out_dir=None,
    log_lines: list[str] | None = None,
) -> TrainState:
    """Run cfg.max_steps steps; optionally checkpoint and log to out_dir."""
    clouds = normalize_dataset(dataset)
    state = init_train_state(cfg, dataset.num_classes)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    lines = log_lines if log_lines is not None else []
    for _ in range(cfg.max_steps):
        batch = [clouds[i] for i in select_batch(cfg, state.step, len(clouds))]
        breakdown = train_step(state, batch)
        lines.append(breakdown.as_line(state.step - 1))
        if out_dir is not None and cfg.checkpoint_every > 0 and state.step % cfg.checkpoint_every == 0:
            save_train_state(state, out_dir / f"step{state.step}.pcdk")
    if out_dir is not None:
        save_train_state(state, out_dir / "last.pcdk")
        (out_dir / "train_log.txt").write_text("\n".join(lines) + "\n")
    return state


def state_checkpoint(state: TrainState) -> Checkpoint:
    cfg = state.config
    return Checkpoint(
        mode=cfg.mode,
        net=state.net,
        beta_start=cfg.beta_start,
        beta_end=cfg.beta_end,
        num_steps=cfg.num_steps,
        num_classes=state.num_classes,
        params=state.params,
        label_encoding=cfg.label_encoding,
    )


def save_train_state(state: TrainState, path) -> None:
    """Model checkpoint plus a `.opt` sidecar (config, step, moments)."""
    save_checkpoint(path, state_checkpoint(state))
    cfg_text = config_to_text(state.config).encode()
    with open(f"{path}.opt", "wb") as f:
        f.write(OPT_MAGIC)
        f.write(struct.pack("<I", OPT_VERSION))
        f.write(struct.pack("<I", len(cfg_text)))
        f.write(cfg_text)
        f.write(struct.pack("<QQd", state.step, state.moments.t, state.loss_ema))
        f.write(struct.pack("<I", state.num_classes))
        names = param_names(state.net)
        for table in (state.moments.m, state.moments.v):
            for name in names:
                data = table[name]
                f.write(struct.pack("<I", data.ndim))
                f.write(struct.pack(f"<{data.ndim}I", *data.shape))
                f.write(data.astype("<f8").tobytes())


def load_train_state(path) -> TrainState:
    ckpt = load_checkpoint(path)
    with open(f"{path}.opt", "rb") as f:
        if f.read(4) != OPT_MAGIC:
            raise ValueError(f"{path}.opt: not an optimizer sidecar")
        (version,) = struct.unpack("<I", f.read(4))
        if version != OPT_VERSION:
            raise ValueError(f"{path}.opt: unsupported version {version}")
        (cfg_len,) = struct.unpack("<I", f.read(4))
        mapping = {}
        for line in f.read(cfg_len).decode().splitlines():
            key, _, value = line.partition("=")
            mapping[key.strip()] = value.strip()
        cfg = config_from_mapping(mapping)
        step, adam_t, loss_ema = struct.unpack("<QQd", f.read(24))
        (num_classes,) = struct.unpack("<I", f.read(4))
        names = param_names(ckpt.net)
        tables = []
        for _ in range(2):
            table = {}
            for name in names:
                (rank,) = struct.unpack("<I", f.read(4))
                shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
                n_items = int(np.prod(shape)) if rank else 1
                table[name] = np.frombuffer(f.read(8 * n_items), dtype="<f8").reshape(shape).copy()
            tables.append(table)
    state = TrainState(
        config=cfg,
        num_classes=num_classes,
        params=ckpt.params,
        moments=AdamMoments(m=tables[0], v=tables[1], t=adam_t),
        step=step,
        loss_ema=loss_ema,
    )
    return state
