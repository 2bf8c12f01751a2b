"""Command-line orchestration for dataset synthesis, training, sampling,
reconstruction tables, metric reports, and PLY export.

Config files are plain `key = value` lines with `#` comments; unknown
keys are rejected. Every artifact-producing run prints its fully
resolved configuration and writes a manifest (resolved config, seed,
input hashes) whose bytes are identical on replay.

Exit codes: 0 success, 1 usage error, 2 data/format error,
3 numerical abort.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    Dataset,
    LabeledPointCloud,
    LpcdError,
    SHAPE_FAMILIES,
    generate_synthetic,
    load_dataset,
    normalize,
    save_dataset,
    save_ply,
)
from .losses import NoSharedClassError, global_cd, per_class_cd
from .metrics import DEFAULT_GRID, build_report
from .networks import load_checkpoint
from .noising import GUIDED
from .sample import (
    LabelSpec,
    SamplerConfig,
    VARIANTS,
    realize_labels,
    reconstruct,
    sample_guided,
    sample_prior_z,
    sample_unguided,
    trace_cloud,
)
from .schedule import linear_schedule
from .train import NumericalAbort, TrainConfig, config_from_mapping, config_to_text, train_model


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); we own the exit codes
        raise UsageError(message)


def parse_kv_text(text: str) -> dict[str, str]:
    """`key = value` lines; blank lines and `#` comments ignored."""
    mapping = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        mapping[key.strip()] = value.strip()
    return mapping


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(path, command: str, entries: dict) -> None:
    lines = [f"command = {command}", f"pcdiff_version = {__version__}"]
    for key in sorted(entries):
        lines.append(f"{key} = {entries[key]}")
    Path(path).write_text("\n".join(lines) + "\n")


def _print_resolved(entries: dict) -> None:
    for key in sorted(entries):
        print(f"{key} = {entries[key]}")


def _load_cloud_set(path) -> list[LabeledPointCloud]:
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob("*.lpcd"))
        if not files:
            raise LpcdError(f"no .lpcd files in directory {p}", 0)
        clouds = []
        for f in files:
            clouds.extend(load_dataset(f).shapes)
        return clouds
    return load_dataset(p).shapes


def _parse_labels_arg(raw: str, num_classes: int) -> LabelSpec:
    path = Path(raw)
    if path.exists():
        labels = np.loadtxt(path, dtype=np.int64, ndmin=1)
        return LabelSpec(labels=labels)
    try:
        ratios = np.array([float(x) for x in raw.split(",")])
    except ValueError as exc:
        raise UsageError(f"--labels must be comma ratios or a label file, got {raw!r}") from exc
    if len(ratios) != num_classes:
        raise UsageError(f"--labels needs {num_classes} ratios, got {len(ratios)}")
    return LabelSpec(ratios=ratios)


def _cmd_synth(args) -> int:
    shapes = [generate_synthetic(args.family, args.points, args.seed + i) for i in range(args.count)]
    dataset = Dataset(shapes=shapes, category=args.category or args.family, level=args.level)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(dataset, out)
    entries = {
        "config.family": args.family,
        "config.count": args.count,
        "config.points": args.points,
        "config.level": args.level,
        "config.category": dataset.category,
        "seed": args.seed,
        "output.dataset": str(out),
        "output.dataset.sha256": _sha256(out),
    }
    _print_resolved(entries)
    _write_manifest(f"{out}.manifest", "synth", entries)
    return 0


def _resolve_train_config(args) -> TrainConfig:
    cfg = TrainConfig()
    if args.config:
        try:
            cfg = config_from_mapping(parse_kv_text(Path(args.config).read_text()), cfg)
        except (KeyError, ValueError) as exc:
            raise UsageError(f"bad config file {args.config}: {exc}") from exc
    overrides = {}
    if args.mode:
        overrides["mode"] = args.mode
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.steps is not None:
        overrides["max_steps"] = str(args.steps)
    try:
        return config_from_mapping(overrides, cfg)
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _cmd_train(args) -> int:
    cfg = _resolve_train_config(args)
    dataset = load_dataset(args.data)
    out_dir = Path(args.out)
    entries = {f"config.{k} ": v for k, v in ()}  # placeholder, filled below
    entries = {}
    for line in config_to_text(cfg).strip().splitlines():
        key, _, value = line.partition(" = ")
        entries[f"config.{key}"] = value
    entries["input.data"] = str(args.data)
    entries["input.data.sha256"] = _sha256(args.data)
    entries["seed"] = cfg.seed
    _print_resolved(entries)
    train_model(cfg, dataset, out_dir=out_dir)
    entries["output.checkpoint"] = str(out_dir / "last.pcdk")
    entries["output.checkpoint.sha256"] = _sha256(out_dir / "last.pcdk")
    _write_manifest(out_dir / "manifest.txt", "train", entries)
    return 0


def _cmd_sample(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    sched = linear_schedule(ckpt.beta_start, ckpt.beta_end, ckpt.num_steps)
    spec = None
    if ckpt.mode == GUIDED:
        if not args.labels:
            raise UsageError("guided sampling requires --labels (comma ratios or a label file)")
        spec = _parse_labels_arg(args.labels, ckpt.num_classes)
    clouds = []
    trace = []
    for lane in range(args.count):
        cfg = SamplerConfig(variant=args.variant, seed=args.seed, trace=bool(args.trace_dir) and lane == 0)
        z = sample_prior_z(ckpt, args.seed, lane)
        if ckpt.mode == GUIDED:
            labels = realize_labels(spec, args.n, ckpt.num_classes, args.seed, lane)
            cloud, tr = sample_guided(ckpt, sched, z, labels, cfg, lane)
        else:
            cloud, tr = sample_unguided(ckpt, sched, z, args.n, cfg, lane)
        clouds.append(cloud)
        if cfg.trace:
            trace = tr
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(Dataset(shapes=clouds, category=f"sampled-{ckpt.mode}"), out)
    if args.ply_dir:
        ply_dir = Path(args.ply_dir)
        ply_dir.mkdir(parents=True, exist_ok=True)
        for i, cloud in enumerate(clouds):
            save_ply(cloud, ply_dir / f"sample_{i:04d}.ply")
    if args.trace_dir:
        trace_dir = Path(args.trace_dir)
        trace_dir.mkdir(parents=True, exist_ok=True)
        stem = out.stem
        for dc in trace:
            tc = trace_cloud(dc, ckpt.num_classes, ckpt.label_encoding)
            save_dataset(Dataset(shapes=[tc]), trace_dir / f"{stem}_t{dc.t}.lpcd")
    entries = {
        "config.mode": ckpt.mode,
        "config.n": args.n,
        "config.count": args.count,
        "config.variant": args.variant,
        "config.labels": args.labels or "",
        "seed": args.seed,
        "input.ckpt": str(args.ckpt),
        "input.ckpt.sha256": _sha256(args.ckpt),
        "output.dataset": str(out),
        "output.dataset.sha256": _sha256(out),
    }
    _print_resolved(entries)
    _write_manifest(f"{out}.manifest", "sample", entries)
    return 0


def _cmd_reconstruct(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    sched = linear_schedule(ckpt.beta_start, ckpt.beta_end, ckpt.num_steps)
    dataset = load_dataset(args.data, category=args.category or "unspecified")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = SamplerConfig(variant=args.variant, seed=args.seed)

    global_cds = []
    class_cds = []
    recon_shapes = []
    for lane, cloud in enumerate(dataset.shapes):
        normed, _, _ = normalize(cloud)
        recon, _ = reconstruct(ckpt, sched, normed, cfg, lane)
        recon_shapes.append(recon)
        global_cds.append(global_cd(recon.points, normed.points))
        try:
            class_cds.append(
                per_class_cd(recon.points, recon.labels, normed.points, normed.labels)
            )
        except NoSharedClassError:
            class_cds.append(float("nan"))

    row = f"{'G' if ckpt.mode == GUIDED else 'U'}{dataset.level}"
    g_mean = float(np.mean(global_cds))
    c_mean = float(np.nanmean(class_cds))
    table = [
        "reconstruction error (CD x 1e2)",
        f"{'row':<5} {'category':<16} {'global':>10} {'per-class':>10} {'shapes':>7}",
        f"{row:<5} {dataset.category:<16} {g_mean * 100:>10.2f} {c_mean * 100:>10.2f} "
        f"{len(dataset.shapes):>7}",
    ]
    (out_dir / "reconstruction.txt").write_text("\n".join(table) + "\n")
    kv = [
        f"row = {row}",
        f"category = {dataset.category}",
        f"shapes = {len(dataset.shapes)}",
        f"global_cd.raw = {g_mean:.17g}",
        f"global_cd.scaled = {g_mean * 100:.2f}",
        f"per_class_cd.raw = {c_mean:.17g}",
        f"per_class_cd.scaled = {c_mean * 100:.2f}",
    ]
    (out_dir / "reconstruction.kv").write_text("\n".join(kv) + "\n")
    if args.save_clouds:
        save_dataset(Dataset(shapes=recon_shapes, category=dataset.category), out_dir / "recon.lpcd")
    print("\n".join(table))
    entries = {
        "config.variant": args.variant,
        "config.category": dataset.category,
        "seed": args.seed,
        "input.ckpt": str(args.ckpt),
        "input.ckpt.sha256": _sha256(args.ckpt),
        "input.data": str(args.data),
        "input.data.sha256": _sha256(args.data),
    }
    _write_manifest(out_dir / "manifest.txt", "reconstruct", entries)
    return 0


def _cmd_eval(args) -> int:
    gen = [normalize(c)[0] for c in _load_cloud_set(args.gen)]
    ref = [normalize(c)[0] for c in _load_cloud_set(args.ref)]
    report = build_report(gen, ref, grid_resolution=args.grid)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.render_text())
    if args.kv:
        Path(args.kv).write_text(report.to_kv_text())
    print(report.render_text(), end="")
    entries = {
        "config.grid": args.grid,
        "input.gen": str(args.gen),
        "input.gen.sha256": _hash_set(args.gen),
        "input.ref": str(args.ref),
        "input.ref.sha256": _hash_set(args.ref),
        "output.report": str(out),
    }
    _write_manifest(f"{out}.manifest", "eval", entries)
    return 0


def _hash_set(path) -> str:
    p = Path(path)
    if p.is_dir():
        h = hashlib.sha256()
        for f in sorted(p.glob("*.lpcd")):
            h.update(f.read_bytes())
        return h.hexdigest()
    return _sha256(p)


def _cmd_export_ply(args) -> int:
    dataset = load_dataset(args.infile)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, cloud in enumerate(dataset.shapes):
        save_ply(cloud, out_dir / f"shape_{i:04d}.ply")
    entries = {
        "input.dataset": str(args.infile),
        "input.dataset.sha256": _sha256(args.infile),
        "output.count": len(dataset.shapes),
    }
    _print_resolved(entries)
    _write_manifest(out_dir / "manifest.txt", "export-ply", entries)
    return 0


def _build_parser() -> _Parser:
    parser = _Parser(prog="pcdiff", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"pcdiff {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    p.add_argument("--family", required=True, choices=SHAPE_FAMILIES)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--points", type=int, default=2048)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--category", default=None)
    p.add_argument("--level", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train a guided or unguided model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--mode", choices=("guided", "unguided"), default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("sample", help="draw point clouds from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--n", type=int, default=2048)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--labels", default=None, help="comma ratios or a label file (guided)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variant", choices=VARIANTS, default="paper-direct")
    p.add_argument("--out", required=True)
    p.add_argument("--ply-dir", default=None)
    p.add_argument("--trace-dir", default=None)
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("reconstruct", help="encode-then-sample reconstruction tables")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--category", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variant", choices=VARIANTS, default="paper-direct")
    p.add_argument("--save-clouds", action="store_true")
    p.set_defaults(func=_cmd_reconstruct)

    p = sub.add_parser("eval", help="JSD/MMD/COV/1-NNA report for two cloud sets")
    p.add_argument("--gen", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--grid", type=int, default=DEFAULT_GRID)
    p.add_argument("--out", required=True)
    p.add_argument("--kv", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("export-ply", help="convert an LPCD dataset to PLY files")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export_ply)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3
    except (LpcdError, NoSharedClassError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
