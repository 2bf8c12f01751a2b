"""Labeled point clouds: data model, LPCD binary format, normalization,
synthetic desk-scale shapes, PLY export, and split handling.

LPCD format (little-endian): magic "LPCD", version u32 = 1, K u32,
shape_count u32; per shape: n u32, then n records of 3 x f32
coordinates + u16 label + u16 zero padding. Coordinates are stored as
f32; generators quantize to f32 so save -> load round-trips are
bit-exact.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import DOMAIN_SYNTH, stream

LPCD_MAGIC = b"LPCD"
LPCD_VERSION = 1
_RECORD = np.dtype([("xyz", "<f4", 3), ("label", "<u2"), ("pad", "<u2")])

SHAPE_FAMILIES = ("barbell", "chair", "ring")

# 16-color palette for PLY export (RGB u8), one entry per part label
PALETTE16 = (
    (230, 25, 75), (60, 180, 75), (0, 130, 200), (255, 225, 25),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 190), (0, 128, 128), (170, 110, 40),
    (128, 0, 0), (128, 128, 0), (0, 0, 128), (128, 128, 128),
)


class LpcdError(ValueError):
    """Malformed LPCD data; `offset` is the failing byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class LabeledPointCloud:
    """n points with (x, y, z) coordinates and integer part labels < K."""

    points: np.ndarray  # (n, 3) float64
    labels: np.ndarray  # (n,) int64
    num_classes: int

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be (n, 3), got {self.points.shape}")
        if self.labels.shape != (self.points.shape[0],):
            raise ValueError("labels must be one per point")
        if len(self.points) < 1:
            raise ValueError("a cloud needs at least one point")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(
                f"labels must lie in [0, {self.num_classes - 1}], "
                f"got range [{self.labels.min()}, {self.labels.max()}]"
            )

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class Dataset:
    shapes: list[LabeledPointCloud]
    category: str = "unspecified"
    level: int = 1
    split_tags: list[str] | None = None  # per-shape "train"/"test", optional

    def __post_init__(self):
        if self.level not in (1, 2, 3):
            raise ValueError(f"granularity level must be 1, 2, or 3, got {self.level}")
        if self.shapes:
            k = self.shapes[0].num_classes
            if any(s.num_classes != k for s in self.shapes):
                raise ValueError("all shapes in a dataset must share one label count")
        if self.split_tags is not None:
            if len(self.split_tags) != len(self.shapes):
                raise ValueError("split_tags must be one per shape")
            bad = set(self.split_tags) - {"train", "test"}
            if bad:
                raise ValueError(f"split tags must be 'train' or 'test', got {bad}")

    @property
    def num_classes(self) -> int:
        if not self.shapes:
            raise ValueError("empty dataset has no label count")
        return self.shapes[0].num_classes

    def __len__(self) -> int:
        return len(self.shapes)


def save_dataset(dataset: Dataset, path) -> None:
    if not dataset.shapes:
        raise ValueError("refusing to write an empty dataset")
    with open(path, "wb") as f:
        f.write(LPCD_MAGIC)
        f.write(struct.pack("<III", LPCD_VERSION, dataset.num_classes, len(dataset.shapes)))
        for cloud in dataset.shapes:
            f.write(struct.pack("<I", len(cloud)))
            rec = np.zeros(len(cloud), dtype=_RECORD)
            rec["xyz"] = cloud.points.astype("<f4")
            rec["label"] = cloud.labels.astype("<u2")
            f.write(rec.tobytes())


def load_dataset(path, category: str = "unspecified", level: int = 1) -> Dataset:
    blob = Path(path).read_bytes()

    def need(offset: int, count: int, what: str) -> None:
        if offset + count > len(blob):
            raise LpcdError(f"truncated file while reading {what}", offset)

    need(0, 4, "magic")
    if blob[:4] != LPCD_MAGIC:
        raise LpcdError(f"bad magic {blob[:4]!r}", 0)
    need(4, 12, "header")
    version, num_classes, shape_count = struct.unpack_from("<III", blob, 4)
    if version != LPCD_VERSION:
        raise LpcdError(f"unsupported version {version}", 4)
    if num_classes < 1:
        raise LpcdError("label count must be >= 1", 8)

    offset = 16
    shapes = []
    for si in range(shape_count):
        need(offset, 4, f"point count of shape {si}")
        (n,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        if n < 1:
            raise LpcdError(f"shape {si} has zero points", offset - 4)
        need(offset, n * _RECORD.itemsize, f"records of shape {si}")
        rec = np.frombuffer(blob, dtype=_RECORD, count=n, offset=offset)
        labels = rec["label"].astype(np.int64)
        bad = np.flatnonzero(labels >= num_classes)
        if bad.size:
            bad_off = offset + int(bad[0]) * _RECORD.itemsize + 12
            raise LpcdError(
                f"label {labels[bad[0]]} >= K={num_classes} in shape {si}", bad_off
            )
        shapes.append(
            LabeledPointCloud(
                points=rec["xyz"].astype(np.float64),
                labels=labels,
                num_classes=num_classes,
            )
        )
        offset += n * _RECORD.itemsize
    if offset != len(blob):
        raise LpcdError("trailing bytes after last shape", offset)
    return Dataset(shapes=shapes, category=category, level=level)


def normalize(cloud: LabeledPointCloud):
    """Center on the centroid and scale the farthest point to norm 1.

    Returns (normalized cloud, centroid, scale). A degenerate cloud
    (all points identical) keeps scale 1 and is only shifted.
    """
    if not np.all(np.isfinite(cloud.points)):
        raise ValueError("cloud has non-finite coordinates")
    centroid = cloud.points.mean(axis=0)
    shifted = cloud.points - centroid
    scale = float(np.linalg.norm(shifted, axis=1).max())
    if scale == 0.0:
        scale = 1.0
    out = LabeledPointCloud(
        points=shifted / scale, labels=cloud.labels.copy(), num_classes=cloud.num_classes
    )
    return out, centroid, scale


def denormalize(cloud: LabeledPointCloud, centroid: np.ndarray, scale: float) -> LabeledPointCloud:
    return LabeledPointCloud(
        points=cloud.points * scale + centroid,
        labels=cloud.labels.copy(),
        num_classes=cloud.num_classes,
    )


def apportion(fractions, n: int, ensure_nonzero: bool = True) -> np.ndarray:
    """Largest-remainder allocation of n items to given fractions.

    Ties in remainders break toward the lower index. With
    ensure_nonzero, every class with positive fraction receives at
    least one item when n allows it.
    """
    fractions = np.asarray(fractions, dtype=np.float64)
    if abs(fractions.sum() - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions.sum()!r}")
    quotas = fractions * n
    counts = np.floor(quotas).astype(np.int64)
    remainders = quotas - counts
    # stable sort: equal remainders keep index order
    order = np.argsort(-remainders, kind="stable")
    for i in range(int(n - counts.sum())):
        counts[order[i % len(counts)]] += 1
    if ensure_nonzero and n >= np.count_nonzero(fractions):
        while ((counts == 0) & (fractions > 0)).any():
            needy = int(np.argmax((counts == 0) & (fractions > 0)))
            donor = int(np.argmax(counts))
            counts[donor] -= 1
            counts[needy] += 1
    return counts


def _ball(rng, n, center, radius):
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = radius * np.cbrt(rng.random(n))
    return center + d * r[:, None]


def _box(rng, n, center, half_extents):
    return center + rng.uniform(-1.0, 1.0, (n, 3)) * np.asarray(half_extents)


def _rod(rng, n, start, end, radius):
    t = rng.random(n)[:, None]
    axis = np.asarray(end) - np.asarray(start)
    # jitter in the plane orthogonal to the rod axis (axis held near x here)
    off = rng.standard_normal((n, 3)) * radius
    off[:, 0] = 0.0
    return np.asarray(start) + t * axis + off


def generate_synthetic(family: str, n: int, seed: int) -> LabeledPointCloud:
    """Deterministic desk-scale shape with per-part labels.

    Families: "barbell" (K=2: end balls / bar), "chair" (K=3: seat /
    legs / back), "ring" (K=4 arc segments). Shape proportions jitter
    with the seed so a dataset of many seeds is not one repeated cloud.
    """
    if family not in SHAPE_FAMILIES:
        raise ValueError(f"unknown shape family {family!r}, options: {SHAPE_FAMILIES}")
    rng = stream(seed, DOMAIN_SYNTH)
    if family == "barbell":
        fractions = (0.6, 0.4)
        counts = _check_counts(fractions, n)
        half_len = 1.0 * (1.0 + 0.15 * (rng.random() - 0.5))
        ball_r = 0.45 * (1.0 + 0.2 * (rng.random() - 0.5))
        n_ball = counts[0]
        left = _ball(rng, n_ball // 2, np.array([-half_len, 0, 0]), ball_r)
        right = _ball(rng, n_ball - n_ball // 2, np.array([half_len, 0, 0]), ball_r)
        bar = _rod(rng, counts[1], [-half_len, 0, 0], [half_len, 0, 0], 0.07)
        points = np.vstack([left, right, bar])
        labels = np.repeat([0, 1], counts)
        k = 2
    elif family == "chair":
        fractions = (0.4, 0.35, 0.25)
        counts = _check_counts(fractions, n)
        w = 0.8 * (1.0 + 0.2 * (rng.random() - 0.5))
        h = 0.7 * (1.0 + 0.2 * (rng.random() - 0.5))
        seat = _box(rng, counts[0], [0, 0, 0], [w, w, 0.06])
        leg_counts = _check_counts((0.25, 0.25, 0.25, 0.25), counts[1])
        legs = np.vstack(
            [
                _rod(rng, c, [sx * w, sy * w, -h], [sx * w, sy * w, 0], 0.05)
                for c, (sx, sy) in zip(
                    leg_counts, [(-0.85, -0.85), (0.85, -0.85), (-0.85, 0.85), (0.85, 0.85)]
                )
            ]
        )
        back = _box(rng, counts[2], [0, w * 0.95, h], [w, 0.06, h])
        points = np.vstack([seat, legs, back])
        labels = np.repeat([0, 1, 2], counts)
        k = 3
    else:  # ring
        k = 4
        counts = _check_counts((0.25, 0.25, 0.25, 0.25), n)
        radius = 1.0 * (1.0 + 0.15 * (rng.random() - 0.5))
        tube = 0.12
        segments = []
        for ci, c in enumerate(counts):
            theta = (ci + rng.random(c)) * (2.0 * np.pi / k)
            ring = np.column_stack(
                [radius * np.cos(theta), radius * np.sin(theta), np.zeros(c)]
            )
            segments.append(ring + rng.standard_normal((c, 3)) * tube)
        points = np.vstack(segments)
        labels = np.repeat(np.arange(k), counts)
    # quantize to f32 so LPCD save -> load is lossless
    points = points.astype(np.float32).astype(np.float64)
    return LabeledPointCloud(points=points, labels=labels, num_classes=k)


def _check_counts(fractions, n: int) -> np.ndarray:
    if n < len(fractions):
        raise ValueError(f"need at least {len(fractions)} points, got {n}")
    return apportion(fractions, n)


def save_ply(cloud: LabeledPointCloud, path, palette=PALETTE16) -> None:
    """ASCII PLY with x y z (float), red green blue (uchar), label (uchar)."""
    if cloud.num_classes > len(palette):
        raise ValueError(
            f"palette has {len(palette)} colors, cloud declares {cloud.num_classes} labels"
        )
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "property uchar label",
        "end_header",
    ]
    for (x, y, z), lab in zip(cloud.points, cloud.labels):
        r, g, b = palette[int(lab)]
        lines.append(f"{x:.9g} {y:.9g} {z:.9g} {r} {g} {b} {int(lab)}")
    Path(path).write_text("\n".join(lines) + "\n")


def split_dataset(dataset: Dataset, mode: str, ratio: float = 0.8, seed: int = 0):
    """Disjoint, exhaustive (train, test) split; deterministic under seed."""
    if not (0.0 < ratio < 1.0):
        raise ValueError(f"split ratio must be in (0, 1), got {ratio}")
    n = len(dataset.shapes)
    if mode == "preset":
        if dataset.split_tags is None:
            raise ValueError("preset split requested but dataset carries no split tags")
        train_idx = [i for i, tag in enumerate(dataset.split_tags) if tag == "train"]
        test_idx = [i for i, tag in enumerate(dataset.split_tags) if tag == "test"]
    elif mode == "random":
        perm = stream(seed, DOMAIN_SYNTH, 0xFACE).permutation(n)
        cut = int(round(ratio * n))
        train_idx = sorted(perm[:cut].tolist())
        test_idx = sorted(perm[cut:].tolist())
    else:
        raise ValueError(f"split mode must be 'preset' or 'random', got {mode!r}")
    if not train_idx or not test_idx:
        warnings.warn(f"split left an empty side (train={len(train_idx)}, test={len(test_idx)})")

    def take(idx):
        return Dataset(
            shapes=[dataset.shapes[i] for i in idx],
            category=dataset.category,
            level=dataset.level,
        )

    return take(train_idx), take(test_idx)


def convert_shapenet_part(points_file, labels_file, num_classes: int) -> LabeledPointCloud:
    """Format-mapping stub for ShapeNet-Part style text files.

    `points_file`: one "x y z [extras...]" line per point;
    `labels_file`: one integer label per line. Corpus download and
    taxonomy handling are out of scope.
    """
    pts = np.loadtxt(points_file, dtype=np.float64, ndmin=2)[:, :3]
    labels = np.loadtxt(labels_file, dtype=np.int64, ndmin=1)
    if labels.min() == 1:  # ShapeNet-Part labels are commonly 1-based
        labels = labels - 1
    return LabeledPointCloud(points=pts, labels=labels, num_classes=num_classes)
