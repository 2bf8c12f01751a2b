"""Generative evaluation: JSD, MMD, COV, 1-NNA over Chamfer distance.

JSD pools every point of a set into an occupancy histogram on an R^3
grid spanning [-1, 1]^3 (clouds are expected normalized to the unit
sphere; stray coordinates clamp into the boundary cells). MMD, COV and
1-NNA run on the pairwise Chamfer matrix with deterministic
lowest-index tie-breaking, so outputs are reproducible bit-for-bit.

Reported values follow the usual scaling conventions: JSD, COV and
1-NNA x 10^2 (COV as a percentage) and MMD x 10^3.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .data import LabeledPointCloud

DEFAULT_GRID = 28


def worker_count() -> int:
    raw = os.environ.get("PCDIFF_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _points(cloud) -> np.ndarray:
    if isinstance(cloud, LabeledPointCloud):
        return cloud.points
    return np.asarray(cloud, dtype=np.float64).reshape(-1, 3)


@dataclass(frozen=True)
class MetricsReport:
    jsd: float
    mmd: float
    cov: float
    one_nna: float
    gen_size: int
    ref_size: int
    grid_resolution: int

    def __post_init__(self):
        if not (0.0 <= self.jsd <= math.log(2.0) + 1e-12):
            raise ValueError(f"jsd {self.jsd} outside [0, ln 2]")
        if not (0.0 <= self.cov <= 1.0):
            raise ValueError(f"cov {self.cov} outside [0, 1]")
        if not (0.0 <= self.one_nna <= 1.0):
            raise ValueError(f"1-NNA {self.one_nna} outside [0, 1]")
        if self.mmd < 0.0:
            raise ValueError(f"mmd {self.mmd} negative")

    # scaled views used in reports
    @property
    def jsd_scaled(self) -> float:
        return self.jsd * 1e2

    @property
    def mmd_scaled(self) -> float:
        return self.mmd * 1e3

    @property
    def cov_scaled(self) -> float:
        return self.cov * 1e2

    @property
    def one_nna_scaled(self) -> float:
        return self.one_nna * 1e2

    def render_text(self) -> str:
        rows = [
            ("JSD (x1e2)", self.jsd_scaled, self.jsd),
            ("MMD (x1e3)", self.mmd_scaled, self.mmd),
            ("COV (%)", self.cov_scaled, self.cov),
            ("1-NNA (x1e2)", self.one_nna_scaled, self.one_nna),
        ]
        lines = [
            f"generated shapes: {self.gen_size}   reference shapes: {self.ref_size}   "
            f"jsd grid: {self.grid_resolution}^3",
            f"{'metric':<14} {'scaled':>10}   raw",
        ]
        for name, scaled, raw in rows:
            lines.append(f"{name:<14} {scaled:>10.2f}   {raw:.17g}")
        return "\n".join(lines) + "\n"

    def to_kv_text(self) -> str:
        pairs = [
            ("gen_count", str(self.gen_size)),
            ("ref_count", str(self.ref_size)),
            ("grid_resolution", str(self.grid_resolution)),
            ("jsd.raw", f"{self.jsd:.17g}"),
            ("jsd.scaled", f"{self.jsd_scaled:.2f}"),
            ("mmd.raw", f"{self.mmd:.17g}"),
            ("mmd.scaled", f"{self.mmd_scaled:.2f}"),
            ("cov.raw", f"{self.cov:.17g}"),
            ("cov.scaled", f"{self.cov_scaled:.2f}"),
            ("one_nna.raw", f"{self.one_nna:.17g}"),
            ("one_nna.scaled", f"{self.one_nna_scaled:.2f}"),
        ]
        return "\n".join(f"{k} = {v}" for k, v in pairs) + "\n"


def jsd_discrete(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon divergence between two distributions, natural log."""
    p = np.asarray(p, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    m = 0.5 * (p + q)

    def kl(a, b):
        mask = a > 0  # 0 log 0 := 0
        return float(np.sum(a[mask] * np.log(a[mask] / b[mask])))

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def occupancy(clouds, grid_resolution: int) -> np.ndarray:
    """Pooled point-occupancy distribution over an R^3 grid of [-1, 1]^3."""
    if not clouds:
        raise ValueError("empty cloud set")
    r = grid_resolution
    counts = np.zeros(r * r * r, dtype=np.float64)
    for cloud in clouds:
        pts = _points(cloud)
        idx = np.floor((pts + 1.0) * (r / 2.0)).astype(np.int64)
        idx = np.clip(idx, 0, r - 1)
        flat = (idx[:, 0] * r + idx[:, 1]) * r + idx[:, 2]
        counts += np.bincount(flat, minlength=r * r * r)
    return counts / counts.sum()


def jsd(gen_set, ref_set, grid_resolution: int = DEFAULT_GRID) -> float:
    if grid_resolution < 2:
        raise ValueError(f"grid resolution must be >= 2, got {grid_resolution}")
    return jsd_discrete(occupancy(gen_set, grid_resolution), occupancy(ref_set, grid_resolution))


def _cd_from_trees(pts_a, tree_a, pts_b, tree_b) -> float:
    d_ab, _ = tree_b.query(pts_a, k=1)
    d_ba, _ = tree_a.query(pts_b, k=1)
    return float(np.mean(d_ab * d_ab) + np.mean(d_ba * d_ba))


def pairwise_cd(set_a, set_b) -> np.ndarray:
    """|A| x |B| matrix of symmetric squared-distance Chamfer values."""
    pts_a = [_points(c) for c in set_a]
    pts_b = [_points(c) for c in set_b]
    same = set_a is set_b
    trees_a = [cKDTree(p) for p in pts_a]
    trees_b = trees_a if same else [cKDTree(p) for p in pts_b]
    out = np.zeros((len(pts_a), len(pts_b)))
    pairs = [
        (i, j)
        for i in range(len(pts_a))
        for j in range(len(pts_b))
        if not (same and j <= i)
    ]

    def fill(pair):
        i, j = pair
        out[i, j] = _cd_from_trees(pts_a[i], trees_a[i], pts_b[j], trees_b[j])

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fill, pairs))
    else:
        for pair in pairs:
            fill(pair)
    if same:
        out = out + out.T
    return out


def mmd_cd(gen_set, ref_set, cd: np.ndarray | None = None) -> float:
    """Mean over references of the minimum Chamfer distance to any generation."""
    if len(gen_set) == 0 or len(ref_set) == 0:
        raise ValueError("both sets must be non-empty")
    if cd is None:
        cd = pairwise_cd(gen_set, ref_set)
    return float(cd.min(axis=0).mean())


def coverage(gen_set, ref_set, cd: np.ndarray | None = None) -> float:
    """Fraction of references that are the nearest match of some generation."""
    if len(gen_set) == 0 or len(ref_set) == 0:
        raise ValueError("both sets must be non-empty")
    if cd is None:
        cd = pairwise_cd(gen_set, ref_set)
    matched = np.unique(np.argmin(cd, axis=1))  # argmin ties -> lowest ref index
    return float(len(matched) / cd.shape[1])


def one_nna(gen_set, ref_set, cd_full: np.ndarray | None = None) -> float:
    """Leave-one-out 1-NN two-sample accuracy over the merged set.

    Distance ties break toward the lowest global index (generated
    clouds first, then references). 0.5 means the sets are
    indistinguishable.
    """
    n_gen, n_ref = len(gen_set), len(ref_set)
    if n_gen + n_ref < 2:
        raise ValueError("need at least two clouds in total")
    if cd_full is None:
        merged = list(gen_set) + list(ref_set)
        cd_full = pairwise_cd(merged, merged)
    dist = cd_full.copy()
    np.fill_diagonal(dist, np.inf)
    nn = np.argmin(dist, axis=1)
    side = np.concatenate([np.zeros(n_gen, dtype=int), np.ones(n_ref, dtype=int)])
    return float((side[nn] == side).mean())


def build_report(gen_set, ref_set, grid_resolution: int = DEFAULT_GRID) -> MetricsReport:
    """All four metrics from one pairwise Chamfer pass over the merged set."""
    n_gen, n_ref = len(gen_set), len(ref_set)
    merged = list(gen_set) + list(ref_set)
    cd_full = pairwise_cd(merged, merged)
    cd_gr = cd_full[:n_gen, n_gen:]
    return MetricsReport(
        jsd=jsd(gen_set, ref_set, grid_resolution),
        mmd=mmd_cd(gen_set, ref_set, cd_gr),
        cov=coverage(gen_set, ref_set, cd_gr),
        one_nna=one_nna(gen_set, ref_set, cd_full),
        gen_size=n_gen,
        ref_size=n_ref,
        grid_resolution=grid_resolution,
    )
