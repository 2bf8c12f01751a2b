"""Training objectives and Chamfer distances.

Two surfaces: plain-array functions for evaluation/metrics, and
graph-building variants (suffix `_graph`) that assemble the same
quantities from autodiff primitives so training can differentiate
through them. Chamfer matches are found on current values and frozen
into constant selection matrices; gradients flow through the matched
coordinates (the standard subgradient through an argmin).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Tensor

_SEL_XYZ = np.eye(4)[:, :3]  # (4, 3): keep spatial columns
_SEL_C = np.eye(4)[:, 3:]  # (4, 1): keep the label column


class NoSharedClassError(ValueError):
    """Per-class Chamfer is undefined when the clouds share no class."""


@dataclass
class LossBreakdown:
    spatial_mse: float
    label_mse: float
    per_class_cd: float
    kl: float
    total: float

    def as_line(self, step: int) -> str:
        return (
            f"{step} {self.spatial_mse:.17g} {self.label_mse:.17g} "
            f"{self.per_class_cd:.17g} {self.kl:.17g} {self.total:.17g}"
        )


def guided_mse(e_theta: np.ndarray, e_rand: np.ndarray) -> tuple[float, float]:
    """(spatial, label) MSE: (1/n) sum ||e_xyz - e_rand||^2, (1/n) sum e_c^2."""
    e_theta = np.asarray(e_theta, dtype=np.float64)
    e_rand = np.asarray(e_rand, dtype=np.float64)
    if e_theta.shape != (len(e_rand), 4) or e_rand.shape[1] != 3:
        raise ValueError(f"expected (n, 4) and (n, 3), got {e_theta.shape} and {e_rand.shape}")
    n = len(e_theta)
    spatial = float(np.sum((e_theta[:, :3] - e_rand) ** 2) / n)
    label = float(np.sum(e_theta[:, 3] ** 2) / n)
    return spatial, label


def _nn_sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared distance from each row of a to its nearest row of b."""
    d, _ = cKDTree(b).query(a, k=1)
    return d * d


def global_cd(p: np.ndarray, q: np.ndarray) -> float:
    """Symmetric squared-distance Chamfer with 1/|.| on both directions."""
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
    return float(_nn_sqdist(p, q).mean() + _nn_sqdist(q, p).mean())


def per_class_cd(
    p_points: np.ndarray,
    p_labels: np.ndarray,
    q_points: np.ndarray,
    q_labels: np.ndarray,
) -> float:
    """Chamfer restricted to same-class point pairs, averaged over classes.

    Classes present in only one cloud are excluded (the directed terms
    are undefined on an empty side) and reported with a warning.
    """
    p_labels = np.asarray(p_labels)
    q_labels = np.asarray(q_labels)
    p_classes = set(np.unique(p_labels).tolist())
    q_classes = set(np.unique(q_labels).tolist())
    shared = sorted(p_classes & q_classes)
    if not shared:
        raise NoSharedClassError(
            f"no shared class between clouds (P has {sorted(p_classes)}, "
            f"Q has {sorted(q_classes)})"
        )
    skipped = (p_classes | q_classes) - set(shared)
    if skipped:
        warnings.warn(f"classes {sorted(skipped)} present in only one cloud; excluded from CD")
    acc = 0.0
    for c in shared:
        acc += global_cd(p_points[p_labels == c], q_points[q_labels == c])
    return acc / len(shared)


def unguided_mse(e_theta: np.ndarray, e_rand: np.ndarray) -> float:
    """(1/n) sum ||e_theta - e_rand||^2 over all four channels."""
    e_theta = np.asarray(e_theta, dtype=np.float64)
    e_rand = np.asarray(e_rand, dtype=np.float64)
    if e_theta.shape != e_rand.shape or e_theta.ndim != 2 or e_theta.shape[1] != 4:
        raise ValueError(f"expected matching (n, 4), got {e_theta.shape} and {e_rand.shape}")
    return float(np.sum((e_theta - e_rand) ** 2) / len(e_theta))


def split_xyz_c(e_theta: Tensor) -> tuple[Tensor, Tensor]:
    """Split an (n, 4) tensor into (n, 3) spatial and (n, 1) label parts."""
    return ad.matmul(e_theta, Tensor(_SEL_XYZ)), ad.matmul(e_theta, Tensor(_SEL_C))


def per_class_cd_graph(recon_xyz: Tensor, x0_xyz: np.ndarray, labels: np.ndarray) -> Tensor:
    """Differentiable per-class Chamfer between a reconstruction and its
    target, both carrying the same label array (the training case)."""
    vals = recon_xyz.data
    n = len(labels)
    classes = np.unique(labels)
    acc = None
    for c in classes:
        idx = np.flatnonzero(labels == c)
        k = len(idx)
        rows = np.zeros((k, n))
        rows[np.arange(k), idx] = 1.0
        p_c = ad.matmul(Tensor(rows), recon_xyz)  # (k, 3) graph side
        q_c = x0_xyz[idx]  # (k, 3) constant side
        d2 = np.sum((vals[idx][:, None, :] - q_c[None, :, :]) ** 2, axis=-1)
        matched_q = q_c[np.argmin(d2, axis=1)]  # nearest target per recon point
        term1 = ad.mul(ad.total(ad.square(ad.sub(p_c, Tensor(matched_q)))), 1.0 / k)
        back = np.zeros((k, k))
        back[np.arange(k), np.argmin(d2, axis=0)] = 1.0  # nearest recon per target point
        matched_p = ad.matmul(Tensor(back), p_c)
        term2 = ad.mul(ad.total(ad.square(ad.sub(Tensor(q_c), matched_p))), 1.0 / k)
        term = ad.add(term1, term2)
        acc = term if acc is None else ad.add(acc, term)
    return ad.mul(acc, 1.0 / len(classes))


def guided_total_graph(
    e_theta: Tensor,
    e_rand: np.ndarray,
    noised_xyz: np.ndarray,
    x0_xyz: np.ndarray,
    labels: np.ndarray,
    kl: Tensor,
    lambda_kl: float,
) -> tuple[Tensor, LossBreakdown]:
    """Guided objective: spatial MSE + label MSE + per-class CD + lambda * KL.

    The reconstruction entering the CD term is noised_xyz - e_theta_xyz
    with the original labels.
    """
    n = e_theta.shape[0]
    e_xyz, e_c = split_xyz_c(e_theta)
    spatial = ad.mul(ad.total(ad.square(ad.sub(e_xyz, Tensor(e_rand)))), 1.0 / n)
    label = ad.mul(ad.total(ad.square(e_c)), 1.0 / n)
    recon_xyz = ad.sub(Tensor(noised_xyz), e_xyz)
    cd = per_class_cd_graph(recon_xyz, x0_xyz, labels)
    total = ad.add(ad.add(ad.add(spatial, label), cd), ad.mul(kl, lambda_kl))
    breakdown = LossBreakdown(
        spatial_mse=float(spatial.data),
        label_mse=float(label.data),
        per_class_cd=float(cd.data),
        kl=float(kl.data),
        total=float(total.data),
    )
    return total, breakdown


def unguided_total_graph(
    e_theta: Tensor,
    e_rand: np.ndarray,
    kl: Tensor,
    lambda_kl: float,
) -> tuple[Tensor, LossBreakdown]:
    """Unguided objective: 4-channel MSE + lambda * KL (no Chamfer term).

    The breakdown reports the MSE split into its spatial and
    label-channel parts; their sum is the 4-channel MSE.
    """
    n = e_theta.shape[0]
    diff = ad.sub(e_theta, Tensor(np.asarray(e_rand, dtype=np.float64)))
    mse = ad.mul(ad.total(ad.square(diff)), 1.0 / n)
    total = ad.add(mse, ad.mul(kl, lambda_kl))
    delta = e_theta.data - e_rand
    breakdown = LossBreakdown(
        spatial_mse=float(np.sum(delta[:, :3] ** 2) / n),
        label_mse=float(np.sum(delta[:, 3] ** 2) / n),
        per_class_cd=0.0,
        kl=float(kl.data),
        total=float(total.data),
    )
    return total, breakdown
