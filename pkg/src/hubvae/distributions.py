"""Gaussian and Bernoulli primitives used by the losses and the hub machinery."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))
PROB_CLAMP = 1e-6


@dataclass(frozen=True)
class DiagGaussian:
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).ravel()
        var = np.asarray(self.var, dtype=np.float64).ravel()
        if mean.shape != var.shape:
            raise ValueError(f"mean has {mean.size} entries but var has {var.size}")
        if not np.all(np.isfinite(var)) or np.any(var <= 0):
            raise ValueError("variance entries must be positive and finite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @property
    def dim(self) -> int:
        return self.mean.size

    def diag_var(self) -> np.ndarray:
        return self.var


@dataclass(frozen=True)
class IsoGaussian:
    """Isotropic Gaussian ``N(mean, var * I)`` with a scalar ``var``."""

    mean: np.ndarray
    var: float

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).ravel()
        var = float(self.var)
        if not np.isfinite(var) or var <= 0:
            raise ValueError("variance must be positive and finite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @property
    def dim(self) -> int:
        return self.mean.size

    def diag_var(self) -> np.ndarray:
        return np.full(self.mean.size, self.var)


def _check_dims(p, q) -> None:
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {q.dim}")


def wasserstein2(p, q) -> float:
    """Closed-form 2-Wasserstein distance between two diagonal Gaussians."""
    _check_dims(p, q)
    dm = p.mean - q.mean
    ds = np.sqrt(p.diag_var()) - np.sqrt(q.diag_var())
    return float(np.sqrt(np.dot(dm, dm) + np.dot(ds, ds)))


def pairwise_wasserstein(means_a, stds_a, means_b=None, stds_b=None) -> np.ndarray:
    """Matrix of 2-Wasserstein distances between two sets of diagonal Gaussians.

    Gaussians are given by their means and *standard deviations* (rows). With
    one set only, the result is exactly symmetric with a zero diagonal.
    """
    a = np.hstack([means_a, stds_a])
    b = a if means_b is None else np.hstack([means_b, stds_b])
    out = np.empty((a.shape[0], b.shape[0]))
    # explicit differences rather than the Gram expansion: exact zeros and symmetry
    for i in range(a.shape[0]):
        diff = b - a[i]
        out[i] = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    return out


def log_density(p, z) -> float:
    z = np.asarray(z, dtype=np.float64).ravel()
    if z.size != p.dim:
        raise ValueError(f"point has {z.size} entries, distribution has {p.dim}")
    var = p.diag_var()
    if np.any(var <= 0):
        raise ValueError("variance must be positive")
    diff = z - p.mean
    return float(-0.5 * np.sum(LOG_2PI + np.log(var) + diff * diff / var))


def kl_diag_gaussians(q: DiagGaussian, p) -> float:
    """KL(q || p) in closed form for diagonal/isotropic Gaussians."""
    _check_dims(q, p)
    vq = q.diag_var()
    vp = p.diag_var()
    dm = q.mean - p.mean
    return float(0.5 * np.sum(vq / vp + dm * dm / vp - 1.0 - np.log(vq / vp)))


def clamp_probs(probs):
    return np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)


def bernoulli_loglik(probs, x) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if probs.shape != x.shape:
        raise ValueError(f"length mismatch: {probs.shape} vs {x.shape}")
    p = clamp_probs(probs)
    return float(np.sum(x * np.log(p) + (1.0 - x) * np.log1p(-p)))
