"""k-means, hub-seeded cluster labels and unsupervised evaluation metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class ClusterLabeling:
    labels: np.ndarray
    K: int
    seeds: Optional[np.ndarray] = None
    inertia: float = float("nan")
    # inertia after each Lloyd iteration of the winning restart
    history: Optional[list[float]] = None


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    out = np.empty((points.shape[0], centers.shape[0]))
    for j, c in enumerate(centers):
        diff = points - c
        out[:, j] = np.einsum("ij,ij->i", diff, diff)
    return out


def _kmeans_pp(points: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = [points[rng.integers(n)]]
    closest = _sq_dists(points, np.array(centers))[:, 0]
    for _ in range(1, K):
        total = closest.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers.append(points[idx])
        closest = np.minimum(closest, _sq_dists(points, points[idx:idx + 1])[:, 0])
    return np.array(centers)


def _lloyd(points, K, rng, max_iters):
    centers = _kmeans_pp(points, K, rng)
    history = []
    labels = None
    for _ in range(max_iters):
        d = _sq_dists(points, centers)
        new_labels = np.argmin(d, axis=1)
        history.append(float(d[np.arange(len(points)), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(K):
            members = points[labels == j]
            if len(members):
                centers[j] = members.mean(0)
        # reseed empty clusters at the point farthest from its center
        for j in range(K):
            if not np.any(labels == j):
                d_own = _sq_dists(points, centers)[np.arange(len(points)), labels]
                far = int(np.argmax(d_own))
                centers[j] = points[far]
                labels[far] = j
    d = _sq_dists(points, centers)
    labels = np.argmin(d, axis=1)
    inertia = float(d[np.arange(len(points)), labels].sum())
    return labels, inertia, history


def kmeans(points, K: int, seed=0, max_iters: int = 100, n_init: int = 1) -> ClusterLabeling:
    """Lloyd's algorithm with k-means++ seeding; best of ``n_init`` restarts."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if K < 1 or K > n:
        raise ValueError(f"need 1 <= K <= n (K={K}, n={n})")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        labels, inertia, history = _lloyd(points, K, rng, max_iters)
        if best is None or inertia < best.inertia:
            best = ClusterLabeling(labels=labels, K=K, inertia=inertia, history=history)
    return best


def hub_seeded_labeling(
    hub_means: np.ndarray,
    hub_var: float,
    data_means: np.ndarray,
    data_vars: np.ndarray,
    K: int,
    seed=0,
) -> ClusterLabeling:
    """Cluster hub means with k-means, then give each point the label of its
    2-Wasserstein-nearest hub prior component.

    Hub components are isotropic with shared variance ``hub_var``; data
    posteriors are diagonal. Falls back to k-means on the data means when
    fewer than ``K`` distinct hubs are available.
    """
    hub_means = np.asarray(hub_means, dtype=np.float64)
    data_means = np.asarray(data_means, dtype=np.float64)
    n_distinct = len(np.unique(hub_means, axis=0)) if len(hub_means) else 0
    if n_distinct < K:
        log.info("only %d distinct hubs for K=%d; clustering data means instead", n_distinct, K)
        return kmeans(data_means, K, seed=seed)
    hub_labels = kmeans(hub_means, K, seed=seed).labels
    hub_sd = np.sqrt(hub_var)
    data_sd = np.sqrt(np.asarray(data_vars, dtype=np.float64))
    sd_term = ((data_sd - hub_sd) ** 2).sum(1)
    w_sq = _sq_dists(data_means, hub_means) + sd_term[:, None]
    # argmin returns the first minimum: ties go to the lower hub index
    nearest = np.argmin(w_sq, axis=1)
    return ClusterLabeling(labels=hub_labels[nearest], K=K, seeds=np.arange(len(hub_means)))


def _entropy(counts: np.ndarray) -> float:
    total = counts.sum()
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())


def _contingency(a, b) -> np.ndarray:
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1)
    return table


def homogeneity_completeness_v(pred, truth) -> tuple[float, float, float]:
    pred = np.asarray(getattr(pred, "labels", pred))
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    table = _contingency(truth, pred)  # rows: classes, cols: clusters
    n = table.sum()
    h_c = _entropy(table.sum(1))
    h_k = _entropy(table.sum(0))
    nz = table > 0
    joint = table[nz] / n
    col = np.broadcast_to(table.sum(0), table.shape)[nz] / n
    row = np.broadcast_to(table.sum(1)[:, None], table.shape)[nz] / n
    h_c_given_k = float(-(joint * np.log(joint / col)).sum())
    h_k_given_c = float(-(joint * np.log(joint / row)).sum())
    h = 1.0 if h_c == 0.0 else 1.0 - h_c_given_k / h_c
    c = 1.0 if h_k == 0.0 else 1.0 - h_k_given_c / h_k
    v = 0.0 if h + c == 0.0 else 2.0 * h * c / (h + c)
    return h, c, v


def v_measure(pred, truth) -> float:
    return homogeneity_completeness_v(pred, truth)[2]


def knn_purity(embeddings, truth: Sequence[int], k: int) -> float:
    """Percentage of each point's k nearest neighbors (Euclidean) sharing its label."""
    x = np.asarray(embeddings, dtype=np.float64)
    truth = np.asarray(truth)
    n = x.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"k must satisfy 1 <= k < n (k={k}, n={n})")
    d = _sq_dists(x, x)
    np.fill_diagonal(d, np.inf)
    nbrs = np.argsort(d, axis=1, kind="stable")[:, :k]
    same = truth[nbrs] == truth[:, None]
    return float(same.mean(axis=1).mean() * 100.0)
