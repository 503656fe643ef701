"""kNN graphs, hubness scores, hub selection and the good-hub filter."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

GOOD_SCORE_SENTINEL = math.inf


@dataclass
class KnnGraph:
    neighbors: np.ndarray  # (n, k) int, ascending distance, ties by index
    distances: np.ndarray  # (n, k)

    @property
    def n(self) -> int:
        return self.neighbors.shape[0]

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]


@dataclass
class HubRecord:
    index: int
    hubness: int
    rknn: list[int]
    good_score: float = float("nan")


@dataclass
class HubPool:
    epoch: int
    hubs: list[int] = field(default_factory=list)
    # how the pool was obtained: "filtered", "raw", "random" or "unfiltered"
    source: str = "filtered"

    def __len__(self) -> int:
        return len(self.hubs)


def hub_k(batch_size: int) -> int:
    """Neighborhood size used for hubness within a mini-batch: round(sqrt(B))."""
    return max(1, int(round(math.sqrt(batch_size))))


def build_knn_graph(dists, k: int) -> KnnGraph:
    dists = np.asarray(dists, dtype=np.float64)
    n = dists.shape[0]
    if dists.ndim != 2 or dists.shape[1] != n:
        raise ValueError(f"distance matrix must be square, got {dists.shape}")
    if not 1 <= k < n:
        raise ValueError(f"k must satisfy 1 <= k < n (k={k}, n={n})")
    masked = dists.copy()
    np.fill_diagonal(masked, np.inf)
    # stable sort keeps the smaller index first among equal distances
    order = np.argsort(masked, axis=1, kind="stable")[:, :k]
    return KnnGraph(neighbors=order, distances=np.take_along_axis(masked, order, axis=1))


def hubness_scores(graph: KnnGraph) -> list[HubRecord]:
    rknn: list[list[int]] = [[] for _ in range(graph.n)]
    for j in range(graph.n):
        for i in graph.neighbors[j]:
            rknn[int(i)].append(j)
    return [HubRecord(index=i, hubness=len(r), rknn=r) for i, r in enumerate(rknn)]


def select_hubs(records: Sequence[HubRecord], lam: float = 0.5) -> list[HubRecord]:
    """Keep points whose hubness exceeds mean + lam * std (population std)."""
    if not records:
        return []
    scores = np.array([r.hubness for r in records], dtype=np.float64)
    threshold = scores.mean() + lam * scores.std()
    return [r for r, s in zip(records, scores) if s > threshold]


def good_hub_scores(
    hubs: Sequence[HubRecord],
    means: np.ndarray,
    stds: np.ndarray,
    decoder_loglik: Callable[[int, int], float],
    input_dim: int,
) -> list[HubRecord]:
    """Attach the log-domain good-hub score to each hub.

    ``decoder_loglik(h, r)`` returns log p(x_h | z_r), the decoder
    log-likelihood of hub ``h``'s input given the latent sample of ``r``.
    Indices refer to rows of ``means``/``stds``. The score is the
    logsumexp of per-dimension log-likelihoods minus the log of the summed
    Wasserstein distances; a zero distance sum yields the +inf sentinel.
    """
    for hub in hubs:
        if not hub.rknn:
            raise ValueError(f"hub {hub.index} has no reverse neighbors")
        h = hub.index
        logliks = np.array([decoder_loglik(h, r) for r in hub.rknn]) / input_dim
        diffs_mu = means[hub.rknn] - means[h]
        diffs_sd = stds[hub.rknn] - stds[h]
        w = np.sqrt((diffs_mu ** 2).sum(1) + (diffs_sd ** 2).sum(1))
        total = float(w.sum())
        if total == 0.0:
            hub.good_score = GOOD_SCORE_SENTINEL
        else:
            hub.good_score = float(logsumexp(logliks)) - math.log(total)
    return list(hubs)


def filter_good_hubs(records: Sequence[HubRecord], epoch: int = 0) -> HubPool:
    """Retain hubs whose good-score z-score exceeds half the maximum z-score.

    Sentinel (+inf) scores are always retained and excluded from the z-score
    statistics. A single candidate, or candidates with identical finite
    scores, are all retained.
    """
    if not records:
        return HubPool(epoch=epoch, hubs=[])
    scores = np.array([r.good_score for r in records], dtype=np.float64)
    sentinel = np.isposinf(scores)
    finite = ~sentinel & np.isfinite(scores)
    keep = sentinel.copy()
    if finite.sum() > 0:
        vals = scores[finite]
        sd = vals.std()
        if finite.sum() == 1 or sd == 0.0:
            keep |= finite
        else:
            z = np.zeros_like(scores)
            z[finite] = (vals - vals.mean()) / sd
            keep |= finite & (z > z[finite].max() / 2.0)

    best: dict[int, float] = {}
    for r, k, s in zip(records, keep, scores):
        if k and (r.index not in best or s > best[r.index]):
            best[r.index] = s
    # pool order: by score descending, ties by index
    hubs = sorted(best, key=lambda i: (-best[i], i))
    return HubPool(epoch=epoch, hubs=hubs)


def adaptive_neighbors(graph: KnnGraph) -> list[list[int]]:
    """Drop neighbors farther than mean + 2 std of the k-th-neighbor distances."""
    kth = graph.distances[:, -1]
    threshold = kth.mean() + 2.0 * kth.std()
    return [
        [int(j) for j, d in zip(nbrs, dist) if d <= threshold]
        for nbrs, dist in zip(graph.neighbors, graph.distances)
    ]


def bad_hubness(hub: HubRecord, labels) -> float:
    """Fraction of a hub's reverse neighbors whose label differs from the hub's."""
    if not hub.rknn:
        return 0.0
    labels = np.asarray(labels)
    return float(np.mean(labels[hub.rknn] != labels[hub.index]))
