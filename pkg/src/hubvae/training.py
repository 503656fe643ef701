"""Epoch orchestration: hub pool construction, mini-batch steps, validation and
early stopping."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import hubness
from .clustering import hub_seeded_labeling
from .distributions import pairwise_wasserstein
from .hubness import HubPool, HubRecord
from .model import LossSpec, Triplet, decode, encode, encode_means, forward_backward, validation_loss
from .numerics import AdamState, Architecture, adam_step, copy_params, init_params

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig", "Triplet", "TrainLog", "EpochRecord", "FitResult", "EarlyStopping",
    "beta_schedule", "make_batches", "build_epoch_pool", "select_triplets",
    "train_epoch", "fit",
]


@dataclass
class TrainConfig:
    batch_size: int = 100
    m: int = 1000
    latent_dim: int = 40
    hidden: tuple[int, ...] = (300, 300)
    lam: float = 0.5
    beta_mode: str = "constant"
    beta_min: float = 0.1
    max_epochs: int = 100
    lookahead: int = 50
    K: Optional[int] = None
    seed: int = 0
    lr: float = 1e-3
    tau_init: float = 0.0
    learn_tau: bool = True
    no_selection: bool = False
    no_contrastive: bool = False
    baseline_gaussian: bool = False
    dynamic_binarization: bool = False

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.batch_size < 4:
            raise ValueError("batch_size must be at least 4")
        if self.m < 1 or self.latent_dim < 1:
            raise ValueError("m and latent_dim must be positive")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be positive")
        if not 1 <= self.lookahead <= self.max_epochs:
            raise ValueError("lookahead must lie in [1, max_epochs]")
        if self.beta_mode not in ("constant", "linear"):
            raise ValueError(f"unknown beta_mode {self.beta_mode!r}")
        if self.uses_contrastive and (self.K is None or self.K < 1):
            raise ValueError("K (number of clusters) is required when the contrastive loss is on")

    @property
    def uses_contrastive(self) -> bool:
        return not (self.no_contrastive or self.baseline_gaussian)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)


def beta_schedule(epoch: int, config: TrainConfig) -> float:
    if config.beta_mode == "constant":
        return 1.0
    return max(config.beta_min, 1.0 - epoch / config.max_epochs)


def _rng(config: TrainConfig, epoch: int, stream: int) -> np.random.Generator:
    # one independent stream per (epoch, purpose); see the STREAM_* constants
    return np.random.default_rng([config.seed, epoch, stream])


STREAM_SHUFFLE, STREAM_POOL, STREAM_STEP, STREAM_VAL, STREAM_BINARIZE = range(5)
STREAM_INIT = 99


def make_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled mini-batches; the remainder is spread over the batches so no
    batch is smaller than ``batch_size`` (unless n itself is)."""
    perm = rng.permutation(n)
    n_batches = max(1, n // batch_size)
    return np.array_split(perm, n_batches)


# ---------------------------------------------------------------------------
# hub pool
# ---------------------------------------------------------------------------

@dataclass
class HubCandidate:
    index: int  # dataset row
    hubness: int
    hubness_z: float  # N_k standardized within its mini-batch
    good_score: float
    rknn: list[int]  # dataset rows


@dataclass
class PoolBuild:
    pool: HubPool
    candidates: list[HubCandidate]


def _batch_hubs(params, xb: np.ndarray, rows: np.ndarray, lam: float, rng: np.random.Generator):
    enc = encode(params, xb, rng=rng)
    std = enc.std
    dists = pairwise_wasserstein(enc.mean, std)
    k = hubness.hub_k(len(xb))
    if k >= len(xb):
        return []
    graph = hubness.build_knn_graph(dists, k)
    records = hubness.hubness_scores(graph)
    n_k = np.array([r.hubness for r in records], dtype=np.float64)
    sd = n_k.std()
    z_nk = (n_k - n_k.mean()) / sd if sd > 0 else np.zeros_like(n_k)
    hubs = hubness.select_hubs(records, lam)
    if not hubs:
        return []
    probs = decode(params, enc.z)
    log_p = np.log(probs)
    log_1mp = np.log1p(-probs)
    # loglik[h, r] = log p(x_h | z_r)
    loglik = xb @ log_p.T + (1.0 - xb) @ log_1mp.T
    hubness.good_hub_scores(hubs, enc.mean, std, lambda h, r: loglik[h, r], xb.shape[1])
    return [
        HubCandidate(
            index=int(rows[h.index]),
            hubness=h.hubness,
            hubness_z=float(z_nk[h.index]),
            good_score=h.good_score,
            rknn=[int(rows[r]) for r in h.rknn],
        )
        for h in hubs
    ]


def build_epoch_pool(
    params,
    x_train: np.ndarray,
    config: TrainConfig,
    epoch: int,
    batches: Optional[Sequence[np.ndarray]] = None,
) -> PoolBuild:
    """Encode every mini-batch with the current (end of previous epoch) model,
    collect hubs and their good scores, then filter over the whole epoch."""
    rng = _rng(config, epoch, STREAM_POOL)
    if batches is None:
        batches = make_batches(len(x_train), config.batch_size, _rng(config, epoch, STREAM_SHUFFLE))
    candidates: list[HubCandidate] = []
    for rows in batches:
        candidates.extend(_batch_hubs(params, x_train[rows], rows, config.lam, rng))

    raw = sorted({c.index for c in candidates})
    if config.no_selection:
        pool = HubPool(epoch=epoch, hubs=raw, source="unfiltered")
    else:
        records = [HubRecord(index=c.index, hubness=c.hubness, rknn=c.rknn, good_score=c.good_score)
                   for c in candidates]
        pool = hubness.filter_good_hubs(records, epoch=epoch)
        pool.source = "filtered"
    if not pool.hubs and raw:
        pool = HubPool(epoch=epoch, hubs=raw, source="raw")
    if not pool.hubs:
        n = len(x_train)
        size = min(config.m, n)
        pool = HubPool(epoch=epoch, hubs=sorted(int(i) for i in rng.choice(n, size=size, replace=False)),
                       source="random")
        log.info("epoch %d: no hubs found, using %d random exemplars", epoch, size)
    return PoolBuild(pool=pool, candidates=candidates)


# ---------------------------------------------------------------------------
# triplets
# ---------------------------------------------------------------------------

def select_triplets(labels, neighbor_lists: Sequence[Sequence[int]], dists) -> list[Triplet]:
    """Per anchor: the farthest same-label neighbor is the positive, every
    differently-labeled neighbor is a negative. Anchors lacking either get no
    triplet."""
    labels = np.asarray(labels)
    dists = np.asarray(dists)
    triplets = []
    for a, nbrs in enumerate(neighbor_lists):
        same = [j for j in nbrs if labels[j] == labels[a]]
        diff = [j for j in nbrs if labels[j] != labels[a]]
        if not same or not diff:
            continue
        # farthest; among equal distances the smaller index
        positive = min(same, key=lambda j: (-dists[a, j], j))
        triplets.append(Triplet(anchor=a, positive=int(positive), negatives=[int(j) for j in diff]))
    return triplets


def batch_triplets(params, xb, hub_inputs, mean, var, K: int, seed) -> list[Triplet]:
    hub_means = encode_means(params, hub_inputs)
    hub_var = float(np.exp(params["tau"][0, 0]))
    labeling = hub_seeded_labeling(hub_means, hub_var, mean, var, K, seed=seed)
    dists = pairwise_wasserstein(mean, np.sqrt(var))
    k = hubness.hub_k(len(xb))
    if k >= len(xb):
        return []
    graph = hubness.build_knn_graph(dists, k)
    return select_triplets(labeling.labels, hubness.adaptive_neighbors(graph), dists)


# ---------------------------------------------------------------------------
# epochs
# ---------------------------------------------------------------------------

def _loss_spec(config: TrainConfig, beta: float) -> LossSpec:
    if config.baseline_gaussian:
        return LossSpec(contrastive_weight=0.0, beta=beta, kl_mode="gaussian")
    return LossSpec(contrastive_weight=1.0 if config.uses_contrastive else 0.0, beta=beta, kl_mode="mixture")


def sample_hubs(pool: Sequence[int], m: int, rng: np.random.Generator) -> np.ndarray:
    pool = np.asarray(pool)
    replace = len(pool) < m
    return pool[rng.choice(len(pool), size=m, replace=replace)]


def train_epoch(
    params,
    state: AdamState,
    x_train: np.ndarray,
    pool: Optional[HubPool],
    config: TrainConfig,
    epoch: int,
    batches: Optional[Sequence[np.ndarray]] = None,
):
    """One pass over the data. Returns ``(params, stats)``."""
    rng = _rng(config, epoch, STREAM_STEP)
    if batches is None:
        batches = make_batches(len(x_train), config.batch_size, _rng(config, epoch, STREAM_SHUFFLE))
    beta = beta_schedule(epoch, config)
    spec = _loss_spec(config, beta)
    frozen = frozenset() if config.learn_tau else frozenset({"tau"})
    if not config.baseline_gaussian and (pool is None or not pool.hubs):
        raise ValueError("training with the hub prior needs a nonempty pool")

    sums = {"recon": 0.0, "kl": 0.0, "contrastive": 0.0, "total": 0.0}
    n_triplets = 0
    for rows in batches:
        xb = x_train[rows]
        eps = rng.standard_normal((len(xb), config.latent_dim))
        hub_inputs = None
        triplets: list[Triplet] = []
        if not config.baseline_gaussian:
            hub_inputs = x_train[sample_hubs(pool.hubs, config.m, rng)]
            if config.uses_contrastive:
                enc = encode(params, xb, eps=eps)
                triplets = batch_triplets(params, xb, hub_inputs, enc.mean, enc.var, config.K,
                                          seed=int(rng.integers(2**32)))
        breakdown, grads = forward_backward(params, xb, spec, eps=eps, hub_inputs=hub_inputs, triplets=triplets)
        params = adam_step(params, grads, state, frozen=frozen)
        n_triplets += sum(len(t.negatives) for t in triplets)
        for key in sums:
            sums[key] += getattr(breakdown, key)

    stats = {key: value / len(batches) for key, value in sums.items()}
    stats["beta"] = beta
    stats["n_triplets"] = n_triplets
    return params, stats


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

class EarlyStopping:
    """Tracks the minimum validation loss; signals a stop after ``lookahead``
    epochs without strict improvement."""

    def __init__(self, lookahead: int):
        self.lookahead = lookahead
        self.best = math.inf
        self.best_epoch = -1

    def update(self, epoch: int, value: float) -> bool:
        if value < self.best:
            self.best = value
            self.best_epoch = epoch
            return True
        return False

    def should_stop(self, epoch: int) -> bool:
        return epoch - self.best_epoch >= self.lookahead


@dataclass
class EpochRecord:
    epoch: int
    beta: float
    recon: float
    kl: float
    contrastive: float
    total: float
    n_triplets: int
    pool_size: int
    pool_source: str
    val_loss: float
    best_epoch: int


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    @property
    def best_epoch(self) -> int:
        return self.records[-1].best_epoch if self.records else -1

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.records)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())

    @classmethod
    def read(cls, path) -> "TrainLog":
        with open(path, encoding="utf-8") as fh:
            return cls([EpochRecord(**json.loads(line)) for line in fh if line.strip()])


@dataclass
class FitResult:
    params: dict
    pool: Optional[HubPool]
    pool_inputs: Optional[np.ndarray]
    log: TrainLog
    best_epoch: int


def binarize(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return (rng.random(x.shape) < x).astype(np.float64)


def fit(
    x_train: np.ndarray,
    x_val: np.ndarray,
    config: TrainConfig,
    validation_fn: Optional[Callable[[int, dict, Optional[HubPool]], float]] = None,
    on_epoch: Optional[Callable[[int, PoolBuild], None]] = None,
) -> FitResult:
    """Train with per-epoch hub pools and keep the best-validation snapshot.

    ``validation_fn(epoch, params, pool)`` replaces the built-in validation
    loss (used to test the stopping rule). ``on_epoch`` receives each
    epoch's pool build, for diagnostics.
    """
    x_train = np.asarray(x_train, dtype=np.float64)
    x_val = np.asarray(x_val, dtype=np.float64)
    if len(x_train) == 0 or len(x_val) == 0:
        raise ValueError("train and validation splits must be nonempty")
    arch = Architecture(input_dim=x_train.shape[1], latent_dim=config.latent_dim, hidden=config.hidden)
    params = init_params(arch, np.random.default_rng([config.seed, STREAM_INIT]), tau=config.tau_init)
    state = AdamState.for_params(params, lr=config.lr)
    if config.dynamic_binarization:
        x_val = binarize(x_val, np.random.default_rng([config.seed, STREAM_INIT, STREAM_BINARIZE]))

    stopper = EarlyStopping(config.lookahead)
    train_log = TrainLog()
    best = None
    for epoch in range(config.max_epochs):
        x_epoch = x_train
        if config.dynamic_binarization:
            x_epoch = binarize(x_train, _rng(config, epoch, STREAM_BINARIZE))
        batches = make_batches(len(x_epoch), config.batch_size, _rng(config, epoch, STREAM_SHUFFLE))

        pool = None
        build = None
        if not config.baseline_gaussian:
            build = build_epoch_pool(params, x_epoch, config, epoch, batches)
            pool = build.pool
            if on_epoch is not None:
                on_epoch(epoch, build)
        params, stats = train_epoch(params, state, x_epoch, pool, config, epoch, batches)

        beta = stats["beta"]
        pool_inputs = x_epoch[pool.hubs] if pool is not None else None
        if validation_fn is not None:
            val = float(validation_fn(epoch, params, pool))
        else:
            kl_mode = "gaussian" if config.baseline_gaussian else "mixture"
            val = validation_loss(params, x_val, pool_inputs, beta, _rng(config, epoch, STREAM_VAL), kl_mode=kl_mode)
        if stopper.update(epoch, val):
            best = (copy_params(params), pool, None if pool_inputs is None else pool_inputs.copy())
        train_log.records.append(EpochRecord(
            epoch=epoch,
            beta=beta,
            recon=stats["recon"],
            kl=stats["kl"],
            contrastive=stats["contrastive"],
            total=stats["total"],
            n_triplets=stats["n_triplets"],
            pool_size=len(pool) if pool is not None else 0,
            pool_source=pool.source if pool is not None else "none",
            val_loss=val,
            best_epoch=stopper.best_epoch,
        ))
        log.info("epoch %d: train %.4f val %.4f pool %d", epoch, stats["total"], val,
                 len(pool) if pool is not None else 0)
        if stopper.should_stop(epoch):
            break

    if best is None:  # every validation value was nan/inf
        best = (copy_params(params), pool, pool_inputs)
    return FitResult(params=best[0], pool=best[1], pool_inputs=best[2], log=train_log,
                     best_epoch=stopper.best_epoch)
