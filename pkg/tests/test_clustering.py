import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import v_measure_score

from oracles import ref_purity, ref_v

from hubvae.clustering import (
    homogeneity_completeness_v, hub_seeded_labeling, kmeans, knn_purity, v_measure,
)


def blobs(centers, per=20, radius=0.4, seed=0):
    rng = np.random.default_rng(seed)
    centers = np.asarray(centers, dtype=float)
    pts = np.vstack([c + rng.uniform(-radius, radius, size=(per, centers.shape[1])) / math.sqrt(2) for c in centers])
    return pts, np.repeat(np.arange(len(centers)), per)


def same_partition(a, b):
    return len(set(zip(a, b))) == len(set(a)) == len(set(b))


def test_kmeans_k1_and_kn():
    pts, _ = blobs([[0, 0], [5, 5]], per=4)
    assert not np.any(kmeans(pts, 1).labels)
    full = kmeans(pts, len(pts))
    assert len(set(full.labels)) == len(pts)
    assert full.inertia == pytest.approx(0.0, abs=1e-12)


def test_kmeans_two_blobs():
    pts, truth = blobs([[0, 0], [10, 10]])
    assert same_partition(kmeans(pts, 2, seed=4).labels, truth)


def test_kmeans_errors():
    with pytest.raises(ValueError):
        kmeans(np.zeros((3, 2)), 4)
    with pytest.raises(ValueError):
        kmeans(np.zeros((3, 2)), 0)


@pytest.mark.parametrize("seed", range(10))
def test_kmeans_inertia_nonincreasing(seed):
    pts = np.random.default_rng(seed).normal(size=(80, 3))
    lab = kmeans(pts, 5, seed=seed)
    assert all(b <= a + 1e-9 for a, b in zip(lab.history, lab.history[1:]))
    assert lab.labels.min() >= 0 and lab.labels.max() < 5


def test_kmeans_deterministic():
    pts = np.random.default_rng(0).normal(size=(50, 2))
    assert np.array_equal(kmeans(pts, 3, seed=9).labels, kmeans(pts, 3, seed=9).labels)


def test_hub_seeded_voronoi():
    centers = np.array([[0.0, 0.0], [6.0, 0.0], [0.0, 6.0]])
    pts, truth = blobs(centers, per=30, radius=2.0)
    vars_ = np.full_like(pts, 0.3)
    lab = hub_seeded_labeling(centers, 0.3, pts, vars_, K=3)
    voronoi = np.argmin(((pts[:, None] - centers[None]) ** 2).sum(-1), axis=1)
    assert same_partition(lab.labels, voronoi)
    assert v_measure(lab, truth) == 1.0


def test_hub_seeded_tie_goes_to_lower_index():
    hubs = np.array([[-1.0], [1.0], [5.0], [9.0]])
    lab = hub_seeded_labeling(hubs, 1.0, np.array([[0.0]]), np.array([[1.0]]), K=4)
    # four hubs, K=4: hub j has its own label; the midpoint of hubs 0/1 takes hub 0's
    hub_labels = hub_seeded_labeling(hubs, 1.0, hubs, np.ones_like(hubs), K=4).labels
    assert lab.labels[0] == hub_labels[0]


def test_hub_seeded_fallback_with_few_hubs():
    pts, truth = blobs([[0, 0], [10, 10], [0, 10]], per=10)
    lab = hub_seeded_labeling(np.zeros((5, 2)), 1.0, pts, np.ones_like(pts), K=3)
    assert lab.seeds is None
    assert v_measure(lab, truth) == 1.0


def test_v_measure_examples():
    truth = [0, 0, 1, 1]
    assert v_measure([0, 1, 1, 1], truth) == pytest.approx(0.3437, abs=1e-4)
    # by hand: H(C)=ln2, H(P)=-(.25ln.25+.75ln.75), H(C|P)=.25ln3+.5ln1.5, H(P|C)=.5ln2
    h, c, v = homogeneity_completeness_v([0, 1, 1, 1], truth)
    hp = -(0.25 * math.log(0.25) + 0.75 * math.log(0.75))
    assert h == pytest.approx(1 - (0.25 * math.log(3) + 0.5 * math.log(1.5)) / math.log(2), abs=1e-12)
    assert c == pytest.approx(1 - 0.5 * math.log(2) / hp, abs=1e-12)
    assert v_measure([5, 5, 2, 2], truth) == 1.0
    assert v_measure([0, 0, 0, 0], truth) == 0.0
    with pytest.raises(ValueError):
        v_measure([0, 1], truth)


@pytest.mark.parametrize("seed", range(100))
def test_v_measure_references(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 60))
    pred = rng.integers(0, rng.integers(1, 6), size=n)
    truth = rng.integers(0, rng.integers(1, 6), size=n)
    v = v_measure(pred, truth)
    assert v == pytest.approx(ref_v(list(pred), list(truth)), abs=1e-12)
    assert v == pytest.approx(v_measure_score(truth, pred), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=2, max_size=40), st.data())
def test_v_measure_symmetric_and_permutation_invariant(truth, data):
    pred = data.draw(st.lists(st.integers(0, 4), min_size=len(truth), max_size=len(truth)))
    perm = data.draw(st.permutations(range(5)))
    assert v_measure(pred, truth) == pytest.approx(v_measure(truth, pred), abs=1e-12)
    relabeled = [perm[p] for p in pred]
    assert v_measure(relabeled, truth) == pytest.approx(v_measure(pred, truth), abs=1e-12)


def test_knn_purity_extremes():
    assert knn_purity(np.random.default_rng(0).normal(size=(10, 2)), [3] * 10, 3) == 100.0
    line = np.arange(10, dtype=float)[:, None]
    # interior points tie between two opposite-class neighbors; endpoints have one
    alt = np.arange(10) % 2
    assert knn_purity(line, alt, 1) == 0.0
    pts, truth = blobs([[0, 0], [100, 100]], per=15)
    assert knn_purity(pts, truth, 10) == 100.0
    with pytest.raises(ValueError):
        knn_purity(line, alt, 10)


@pytest.mark.parametrize("seed", range(20))
def test_knn_purity_reference(seed):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 4, size=(30, 2)).astype(float)
    y = rng.integers(0, 3, size=30)
    k = int(rng.integers(1, 10))
    assert knn_purity(x, y, k) == pytest.approx(ref_purity(x, y, k), abs=1e-12)
