import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from slicescope.coherence import (
    EmptySliceError,
    coherence_report,
    euclidean_dispersion,
    manifold_compactness,
    rescale_compactness,
    subsampled_compactness,
)
from slicescope.knn_graph import GraphBuildConfig, KnnGraph, build_knn_graph


def reference_compactness(neighbors, mask):
    members = [i for i in range(len(mask)) if mask[i]]
    total = 0
    for i in members:
        for j in members:
            if i != j and j in set(neighbors[i].tolist()):
                total += 1
    return total / len(members)


def random_graph(rng, n, k):
    return KnnGraph(np.array([rng.choice(np.delete(np.arange(n), i), size=k, replace=False) for i in range(n)]))


def test_toy_values(toy_graph):
    assert manifold_compactness(toy_graph, [1, 1, 0, 0]) == 1.0
    assert manifold_compactness(toy_graph, [1, 0, 1, 0]) == 0.0
    assert manifold_compactness(toy_graph, [1, 1, 1, 1]) == 1.0  # closed slice reaches k
    with pytest.raises(EmptySliceError):
        manifold_compactness(toy_graph, [0, 0, 0, 0])


@given(st.integers(2, 30), st.integers(0, 10_000))
def test_matches_reference_and_bounds(n, seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, n))
    g = random_graph(rng, n, k)
    mask = rng.random(n) < 0.5
    mask[rng.integers(n)] = True
    mc = manifold_compactness(g, mask)
    assert mc == reference_compactness(g.neighbors, mask)
    assert 0 <= mc <= k
    closed = all(mask[j] for i in np.flatnonzero(mask) for j in g.neighbors[i])
    assert (mc == k) == closed


@given(st.integers(0, 10_000))
def test_adding_isolated_node_lowers_compactness(seed):
    rng = np.random.default_rng(seed)
    n = 20
    g = random_graph(rng, n, 3)
    mask = np.zeros(n, dtype=bool)
    mask[: int(rng.integers(2, 10))] = True
    outsiders = [
        j for j in range(n)
        if not mask[j] and not np.any(mask[g.neighbors[j]]) and not np.any(g.neighbors[mask] == j)
    ]
    if not outsiders or manifold_compactness(g, mask) == 0:
        return
    bigger = mask.copy()
    bigger[outsiders[0]] = True
    assert manifold_compactness(g, bigger) < manifold_compactness(g, mask)


def test_subsampled():
    rng = np.random.default_rng(0)
    emb = rng.normal(size=(400, 3))
    g = build_knn_graph(emb, GraphBuildConfig(k=10))
    mask = np.zeros(400, dtype=bool)
    mask[:150] = True
    assert subsampled_compactness(g, mask) == manifold_compactness(g, mask)
    mask[:300] = True
    v = subsampled_compactness(g, mask, seed=3)
    assert v == subsampled_compactness(g, mask, seed=3)
    assert 0 <= v <= 10
    with pytest.raises(EmptySliceError):
        subsampled_compactness(g, np.arange(400) < 100)


def test_dispersion_examples():
    assert euclidean_dispersion(np.ones((4, 3)), [1, 1, 1, 1]) == (0.0, 0.0, 0.0, 0.0)
    assert euclidean_dispersion(np.array([[0.0], [2.0]]), [1, 1]) == (1.0, 0.0, 0.0, 0.0)
    with pytest.raises(EmptySliceError):
        euclidean_dispersion(np.zeros((3, 2)), [1, 0, 0])


@given(st.integers(0, 10_000))
def test_dispersion_homogeneity_and_translation(seed):
    rng = np.random.default_rng(seed)
    emb = rng.integers(-8, 8, size=(12, 3)).astype(float)
    mask = np.ones(12, dtype=bool)
    var, mad, medad, iqr = euclidean_dispersion(emb, mask)
    v2, m2, md2, i2 = euclidean_dispersion(2 * emb, mask)
    assert v2 == pytest.approx(4 * var, rel=1e-12, abs=1e-12)
    assert (m2, md2, i2) == pytest.approx((2 * mad, 2 * medad, 2 * iqr), rel=1e-12, abs=1e-12)
    shifted = euclidean_dispersion(emb + 64.0, mask)
    assert shifted == pytest.approx((var, mad, medad, iqr), rel=1e-9, abs=1e-9)


def test_rescale():
    assert rescale_compactness(4.0, 5) == 8.0
    assert rescale_compactness(3.3, 10) == 3.3
    assert rescale_compactness(0.0, 7) == 0.0
    with pytest.raises(ValueError):
        rescale_compactness(1.0, 0)


def test_report(toy_graph, toy_bundle):
    r = coherence_report(toy_graph, toy_bundle.embeddings, [1, 1, 0, 0])
    assert r.compactness == 1.0 and r.compactness_rescaled_k10 == 10.0
    assert r.variance == pytest.approx(0.0025)
    single = coherence_report(toy_graph, toy_bundle.embeddings, [1, 0, 0, 0])
    assert single.variance is None and single.to_dict()["compactness"] == 0.0
