"""Slice coherence: manifold compactness and Euclidean dispersion baselines.

Slices are boolean membership arrays of length ``n`` (``True`` = in slice).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .knn_graph import DEFAULT_K, KnnGraph, induced_pair_weight_sum


class EmptySliceError(ValueError):
    pass


def as_mask(mask, n: int | None = None) -> np.ndarray:
    m = np.asarray(mask)
    if m.dtype != bool:
        if m.size and not np.all(np.isin(m, (0, 1))):
            raise ValueError("mask must be boolean or 0/1")
        m = m.astype(bool)
    m = m.reshape(-1)
    if n is not None and m.shape[0] != n:
        raise ValueError(f"mask has length {m.shape[0]}, expected {n}")
    return m


def mask_from_indices(indices, n: int) -> np.ndarray:
    m = np.zeros(n, dtype=bool)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError("slice index out of range")
    m[idx] = True
    return m


@dataclass(frozen=True)
class CoherenceReport:
    compactness: float
    compactness_rescaled_k10: float
    variance: float | None
    mean_abs_dev: float | None
    median_abs_dev: float | None
    iqr: float | None

    def to_dict(self) -> dict:
        return asdict(self)


def manifold_compactness(graph: KnnGraph, mask) -> float:
    """Average degree of the slice's induced subgraph: internal edges / |slice|."""
    m = as_mask(mask, graph.n)
    size = int(m.sum())
    if size == 0:
        raise EmptySliceError("compactness of an empty slice is undefined")
    return induced_pair_weight_sum(graph, m) / size


def subsampled_compactness(
    graph: KnnGraph, mask, subset_size: int = 150, repeats: int = 20, seed: int = 0
) -> float:
    """Mean compactness over ``repeats`` random equal-size subsets of the slice.

    Makes slices of different sizes comparable. Subsets are drawn with a
    Philox (counter-based) generator so a seed gives the same value on any
    platform.
    """
    m = as_mask(mask, graph.n)
    members = np.flatnonzero(m)
    if subset_size < 1 or repeats < 1:
        raise ValueError("subset_size and repeats must be positive")
    if members.size < subset_size:
        raise EmptySliceError(f"slice of size {members.size} is smaller than subset_size={subset_size}")
    rng = np.random.Generator(np.random.Philox(seed))
    edges = 0
    for _ in range(repeats):
        pick = rng.choice(members, size=subset_size, replace=False)
        sub = np.zeros(graph.n, dtype=bool)
        sub[pick] = True
        edges += induced_pair_weight_sum(graph, sub)
    # one rounding on the exact integer total
    return edges / (subset_size * repeats)


def euclidean_dispersion(embeddings: np.ndarray, mask) -> tuple[float, float, float, float]:
    """(variance, MeanAD, MedianAD, IQR) of member distances to the slice centroid.

    ``variance`` is the mean squared distance divided by the dimension.
    Quantiles use linear interpolation.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    m = as_mask(mask, emb.shape[0])
    if m.sum() < 2:
        raise EmptySliceError("dispersion needs at least 2 slice members")
    pts = emb[m]
    dist = np.sqrt(((pts - pts.mean(axis=0)) ** 2).sum(axis=1))
    variance = float(np.mean(dist**2) / emb.shape[1])
    mean_ad = float(np.mean(np.abs(dist - dist.mean())))
    median_ad = float(np.median(np.abs(dist - np.median(dist))))
    q25, q75 = np.percentile(dist, [25, 75], method="linear")
    return variance, mean_ad, median_ad, float(q75 - q25)


def rescale_compactness(value: float, k: int, reference_k: int = DEFAULT_K) -> float:
    """Express a compactness measured with ``k`` neighbours on the ``reference_k`` scale."""
    if k < 1:
        raise ValueError("k must be positive")
    return value * reference_k / k


def coherence_report(graph: KnnGraph, embeddings: np.ndarray, mask) -> CoherenceReport:
    m = as_mask(mask, graph.n)
    mc = manifold_compactness(graph, m)
    if m.sum() >= 2:
        var, mean_ad, median_ad, iqr = euclidean_dispersion(embeddings, m)
    else:
        var = mean_ad = median_ad = iqr = None
    return CoherenceReport(
        compactness=mc,
        compactness_rescaled_k10=rescale_compactness(mc, graph.k),
        variance=var,
        mean_abs_dev=mean_ad,
        median_abs_dev=median_ad,
        iqr=iqr,
    )
