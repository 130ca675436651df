"""Exact directed k-nearest-neighbour graph over sample embeddings.

Node ``i`` has an edge to each of its ``k`` nearest neighbours (Euclidean,
ties broken by ascending index, no self-loops), so ``q_ij = 1`` iff ``j`` is
in ``neighbors[i]``. The graph is never symmetrised.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from ._threads import ordered_map

DEFAULT_K = 10

KNG_MAGIC = b"KNG1"
KNG_VERSION = 1
_KNG_HEADER = struct.Struct("<4sIIIQ")


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class GraphBuildConfig:
    k: int = DEFAULT_K
    distance: str = "euclidean"
    parallel_chunk: int = 256

    def __post_init__(self) -> None:
        if self.k < 1:
            raise GraphError(f"k must be positive, got {self.k}")
        if self.distance != "euclidean":
            raise GraphError(f"unsupported distance {self.distance!r}")
        if self.parallel_chunk < 1:
            raise GraphError("parallel_chunk must be positive")


@dataclass(frozen=True, eq=False)
class KnnGraph:
    """Neighbour lists as an ``n x k`` integer array, nearest first."""

    neighbors: np.ndarray

    def __post_init__(self) -> None:
        nb = np.array(self.neighbors, dtype=np.int64, copy=True)
        if nb.ndim != 2 or nb.shape[1] < 1:
            raise GraphError(f"neighbors must be an n x k array, got shape {nb.shape}")
        n, k = nb.shape
        if k >= n:
            raise GraphError(f"k={k} must be smaller than n={n}")
        if nb.min() < 0 or nb.max() >= n:
            raise GraphError("neighbor index out of range")
        if np.any(nb == np.arange(n)[:, None]):
            raise GraphError("self-loop in neighbor lists")
        srt = np.sort(nb, axis=1)
        if np.any(srt[:, 1:] == srt[:, :-1]):
            raise GraphError("duplicate neighbor in a neighbor list")
        nb.setflags(write=False)
        object.__setattr__(self, "neighbors", nb)

    @property
    def n(self) -> int:
        return self.neighbors.shape[0]

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]

    def adjacency(self) -> sp.csr_matrix:
        """Sparse 0/1 matrix ``Q`` with ``Q[i, j] = q_ij``."""
        n, k = self.neighbors.shape
        rows = np.repeat(np.arange(n), k)
        return sp.csr_matrix(
            (np.ones(n * k, dtype=np.float64), (rows, self.neighbors.reshape(-1))), shape=(n, n)
        )

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Source and target index arrays of all ``n * k`` directed edges."""
        n, k = self.neighbors.shape
        return np.repeat(np.arange(n), k), self.neighbors.reshape(-1)

    def equals(self, other: KnnGraph) -> bool:
        return np.array_equal(self.neighbors, other.neighbors)


def _chunk_neighbors(emb: np.ndarray, start: int, stop: int, k: int) -> np.ndarray:
    block = emb[start:stop]
    # Exact per-pair squared distances; the value for a pair never depends on
    # how rows are chunked.
    diff = block[:, None, :] - emb[None, :, :]
    d2 = (diff * diff).sum(axis=2)
    rows = np.arange(stop - start)
    d2[rows, start + rows] = np.inf
    out = np.empty((stop - start, k), dtype=np.int64)
    kth = np.partition(d2, k - 1, axis=1)[:, k - 1]
    for r in range(stop - start):
        cand = np.flatnonzero(d2[r] <= kth[r])
        order = np.lexsort((cand, d2[r, cand]))
        out[r] = cand[order[:k]]
    return out


def build_knn_graph(embeddings: np.ndarray, config: GraphBuildConfig | None = None) -> KnnGraph:
    """Brute-force exact kNN graph. Thread count comes from ``SLICESCOPE_THREADS``."""
    config = config or GraphBuildConfig()
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2:
        raise GraphError(f"embeddings must be 2-D, got shape {emb.shape}")
    n = emb.shape[0]
    if config.k >= n:
        raise GraphError(f"k={config.k} must be smaller than n={n}")
    if not np.all(np.isfinite(emb)):
        raise GraphError("non-finite embedding value")
    # keep each chunk's n x chunk x d difference tensor around 32 MB
    chunk = max(1, min(config.parallel_chunk, (4 << 20) // max(1, n * emb.shape[1])))
    starts = list(range(0, n, chunk))
    parts = ordered_map(lambda s: _chunk_neighbors(emb, s, min(n, s + chunk), config.k), starts)
    return KnnGraph(np.vstack(parts))


def out_degree(graph: KnnGraph, node: int) -> int:
    if not 0 <= node < graph.n:
        raise IndexError(f"node {node} out of range for n={graph.n}")
    return int(graph.neighbors[node].size)


def _as_member(mask, n: int) -> np.ndarray:
    m = np.asarray(mask)
    if m.dtype != bool:
        m = m.astype(bool)
    if m.shape != (n,):
        raise GraphError(f"mask has shape {m.shape}, expected ({n},)")
    return m


def induced_pair_weight_sum(graph: KnnGraph, mask) -> int:
    """Number of ordered pairs ``(i, j)`` inside the slice with ``q_ij = 1``."""
    m = _as_member(mask, graph.n)
    return int(np.count_nonzero(m[graph.neighbors[m]]))


# ---------------------------------------------------------------- KNG1 cache


def embedding_hash(embeddings: np.ndarray) -> int:
    """64-bit content hash of the float64 embedding payload."""
    emb = np.ascontiguousarray(embeddings, dtype="<f8")
    h = hashlib.blake2b(struct.pack("<QQ", *emb.shape), digest_size=8)
    h.update(emb.tobytes())
    return int.from_bytes(h.digest(), "little")


def encode_graph(graph: KnnGraph, content_hash: int = 0) -> bytes:
    """KNG1: magic, u32 [version, n, k], u64 embedding hash, n*k u32 indices."""
    head = _KNG_HEADER.pack(KNG_MAGIC, KNG_VERSION, graph.n, graph.k, content_hash)
    return head + graph.neighbors.astype("<u4").tobytes()


def decode_graph(data: bytes) -> tuple[KnnGraph, int]:
    if len(data) < 4 or data[:4] != KNG_MAGIC:
        raise GraphError("unrecognized format (bad magic bytes)")
    if len(data) < _KNG_HEADER.size:
        raise GraphError("truncated graph header")
    _, version, n, k, content_hash = _KNG_HEADER.unpack_from(data)
    if version != KNG_VERSION:
        raise GraphError(f"unsupported KNG version {version}")
    expected = _KNG_HEADER.size + 4 * n * k
    if len(data) != expected:
        raise GraphError(f"graph payload length {len(data)} does not match header (expected {expected})")
    nb = np.frombuffer(data, dtype="<u4", offset=_KNG_HEADER.size).reshape(n, k)
    return KnnGraph(nb.astype(np.int64)), content_hash


def save_graph(graph: KnnGraph, path: str | Path, embeddings: np.ndarray | None = None) -> None:
    h = embedding_hash(embeddings) if embeddings is not None else 0
    Path(path).write_bytes(encode_graph(graph, h))


def load_graph(path: str | Path) -> tuple[KnnGraph, int]:
    return decode_graph(Path(path).read_bytes())


def cached_knn_graph(
    embeddings: np.ndarray, config: GraphBuildConfig | None, cache_path: str | Path
) -> KnnGraph:
    """Load the graph from ``cache_path`` if it matches the embeddings and k,
    otherwise build it and rewrite the cache."""
    config = config or GraphBuildConfig()
    cache_path = Path(cache_path)
    h = embedding_hash(embeddings)
    if cache_path.is_file():
        try:
            graph, stored = load_graph(cache_path)
        except GraphError:
            graph, stored = None, None
        if graph is not None and stored == h and graph.k == config.k and graph.n == len(embeddings):
            return graph
    graph = build_knn_graph(embeddings, config)
    cache_path.write_bytes(encode_graph(graph, h))
    return graph
