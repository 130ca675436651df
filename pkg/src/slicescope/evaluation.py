"""Scoring discovered slices: performance, coherence and ranking metrics.

Fractions stay fractions everywhere in this module (0.15, not 15); only the
CLI table formats them as percentages.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .coherence import CoherenceReport, as_mask, coherence_report
from .dataset_io import DatasetBundle
from .knn_graph import KnnGraph

DEFAULT_PRECISION_KS = (10, 25)


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    alpha_test: float = 0.05
    precision_ks: tuple[int, ...] = DEFAULT_PRECISION_KS
    epsilon: float = 0.15  # use 0.10 for detection-style AP performance


@dataclass(frozen=True)
class SliceReport:
    slice_size: int
    mean_loss: float
    coherence: CoherenceReport
    accuracy: float | None = None
    overall_accuracy: float | None = None
    performance_gap: float | None = None
    epsilon_satisfied: bool | None = None
    precision_at: dict[int, float] = field(default_factory=dict)
    average_precision: float | None = None

    def to_dict(self) -> dict:
        return {
            "slice_size": self.slice_size,
            "mean_loss": self.mean_loss,
            "accuracy": self.accuracy,
            "overall_accuracy": self.overall_accuracy,
            "performance_gap": self.performance_gap,
            "epsilon_satisfied": self.epsilon_satisfied,
            "coherence": self.coherence.to_dict(),
            "precision_at": {str(k): v for k, v in self.precision_at.items()},
            "average_precision": self.average_precision,
        }


def ranking(probabilities) -> np.ndarray:
    """Indices by descending probability, ties by ascending index."""
    p = np.asarray(probabilities, dtype=np.float64).reshape(-1)
    return np.argsort(-p, kind="stable")


def precision_at_k(probabilities, truth, k: int) -> float:
    truth = as_mask(truth)
    n = truth.size
    if np.asarray(probabilities).size != n:
        raise EvaluationError("probabilities and truth differ in length")
    if not 1 <= k <= n:
        raise EvaluationError(f"k={k} outside [1, {n}]")
    top = ranking(probabilities)[:k]
    return int(np.count_nonzero(truth[top])) / k


def average_precision(probabilities, truth) -> float:
    """Mean of precision@r over the ranks r that hold a positive."""
    truth = as_mask(truth)
    if np.asarray(probabilities).size != truth.size:
        raise EvaluationError("probabilities and truth differ in length")
    positives = int(truth.sum())
    if positives == 0:
        raise EvaluationError("average precision needs at least one positive")
    hits = truth[ranking(probabilities)]
    ranks = np.flatnonzero(hits) + 1
    # fsum is correctly rounded, so the result does not depend on summation order
    return math.fsum((np.arange(1, positives + 1) / ranks).tolist()) / positives


def evaluate_slice(
    bundle: DatasetBundle,
    graph: KnnGraph,
    mask,
    config: EvalConfig | None = None,
    scores=None,
) -> SliceReport:
    """Report for one slice of ``bundle``.

    Precision metrics need ground-truth ``slice_label``s and a ranking; the
    ranking comes from ``scores`` (e.g. slicer probabilities) or, if absent,
    puts slice members first in index order.
    """
    config = config or EvalConfig()
    if graph.n != bundle.n:
        raise EvaluationError(f"graph has {graph.n} nodes, bundle has {bundle.n} rows")
    m = as_mask(mask)
    if m.size != bundle.n:
        raise EvaluationError(f"mask has length {m.size}, bundle has {bundle.n} rows")
    size = int(m.sum())
    if size == 0:
        raise EvaluationError("empty slice")

    accuracy = overall = gap = satisfied = None
    if bundle.correct is not None:
        accuracy = float(bundle.correct[m].mean())
        overall = float(bundle.correct.mean())
        gap = overall - accuracy
        satisfied = gap >= config.epsilon - 1e-12

    precision: dict[int, float] = {}
    ap = None
    if bundle.slice_label is not None and bundle.slice_label.any():
        rank_scores = m.astype(np.float64) if scores is None else np.asarray(scores, dtype=np.float64)
        if rank_scores.shape != (bundle.n,):
            raise EvaluationError("scores must have one entry per row")
        for k in config.precision_ks:
            if k <= bundle.n:
                precision[int(k)] = precision_at_k(rank_scores, bundle.slice_label, int(k))
        ap = average_precision(rank_scores, bundle.slice_label)

    return SliceReport(
        slice_size=size,
        mean_loss=float(bundle.losses[m].mean()),
        coherence=coherence_report(graph, bundle.embeddings, m),
        accuracy=accuracy,
        overall_accuracy=overall,
        performance_gap=gap,
        epsilon_satisfied=satisfied,
        precision_at=precision,
        average_precision=ap,
    )


# ---------------------------------------------------------------- 2-D projection


@dataclass(frozen=True, eq=False)
class Projection:
    coords: np.ndarray  # n x 2
    components: np.ndarray  # 2 x d, rows are unit principal directions
    variances: np.ndarray  # variance captured by each component
    degenerate: bool  # second component undefined (collinear data)


def _power_iteration(cov: np.ndarray, tol: float, max_iter: int) -> tuple[np.ndarray, float]:
    norms = np.linalg.norm(cov, axis=0)
    j = int(np.argmax(norms))
    if norms[j] == 0:
        return np.zeros(cov.shape[0]), 0.0
    v = cov[:, j] / norms[j]
    for _ in range(max_iter):
        w = cov @ v
        nw = np.linalg.norm(w)
        if nw == 0:
            return v, 0.0
        w /= nw
        if w @ v < 0:
            w = -w
        done = np.linalg.norm(w - v) < tol
        v = w
        if done:
            break
    return v, float(v @ cov @ v)


def project_2d(embeddings: np.ndarray, tol: float = 1e-9, max_iter: int = 1000) -> Projection:
    """Top-2 PCA by power iteration with deflation.

    Each component's sign makes its largest-magnitude loading positive.
    Collinear data leaves the second column zero and sets ``degenerate``.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise EvaluationError(f"need n >= 2 and d >= 2, got shape {x.shape}")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / x.shape[0]
    comps, variances = [], []
    scale = max(float(np.trace(cov)), np.finfo(float).tiny)
    degenerate = False
    for c in range(2):
        v, lam = _power_iteration(cov, tol, max_iter)
        if lam <= 1e-12 * scale:
            degenerate = degenerate or c == 1
            v, lam = np.zeros(x.shape[1]), 0.0
        else:
            if v[int(np.argmax(np.abs(v)))] < 0:
                v = -v
            cov = cov - lam * np.outer(v, v)
        comps.append(v)
        variances.append(lam)
    components = np.vstack(comps)
    return Projection(coords=xc @ components.T, components=components, variances=np.array(variances), degenerate=degenerate)


# ---------------------------------------------------------------- exports


def write_projection_csv(path: str | Path, bundle: DatasetBundle, mask, projection: Projection) -> None:
    m = as_mask(mask, bundle.n)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "pc1", "pc2", "in_slice", "loss", "correct"])
        for i, sid in enumerate(bundle.sample_ids):
            correct = "" if bundle.correct is None else int(bundle.correct[i])
            w.writerow(
                [sid, repr(float(projection.coords[i, 0])), repr(float(projection.coords[i, 1])),
                 int(m[i]), repr(float(bundle.losses[i])), correct]
            )


def write_slice_csv(path: str | Path, masks: Sequence[np.ndarray], ids: Sequence[str]) -> None:
    """One row per slice member: ``slice`` (1-based), ``index``, ``id``."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slice", "index", "id"])
        for s, m in enumerate(masks, start=1):
            for i in np.flatnonzero(m):
                w.writerow([s, int(i), ids[i]])


def read_slice_csv(path: str | Path, n: int, slice_number: int = 1) -> np.ndarray:
    """Mask for one slice from a file written by :func:`write_slice_csv` (a
    bare ``index`` column is accepted too)."""
    mask = np.zeros(n, dtype=bool)
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "index" not in reader.fieldnames:
            raise EvaluationError(f"{path}: missing column 'index'")
        for r, row in enumerate(reader):
            if "slice" in row and row["slice"] not in (None, "") and int(row["slice"]) != slice_number:
                continue
            try:
                i = int(row["index"])
            except ValueError:
                raise EvaluationError(f"{path}: non-integer index at row {r}") from None
            if not 0 <= i < n:
                raise EvaluationError(f"{path}: index {i} out of range at row {r}")
            mask[i] = True
    return mask


def _pct(x: float | None) -> str:
    return "-" if x is None else f"{100 * x:.1f}%"


def format_report(report: SliceReport) -> str:
    rows = [
        ("slice size", str(report.slice_size)),
        ("mean loss", f"{report.mean_loss:.4f}"),
        ("accuracy", _pct(report.accuracy)),
        ("overall accuracy", _pct(report.overall_accuracy)),
        ("performance gap", "-" if report.performance_gap is None else f"{100 * report.performance_gap:.1f} pts"),
        ("epsilon satisfied", "-" if report.epsilon_satisfied is None else str(report.epsilon_satisfied)),
        ("manifold comp.", f"{report.coherence.compactness:.3f}"),
        ("variance", "-" if report.coherence.variance is None else f"{report.coherence.variance:.4f}"),
    ]
    rows += [(f"precision@{k}", _pct(v)) for k, v in report.precision_at.items()]
    if report.average_precision is not None:
        rows.append(("average precision", _pct(report.average_precision)))
    width = max(len(r[0]) for r in rows)
    return "\n".join(f"{name:<{width}}  {value}" for name, value in rows)
