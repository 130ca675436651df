"""Synthetic settings with planted error slices, benchmark runs and lambda tuning.

Embeddings are an isotropic Gaussian mixture whose centres sit on a randomly
rotated set of orthogonal axes, so every pair of centres is ``separation``
apart. Per-sample correctness is drawn per cluster and losses follow two
absolute-valued Gaussian profiles: correct ``|N(0.1, 0.05)|``, incorrect
``|N(1.0, 0.2)|``. Arrays are rounded to float32 so settings survive SLB1
files bit-exactly.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from ._threads import ordered_map
from .coherence import euclidean_dispersion, manifold_compactness, subsampled_compactness
from .dataset_io import DatasetBundle, split
from .evaluation import EvalConfig, evaluate_slice
from .knn_graph import GraphBuildConfig, KnnGraph, build_knn_graph
from .slicer import TrainConfig, predict_proba, select_test_slice, train_slicer
from .solver import QpProblem, SolverConfig, extract_slice, solve

KINDS = ("correlation", "rare", "noisy")
DEFAULT_LAMBDA_GRID = (0.5, 0.8, 1.0, 1.5, 2.0, 2.5, 3.0)
METRIC_COLUMNS = ("Precision@10", "Precision@25", "Average Precision", "Manifold Comp.")
MAX_ATTEMPTS = 5

CORRECT_LOSS = (0.1, 0.05)
INCORRECT_LOSS = (1.0, 0.2)


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorParams:
    """Generator knobs. ``planted_fraction=None`` means the kind's default:
    an equal share (``1/clusters``) for correlation and noisy, 3% for rare.
    ``planted_p_bad`` overrides ``p_bad`` per planted cluster and fixes how
    many clusters are planted."""

    n_val: int = 2000
    n_test: int = 2000
    d: int = 16
    clusters: int = 8
    separation: float = 8.0
    cluster_std: float = 1.0
    planted_fraction: float | None = None
    p_bad: float = 0.3
    p_good: float = 0.95
    noise_fraction: float = 0.25
    planted_p_bad: tuple[float, ...] | None = None

    def planted_count(self) -> int:
        return 1 if self.planted_p_bad is None else len(self.planted_p_bad)

    def fraction_for(self, kind: str) -> float:
        if self.planted_fraction is not None:
            return self.planted_fraction
        return 0.03 if kind == "rare" else 1.0 / self.clusters

    def validate(self, kind: str) -> None:
        if kind not in KINDS:
            raise SynthError(f"unknown kind {kind!r}; expected one of {KINDS}")
        if self.clusters < 2:
            raise SynthError("need at least 2 clusters")
        if self.clusters > self.d:
            raise SynthError(f"{self.clusters} clusters need d >= {self.clusters}")
        if self.planted_count() >= self.clusters:
            raise SynthError("at least one cluster must stay unplanted")
        frac = self.fraction_for(kind)
        if not 0 < frac < 0.5:
            raise SynthError(f"planted cluster fraction must be in (0, 0.5), got {frac}")
        if frac * self.planted_count() >= 1:
            raise SynthError("planted clusters leave no room for the rest")
        for p in (self.p_bad, self.p_good, self.noise_fraction, *(self.planted_p_bad or ())):
            if not 0 <= p <= 1:
                raise SynthError(f"probability {p} outside [0, 1]")
        if min(self.n_val, self.n_test) < 2 * self.clusters or self.separation <= 0 or self.cluster_std <= 0:
            raise SynthError("degenerate generator parameters")


@dataclass(frozen=True, eq=False)
class SyntheticSetting:
    kind: str
    seed: int
    params: GeneratorParams
    validation: DatasetBundle
    test: DatasetBundle
    cluster_val: np.ndarray
    cluster_test: np.ndarray
    planted_clusters: tuple[int, ...]
    attempts: int = 1

    @property
    def planted_mask_val(self) -> np.ndarray:
        return np.isin(self.cluster_val, self.planted_clusters)

    @property
    def planted_mask_test(self) -> np.ndarray:
        return np.isin(self.cluster_test, self.planted_clusters)

    def describe(self) -> dict:
        return {"kind": self.kind, "seed": self.seed, "attempts": self.attempts, "params": asdict(self.params)}


def _f32(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


def _centers(rng: np.random.Generator, clusters: int, d: int, separation: float) -> np.ndarray:
    rot, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return (separation / math.sqrt(2.0)) * rot[:clusters]


def _cluster_sizes(n: int, fractions: Sequence[float], clusters: int) -> np.ndarray:
    planted = [int(round(f * n)) for f in fractions]
    rest = n - sum(planted)
    others = clusters - len(planted)
    base = [rest // others + (1 if i < rest % others else 0) for i in range(others)]
    return np.array(planted + base)


def _losses(rng: np.random.Generator, correct: np.ndarray) -> np.ndarray:
    good = np.abs(rng.normal(*CORRECT_LOSS, size=correct.size))
    bad = np.abs(rng.normal(*INCORRECT_LOSS, size=correct.size))
    return np.where(correct, good, bad)


def _draw_split(rng, kind: str, params: GeneratorParams, centers: np.ndarray, n: int):
    planted = params.planted_count()
    frac = params.fraction_for(kind)
    sizes = _cluster_sizes(n, [frac] * planted, params.clusters)
    cluster = rng.permutation(np.repeat(np.arange(params.clusters), sizes))
    emb = centers[cluster] + params.cluster_std * rng.standard_normal((n, params.d))

    p_correct = np.full(params.clusters, params.p_good)
    if kind in ("correlation", "rare"):
        p_correct[:planted] = params.planted_p_bad if params.planted_p_bad is not None else params.p_bad
    correct = rng.random(n) < p_correct[cluster]
    losses = _losses(rng, correct)
    if kind == "noisy":
        # label noise on the planted subclass: the affected samples become
        # mispredicted with losses from the high-loss profile
        flip = (cluster < planted) & (rng.random(n) < params.noise_fraction)
        correct = correct & ~flip
        losses = np.where(flip, np.abs(rng.normal(*INCORRECT_LOSS, size=n)), losses)
    planted_mask = cluster < planted
    bundle = DatasetBundle(embeddings=_f32(emb), losses=_f32(losses), correct=correct, slice_label=planted_mask)
    return bundle, cluster


def generate_setting(kind: str, params: GeneratorParams | None = None, seed: int = 0) -> SyntheticSetting:
    """Validation and test splits drawn i.i.d. from one planted-slice process.

    If a planted slice's mean loss does not exceed the population mean on
    either split, the draw is repeated with the next seed (up to 5 tries).
    Planted clusters are clusters ``0 .. planted_count - 1``.
    """
    params = params or GeneratorParams()
    params.validate(kind)
    for attempt in range(MAX_ATTEMPTS):
        ss = np.random.SeedSequence([seed + attempt, KINDS.index(kind)])
        c_rng, v_rng, t_rng = (np.random.default_rng(s) for s in ss.spawn(3))
        centers = _centers(c_rng, params.clusters, params.d, params.separation)
        val, cval = _draw_split(v_rng, kind, params, centers, params.n_val)
        test, ctest = _draw_split(t_rng, kind, params, centers, params.n_test)
        ok = all(
            b.losses[c == p].mean() > b.losses.mean()
            for b, c in ((val, cval), (test, ctest))
            for p in range(params.planted_count())
        )
        if ok:
            return SyntheticSetting(
                kind=kind,
                seed=seed,
                params=params,
                validation=val,
                test=test,
                cluster_val=cval,
                cluster_test=ctest,
                planted_clusters=tuple(range(params.planted_count())),
                attempts=attempt + 1,
            )
    raise SynthError(f"no genuine error slice after {MAX_ATTEMPTS} attempts (kind={kind}, seed={seed})")


def neighbor_purity(graph: KnnGraph, cluster: np.ndarray, members: np.ndarray) -> np.ndarray:
    """Per member: fraction of its kNN neighbours in its own cluster."""
    idx = np.flatnonzero(members)
    return (cluster[graph.neighbors[idx]] == cluster[idx][:, None]).mean(axis=1)


def generator_gate(setting: SyntheticSetting, k: int = 10, threshold: float = 0.95) -> dict:
    """Neighbour purity of planted samples on the validation split.

    Passes when at least ``threshold`` of the planted samples' neighbour
    slots point into the sample's own cluster. The per-sample minimum is
    reported too; it is dragged down by tail points of the Gaussians.
    """
    graph = build_knn_graph(setting.validation.embeddings, GraphBuildConfig(k=k))
    purity = neighbor_purity(graph, setting.cluster_val, setting.planted_mask_val)
    val = setting.validation
    planted = setting.planted_mask_val
    return {
        "kind": setting.kind,
        "seed": setting.seed,
        "attempts": setting.attempts,
        "planted_size_val": int(planted.sum()),
        "planted_mean_loss": float(val.losses[planted].mean()),
        "population_mean_loss": float(val.losses.mean()),
        "neighbor_purity_min": float(purity.min()),
        "neighbor_purity_mean": float(purity.mean()),
        "passed": bool(purity.mean() >= threshold),
    }


# ---------------------------------------------------------------- nested lattice


LATTICE_CELLS = ("y=1,a=1", "y=1,a=0", "y=0,a=1", "y=0,a=0")
LATTICE_MARGINALS = ("y=1", "y=0", "a=1", "a=0")


@dataclass(frozen=True)
class NestedParams:
    n: int = 2000
    d: int = 16
    coarse_separation: float = 12.0
    fine_separation: float = 6.0
    cluster_std: float = 1.0
    # the (y=1, a=1) cell is stretched along this many axes
    stretched_dims: int = 3
    stretch_std: float = 3.0

    def validate(self) -> None:
        if self.d < 3 + self.stretched_dims:
            raise SynthError(f"d={self.d} too small for {self.stretched_dims} stretched axes")
        if self.n < 8 or min(self.coarse_separation, self.fine_separation, self.cluster_std, self.stretch_std) <= 0:
            raise SynthError("degenerate nested parameters")


@dataclass(frozen=True, eq=False)
class NestedSetting:
    bundle: DatasetBundle
    y: np.ndarray
    a: np.ndarray
    seed: int
    params: NestedParams

    def lattice(self) -> dict[str, np.ndarray]:
        y, a = self.y, self.a
        return {
            "all": np.ones(y.size, dtype=bool),
            "y=1": y, "y=0": ~y, "a=1": a, "a=0": ~a,
            "y=1,a=1": y & a, "y=1,a=0": y & ~a, "y=0,a=1": ~y & a, "y=0,a=0": ~y & ~a,
        }

    @staticmethod
    def edges() -> list[tuple[str, str]]:
        """Coarse-to-fine edges of the lattice (12 in total)."""
        out = [("all", m) for m in LATTICE_MARGINALS]
        for cell in LATTICE_CELLS:
            ys, as_ = cell.split(",")
            out += [(ys, cell), (as_, cell)]
        return out


def generate_nested_setting(params: NestedParams | None = None, seed: int = 0) -> NestedSetting:
    """Two coarse clusters (``y``), each split into two fine sub-clusters (``a``).

    The ``y=1, a=1`` sub-cluster is anisotropic, stretched along a few axes,
    which makes its Euclidean spread exceed that of its coarse parent while it
    stays separated on the kNN graph.
    """
    params = params or NestedParams()
    params.validate()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    d = params.d
    cell = rng.permutation(np.arange(params.n) % 4)
    y = cell < 2
    a = cell % 2 == 0
    center = np.zeros((params.n, d))
    center[:, 0] = np.where(y, 0.5, -0.5) * params.coarse_separation
    fine_axis = np.where(y, 1, 2)
    center[np.arange(params.n), fine_axis] = np.where(a, 0.5, -0.5) * params.fine_separation
    std = np.full((params.n, d), params.cluster_std)
    stretched = y & a
    std[np.ix_(stretched, np.arange(3, 3 + params.stretched_dims))] = params.stretch_std
    emb = center + std * rng.standard_normal((params.n, d))
    rot, _ = np.linalg.qr(rng.standard_normal((d, d)))
    emb = emb @ rot
    losses = np.where(cell == 0, 0.6, 0.2) + np.abs(rng.normal(0.0, 0.05, params.n))
    bundle = DatasetBundle(embeddings=_f32(emb), losses=_f32(losses))
    return NestedSetting(bundle=bundle, y=y, a=a, seed=seed, params=params)


def lattice_metrics(setting: NestedSetting, k: int = 10, subset_size: int = 150, repeats: int = 20) -> dict[str, dict]:
    """Subsampled compactness and variance for every lattice node."""
    graph = build_knn_graph(setting.bundle.embeddings, GraphBuildConfig(k=k))
    out = {}
    for name, mask in setting.lattice().items():
        var = euclidean_dispersion(setting.bundle.embeddings, mask)[0]
        comp = subsampled_compactness(graph, mask, subset_size, repeats, seed=setting.seed)
        out[name] = {"size": int(mask.sum()), "compactness": comp, "variance": var}
    return out


def lattice_edge_checks(metrics: dict[str, dict]) -> list[dict]:
    rows = []
    for coarse, fine in NestedSetting.edges():
        c, f = metrics[coarse], metrics[fine]
        rows.append({
            "coarse": coarse,
            "fine": fine,
            "compactness_increases": f["compactness"] > c["compactness"],
            "variance_decreases": f["variance"] < c["variance"],
        })
    return rows


# ---------------------------------------------------------------- pipeline pieces


@dataclass(frozen=True)
class PipelineConfig:
    k: int = 10
    solver: SolverConfig = field(default_factory=SolverConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(architecture="mlp_1hidden"))
    precision_ks: tuple[int, ...] = (10, 25)
    epsilon: float = 0.15


def discover_and_transfer(
    source: DatasetBundle,
    target: DatasetBundle,
    alpha: float,
    lam: float,
    config: PipelineConfig,
    source_graph: KnnGraph | None = None,
) -> dict:
    """Solve on ``source``, train the slicer on its slice and select the top
    ``alpha`` fraction of ``target`` by predicted probability."""
    graph = source_graph or build_knn_graph(source.embeddings, GraphBuildConfig(k=config.k))
    problem = QpProblem(source.losses, graph, lam=lam, alpha=alpha)
    result = solve(problem, config.solver)
    source_mask = extract_slice(result, problem)
    model = train_slicer(source.embeddings, source_mask, config.train)
    probs = predict_proba(model, target.embeddings)
    return {
        "problem": problem,
        "result": result,
        "source_mask": source_mask,
        "model": model,
        "probabilities": probs,
        "target_mask": select_test_slice(probs, alpha),
    }


@dataclass(frozen=True)
class TuneResult:
    lambda_grid: tuple[float, ...]
    per_lambda: tuple[dict, ...]
    chosen_lambda: float
    threshold: float
    qualified: bool

    def to_dict(self) -> dict:
        return asdict(self)


def tune_lambda(
    validation: DatasetBundle,
    grid: Sequence[float] = DEFAULT_LAMBDA_GRID,
    alpha: float = 0.05,
    epsilon: float = 0.15,
    seed: int = 0,
    config: PipelineConfig | None = None,
) -> TuneResult:
    """Pick lambda on a seeded half split of the validation data.

    For each lambda: discover on one half, train the slicer, select on the
    other half, and measure accuracy gap and compactness there. The winner
    maximises compactness among lambdas whose gap reaches ``epsilon``; if none
    does, the largest gap wins and ``qualified`` is False.
    """
    config = config or PipelineConfig()
    grid = tuple(float(g) for g in grid)
    if not grid:
        raise SynthError("lambda grid is empty")
    if validation.correct is None:
        raise SynthError("tuning needs per-sample correctness")
    fit, held = split(validation, [0.5, 0.5], seed)
    for part in (fit, held):
        if part.n <= config.k or math.floor(alpha * part.n + 1e-9) < 1:
            raise SynthError(f"degenerate half with {part.n} rows")
    fit_graph = build_knn_graph(fit.embeddings, GraphBuildConfig(k=config.k))
    held_graph = build_knn_graph(held.embeddings, GraphBuildConfig(k=config.k))
    overall = float(held.correct.mean())
    per = []
    for lam in grid:
        out = discover_and_transfer(fit, held, alpha, lam, config, fit_graph)
        m = out["target_mask"]
        acc = float(held.correct[m].mean())
        per.append({
            "lambda": lam,
            "accuracy": acc,
            "overall_accuracy": overall,
            "gap": overall - acc,
            "compactness": manifold_compactness(held_graph, m),
        })
    ok = [p for p in per if p["gap"] >= epsilon - 1e-12]
    if ok:
        chosen = max(ok, key=lambda p: p["compactness"])  # first maximum wins ties
    else:
        chosen = max(per, key=lambda p: p["gap"])
    return TuneResult(
        lambda_grid=grid, per_lambda=tuple(per), chosen_lambda=chosen["lambda"], threshold=epsilon, qualified=bool(ok)
    )


# ---------------------------------------------------------------- benchmark


@dataclass(frozen=True)
class BenchmarkResult:
    per_setting: tuple[dict, ...]
    table: tuple[dict, ...]

    def to_dict(self) -> dict:
        return {"table": list(self.table), "per_setting": list(self.per_setting)}


def evaluate_setting(setting: SyntheticSetting, alpha: float, lam: float, config: PipelineConfig) -> list[dict]:
    """Rows for MCSD at ``lam`` and the top-loss baseline (lambda = 0)."""
    gcfg = GraphBuildConfig(k=config.k)
    val_graph = build_knn_graph(setting.validation.embeddings, gcfg)
    test_graph = build_knn_graph(setting.test.embeddings, gcfg)
    eval_cfg = EvalConfig(alpha_test=alpha, precision_ks=config.precision_ks, epsilon=config.epsilon)
    rows = []
    for method, method_lam in (("MCSD", lam), ("Top-loss", 0.0)):
        out = discover_and_transfer(setting.validation, setting.test, alpha, method_lam, config, val_graph)
        report = evaluate_slice(setting.test, test_graph, out["target_mask"], eval_cfg, scores=out["probabilities"])
        rows.append({
            "kind": setting.kind,
            "seed": setting.seed,
            "method": method,
            "lambda": method_lam,
            "Precision@10": report.precision_at.get(10),
            "Precision@25": report.precision_at.get(25),
            "Average Precision": report.average_precision,
            "Manifold Comp.": report.coherence.compactness,
            "accuracy": report.accuracy,
            "performance_gap": report.performance_gap,
            "validation_compactness": manifold_compactness(val_graph, out["source_mask"]),
            "objective": out["result"].objective,
        })
    return rows


def aggregate(rows: Sequence[dict]) -> list[dict]:
    """Mean of each metric per (kind, method), kinds in canonical order."""
    kinds = [k for k in KINDS if any(r["kind"] == k for r in rows)]
    methods = list(dict.fromkeys(r["method"] for r in rows))
    table = []
    for kind in kinds:
        for method in methods:
            sel = [r for r in rows if r["kind"] == kind and r["method"] == method]
            if not sel:
                continue
            entry = {"kind": kind, "method": method, "settings": len(sel)}
            for col in METRIC_COLUMNS:
                vals = [r[col] for r in sel if r[col] is not None]
                entry[col] = math.fsum(vals) / len(vals) if vals else None
            table.append(entry)
    return table


def run_benchmark(
    settings: Sequence[SyntheticSetting], alpha: float = 0.05, lam: float = 1.0, config: PipelineConfig | None = None
) -> BenchmarkResult:
    if not settings:
        raise SynthError("no settings to benchmark")
    config = config or PipelineConfig()
    per = ordered_map(lambda s: evaluate_setting(s, alpha, lam, config), settings)
    rows = [r for rs in per for r in rs]
    return BenchmarkResult(per_setting=tuple(rows), table=tuple(aggregate(rows)))


def quick_settings(seed: int = 0, per_kind: int = 3, n: int = 1000) -> list[SyntheticSetting]:
    params = GeneratorParams(n_val=n, n_test=n)
    return [generate_setting(kind, params, seed + i) for kind in KINDS for i in range(per_kind)]


def with_sizes(params: GeneratorParams, n: int) -> GeneratorParams:
    return replace(params, n_val=n, n_test=n)
