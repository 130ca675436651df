"""Slice discovery as a box- and budget-constrained quadratic program.

Maximise ``l.w + lam * sum_ij w_i w_j q_ij`` over ``0 <= w <= 1``,
``sum(w) <= alpha * n``, where ``q`` is the directed kNN adjacency. The
quadratic is indefinite, so each run is a local ascent (Frank-Wolfe or
projected gradient) followed by vertex rounding and pairwise swaps, and the
best of several restarts is kept.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterator

import numpy as np
import scipy.sparse as sp

from .dataset_io import DatasetBundle
from .knn_graph import GraphBuildConfig, KnnGraph, build_knn_graph

FEAS_TOL = 1e-9
BRUTE_FORCE_MAX_N = 24


class SolverError(RuntimeError):
    pass


class InfeasibleError(ValueError):
    pass


def default_alpha(n: int) -> float:
    """0.05 below 5000 samples, 0.01 from 5000 on."""
    return 0.05 if n < 5000 else 0.01


def slice_size(budget: float) -> int:
    """Number of samples a budget selects; absorbs ``0.29 * 100 = 28.999...``."""
    return int(math.floor(budget + 1e-9))


@dataclass(frozen=True, eq=False)
class QpProblem:
    losses: np.ndarray
    graph: KnnGraph
    lam: float = 1.0
    alpha: float = 0.05

    def __post_init__(self) -> None:
        losses = np.asarray(self.losses, dtype=np.float64).reshape(-1)
        if losses.shape[0] != self.graph.n:
            raise ValueError(f"{losses.shape[0]} losses for a graph with {self.graph.n} nodes")
        if not np.all(np.isfinite(losses)):
            raise ValueError("losses must be finite")
        if not (math.isfinite(self.lam) and self.lam >= 0):
            raise ValueError(f"lambda must be finite and >= 0, got {self.lam}")
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        object.__setattr__(self, "losses", losses)
        if self.budget < 1 - 1e-9:
            raise InfeasibleError(f"budget alpha*n = {self.budget:g} is below 1")

    @property
    def n(self) -> int:
        return self.graph.n

    @property
    def budget(self) -> float:
        return self.alpha * self.graph.n

    @cached_property
    def q(self) -> sp.csr_matrix:
        return self.graph.adjacency()

    @cached_property
    def q_sym(self) -> sp.csr_matrix:
        return (self.q + self.q.T).tocsr()


@dataclass(frozen=True)
class SolverConfig:
    method: str = "frank_wolfe"
    restarts: int = 8
    max_iters: int = 500
    tol: float = 1e-7
    seed: int = 0
    max_swaps: int = 10_000
    kicks: int = 64

    def __post_init__(self) -> None:
        aliases = {"fw": "frank_wolfe", "pg": "projected_gradient"}
        object.__setattr__(self, "method", aliases.get(self.method, self.method))
        if self.method not in ("frank_wolfe", "projected_gradient"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.restarts < 1 or self.max_iters < 1:
            raise ValueError("restarts and max_iters must be positive")
        if self.kicks < 0:
            raise ValueError("kicks must be >= 0")


@dataclass(frozen=True, eq=False)
class SolverResult:
    weights: np.ndarray
    objective: float
    iterations: int
    converged: bool
    restart_index: int
    phase: int = 0
    history: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0))

    def to_dict(self, problem: QpProblem | None = None) -> dict:
        out = {
            "objective": self.objective,
            "iterations": self.iterations,
            "converged": self.converged,
            "restart_index": self.restart_index,
            "phase": self.phase,
            "weights": [float(x) for x in self.weights],
        }
        if problem is not None:
            out["slice_indices"] = [int(i) for i in np.flatnonzero(extract_slice(self, problem))]
        return out


# ---------------------------------------------------------------- objective


def check_feasible(problem: QpProblem, w: np.ndarray, tol: float = FEAS_TOL) -> None:
    if w.shape != (problem.n,):
        raise InfeasibleError(f"weights have shape {w.shape}, expected ({problem.n},)")
    if w.min(initial=0.0) < -tol or w.max(initial=0.0) > 1 + tol:
        raise InfeasibleError("weights outside [0, 1]")
    if w.sum() > problem.budget + tol:
        raise InfeasibleError(f"weight sum {w.sum():.12g} exceeds budget {problem.budget:.12g}")


def _value(problem: QpProblem, w: np.ndarray) -> float:
    return float(problem.losses @ w + problem.lam * (w @ (problem.q @ w)))


def objective_value(problem: QpProblem, w) -> float:
    w = np.asarray(w, dtype=np.float64)
    check_feasible(problem, w)
    return _value(problem, w)


def objective_gradient(problem: QpProblem, w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    return problem.losses + problem.lam * (problem.q_sym @ w)


def separability_objective(problem: QpProblem, w, lam1: float, lam2: float) -> float:
    """Loss plus in-slice edge mass (``lam1``) minus cut edge mass (``lam2``).

    Differs from :func:`objective_value` at ``lam = lam1 + lam2`` by the
    constant ``lam2 * alpha * n * k`` whenever the budget binds.
    """
    w = np.asarray(w, dtype=np.float64)
    q = problem.q
    inside = w @ (q @ w)
    cut = w @ (q @ (1.0 - w))
    return float(problem.losses @ w + lam1 * inside - lam2 * cut)


def linear_maximization_oracle(gradient, budget: float) -> np.ndarray:
    """Maximise ``gradient . w`` over ``{0 <= w <= 1, sum(w) <= budget}``.

    Sort-and-fill: ones on the top ``floor(budget)`` positive coordinates
    (ties by index), the fractional remainder on the next positive one.
    """
    g = np.asarray(gradient, dtype=np.float64)
    n = g.shape[0]
    if budget > n + 1e-9:
        raise ValueError(f"budget {budget} exceeds n={n}")
    order = np.argsort(-g, kind="stable")
    positive = order[g[order] > 0]
    w = np.zeros(n)
    whole = min(slice_size(budget), positive.size)
    w[positive[:whole]] = 1.0
    frac = budget - slice_size(budget)
    if frac > 1e-12 and whole < positive.size:
        w[positive[whole]] = frac
    return w


def project_feasible(v: np.ndarray, budget: float, tol: float = 1e-10) -> np.ndarray:
    """Euclidean projection onto ``{0 <= w <= 1, sum(w) <= budget}``.

    Clip; if the budget is violated, bisect on the shift ``tau`` in
    ``clip(v - tau, 0, 1)`` until the sum is within ``tol`` below the budget.
    """
    w = np.clip(v, 0.0, 1.0)
    if w.sum() <= budget:
        return w
    lo, hi = 0.0, float(v.max())
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        s = np.clip(v - mid, 0.0, 1.0).sum()
        if s > budget:
            lo = mid
        else:
            hi = mid
            if budget - s <= tol:
                break
    return np.clip(v - hi, 0.0, 1.0)


# ---------------------------------------------------------------- local ascent

Callback = Callable[[int, int, int, np.ndarray, float], None]


def _frank_wolfe(problem, w, f, config, emit) -> tuple[np.ndarray, float, int, bool]:
    lam, budget = problem.lam, problem.budget
    for it in range(1, config.max_iters + 1):
        g = objective_gradient(problem, w)
        d = linear_maximization_oracle(g, budget) - w
        slope = float(g @ d)
        if slope <= 1e-14 * max(1.0, abs(f)):
            return w, f, it - 1, True
        curv = lam * float(d @ (problem.q @ d))
        gamma = min(1.0, -slope / (2.0 * curv)) if curv < 0 else 1.0
        w_new = np.clip(w + gamma * d, 0.0, 1.0)
        f_new = _value(problem, w_new)
        if f_new < f:  # rounding noise only; the exact line search cannot descend
            return w, f, it - 1, True
        gain = f_new - f
        w, f = w_new, f_new
        emit(it, w, f)
        if gain <= config.tol * max(abs(f), 1e-12):
            return w, f, it, True
    return w, f, config.max_iters, False


def _projected_gradient(problem, w, f, config, emit) -> tuple[np.ndarray, float, int, bool]:
    step = 1.0
    budget = problem.budget
    for it in range(1, config.max_iters + 1):
        g = objective_gradient(problem, w)
        while True:
            w_new = project_feasible(w + step * g, budget)
            f_new = _value(problem, w_new)
            if f_new > f:
                break
            step *= 0.5
            if step < 1e-12:
                return w, f, it - 1, True
        gain = f_new - f
        w, f = w_new, f_new
        emit(it, w, f)
        step = min(step * 2.0, 1e6)
        if gain <= config.tol * max(abs(f), 1e-12):
            return w, f, it, True
    return w, f, config.max_iters, False


def _fill_slack(problem: QpProblem, w: np.ndarray) -> np.ndarray:
    """Spend unused budget on the highest-gradient unsaturated coordinates.

    Raising a single coordinate is linear in it (``q_ii = 0``) with slope
    equal to its gradient, which is nonnegative for nonnegative losses, so
    this never lowers the objective and makes the budget bind.
    """
    w = w.copy()
    for _ in range(problem.n + 1):
        slack = problem.budget - w.sum()
        if slack <= 1e-12:
            break
        g = objective_gradient(problem, w)
        g[w >= 1.0] = -np.inf
        i = int(np.argmax(g))
        if not np.isfinite(g[i]) or g[i] < 0:
            break
        w[i] = min(1.0, w[i] + slack)
    return w


def _swap_search(problem: QpProblem, w: np.ndarray, f: float, max_swaps: int, emit) -> tuple[np.ndarray, float]:
    """Best-improvement exchange of one full member for one non-member.

    Swapping ``i`` out and ``j`` in changes the objective by
    ``g_j - g_i - lam * (q_ij + q_ji)``.
    """
    lam = problem.lam
    for s in range(max_swaps):
        inside = np.flatnonzero(w == 1.0)
        outside = np.flatnonzero(w == 0.0)
        if inside.size == 0 or outside.size == 0:
            break
        g = objective_gradient(problem, w)
        if lam:
            # a member's best partner is among the top (degree + 1) outsiders
            rows = problem.q_sym[inside]
            top = min(outside.size, int(np.diff(rows.indptr).max(initial=0)) + 1)
            outside = outside[np.argsort(-g[outside], kind="stable")[:top]]
            gain = g[outside][None, :] - g[inside][:, None] - lam * rows[:, outside].toarray()
        else:
            gain = g[outside][None, :] - g[inside][:, None]
        a, b = np.unravel_index(int(np.argmax(gain)), gain.shape)
        if gain[a, b] <= 1e-12 * max(1.0, abs(f)):
            break
        w_new = w.copy()
        w_new[inside[a]] = 0.0
        w_new[outside[b]] = 1.0
        f_new = _value(problem, w_new)
        if f_new <= f:
            break
        w, f = w_new, f_new
        emit(-1 - s, w, f)
    return w, f


def _round_to_vertex(problem: QpProblem, w: np.ndarray) -> np.ndarray:
    v = extract_slice(w, problem).astype(np.float64)
    return _fill_slack(problem, v)


@dataclass
class _Run:
    weights: np.ndarray
    objective: float
    iterations: int
    converged: bool
    history: list[float]


def _ascend(problem: QpProblem, w: np.ndarray, config: SolverConfig, emit, swaps: bool) -> _Run:
    """One monotone run from ``w``: optional swap search (vertex starts only),
    continuous ascent, then spending leftover budget."""
    history: list[float] = []

    def record(it, w, f):
        if not np.isfinite(f):
            raise SolverError("non-finite objective encountered; check the inputs")
        history.append(f)
        emit(it, w, f)

    f = _value(problem, w)
    record(0, w, f)
    if swaps:
        w, f = _swap_search(problem, w, f, config.max_swaps, record)
    ascent = _frank_wolfe if config.method == "frank_wolfe" else _projected_gradient
    w, f, iters, converged = ascent(problem, w, f, config, record)
    filled = _fill_slack(problem, w)
    f_filled = _value(problem, filled)
    if f_filled > f:
        w, f = filled, f_filled
        record(iters + 1, w, f)
    return _Run(w, f, iters, converged, history)


def _grow(problem: QpProblem, seed_node: int) -> np.ndarray:
    """Vertex built greedily from one node: repeatedly add the outsider with
    the largest marginal gain (its gradient entry)."""
    v = np.zeros(problem.n)
    v[seed_node] = 1.0
    for _ in range(slice_size(problem.budget) - 1):
        g = objective_gradient(problem, v)
        g[v == 1.0] = -np.inf
        v[int(np.argmax(g))] = 1.0
    return v


def _start_points(problem: QpProblem, config: SolverConfig) -> Iterator[np.ndarray]:
    n, budget = problem.n, problem.budget
    greedy = np.zeros(n)
    order = np.lexsort((np.arange(n), -problem.losses))
    greedy[order[: slice_size(budget)]] = 1.0
    yield greedy
    for r, child in enumerate(np.random.SeedSequence(config.seed).spawn(config.restarts - 1), start=1):
        rng = np.random.default_rng(child)
        if r % 2:
            yield _grow(problem, int(rng.integers(n)))
        else:
            u = rng.uniform(0.0, 1.0, n)
            s = u.sum()
            if s > budget:
                u *= budget / s
            yield np.clip(u, 0.0, 1.0)


def _is_vertex(w: np.ndarray) -> bool:
    return bool(np.all((w == 0.0) | (w == 1.0)))


def _kick(problem: QpProblem, w: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Exchange a random number (1 to all) of the slice's full members for
    random outsiders."""
    v = _round_to_vertex(problem, w)
    inside = np.flatnonzero(v == 1.0)
    outside = np.flatnonzero(v == 0.0)
    top = min(inside.size, outside.size)
    if top == 0:
        return v
    size = int(rng.integers(1, top + 1))
    v[rng.choice(inside, size=size, replace=False)] = 0.0
    v[rng.choice(outside, size=size, replace=False)] = 1.0
    return v


def solve(problem: QpProblem, config: SolverConfig | None = None, callback: Callback | None = None) -> SolverResult:
    """Best of several monotone local searches.

    Restart 0 starts from the top-loss vertex; the other restarts alternate
    between vertices grown greedily from a random node and random interior
    points (seeded). Each
    restart makes two runs: phase 0 ascends from the start point, phase 1
    rounds that result to a vertex and ascends again. Phase 2 then applies
    ``config.kicks`` random perturbations to the incumbent, each followed by
    a fresh run, keeping improvements. Vertex starts begin with pairwise
    swaps. ``callback(restart, phase, iteration, w, objective)`` sees every
    accepted iterate; within one (restart, phase) run the objective never
    decreases.
    """
    config = config or SolverConfig()
    best: SolverResult | None = None

    def consider(run: _Run, r: int, phase: int) -> None:
        nonlocal best
        if best is None or run.objective > best.objective:
            best = SolverResult(
                weights=run.weights,
                objective=run.objective,
                iterations=run.iterations,
                converged=run.converged,
                restart_index=r,
                phase=phase,
                history=np.asarray(run.history),
            )

    def emitter(r: int, phase: int):
        if callback is None:
            return lambda *_: None
        return lambda it, w, f: callback(r, phase, it, w, f)

    for r, w0 in enumerate(_start_points(problem, config)):
        first = _ascend(problem, w0, config, emitter(r, 0), swaps=_is_vertex(w0))
        consider(first, r, 0)
        second = _ascend(problem, _round_to_vertex(problem, first.weights), config, emitter(r, 1), swaps=True)
        consider(second, r, 1)

    assert best is not None
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    for j in range(config.kicks):
        run = _ascend(problem, _kick(problem, best.weights, rng), config, emitter(config.restarts + j, 2), swaps=True)
        consider(run, config.restarts + j, 2)
    best.weights.setflags(write=False)
    return best


# ---------------------------------------------------------------- oracle & extraction


def brute_force_oracle(problem: QpProblem, chunk: int = 65536) -> tuple[np.ndarray, float]:
    """Exact best binary slice with exactly ``budget`` members, by enumeration."""
    n = problem.n
    if n > BRUTE_FORCE_MAX_N:
        raise ValueError(f"instance too large for enumeration (n={n} > {BRUTE_FORCE_MAX_N})")
    m = int(round(problem.budget))
    if abs(problem.budget - m) > 1e-9:
        raise ValueError(f"brute force needs an integer budget, got {problem.budget}")
    adj = problem.q.toarray()
    lam = problem.lam
    combos = itertools.combinations(range(n), m)
    best_val, best_idx = -np.inf, None
    while True:
        block = np.array(list(itertools.islice(combos, chunk)), dtype=np.intp).reshape(-1, m)
        if block.shape[0] == 0:
            break
        vals = problem.losses[block].sum(axis=1)
        if lam:
            vals = vals + lam * adj[block[:, :, None], block[:, None, :]].sum(axis=(1, 2))
        j = int(np.argmax(vals))
        if vals[j] > best_val:
            best_val, best_idx = vals[j], block[j]
    mask = np.zeros(n, dtype=bool)
    mask[best_idx] = True
    return mask, objective_value(problem, mask.astype(np.float64))


def extract_slice(result: SolverResult | np.ndarray, problem: QpProblem) -> np.ndarray:
    """The ``floor(budget)`` samples with the largest weight.

    Ties go to the larger loss, then the smaller index.
    """
    w = result.weights if isinstance(result, SolverResult) else np.asarray(result, dtype=np.float64)
    order = np.lexsort((np.arange(problem.n), -problem.losses, -w))
    mask = np.zeros(problem.n, dtype=bool)
    mask[order[: slice_size(problem.budget)]] = True
    return mask


@dataclass(frozen=True, eq=False)
class DiscoveredSlice:
    mask: np.ndarray  # over the original rows
    rows: np.ndarray  # original row indices the round was solved on
    problem: QpProblem
    result: SolverResult


def iter_slices(
    bundle: DatasetBundle,
    alpha: float,
    lam: float,
    config: SolverConfig | None = None,
    count: int = 1,
    graph_config: GraphBuildConfig | None = None,
    fixed_size: bool = False,
) -> Iterator[DiscoveredSlice]:
    """Discover ``count`` slices, removing each one and rebuilding the graph.

    Each round solves with the same ``alpha`` on the remaining rows, so the
    budget shrinks with them; ``fixed_size=True`` instead keeps the first
    round's budget ``alpha * n``.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    graph_config = graph_config or GraphBuildConfig()
    remaining = np.arange(bundle.n)
    budget0 = alpha * bundle.n
    for round_ in range(count):
        n_rem = remaining.size
        round_alpha = budget0 / max(n_rem, 1) if fixed_size else alpha
        if n_rem == 0 or round_alpha > 1 + 1e-12 or slice_size(round_alpha * n_rem) < 1:
            raise InfeasibleError(f"round {round_ + 1}: {n_rem} remaining samples cannot hold a slice")
        if graph_config.k >= n_rem:
            raise InfeasibleError(f"round {round_ + 1}: k={graph_config.k} needs more than {n_rem} remaining samples")
        graph = build_knn_graph(bundle.embeddings[remaining], graph_config)
        problem = QpProblem(bundle.losses[remaining], graph, lam=lam, alpha=min(round_alpha, 1.0))
        result = solve(problem, config)
        local = extract_slice(result, problem)
        mask = np.zeros(bundle.n, dtype=bool)
        mask[remaining[local]] = True
        yield DiscoveredSlice(mask=mask, rows=remaining, problem=problem, result=result)
        remaining = remaining[~local]


def discover_slices(
    bundle: DatasetBundle,
    alpha: float,
    lam: float,
    config: SolverConfig | None = None,
    count: int = 1,
    graph_config: GraphBuildConfig | None = None,
    fixed_size: bool = False,
) -> list[np.ndarray]:
    """``count`` pairwise-disjoint slice masks over the original rows."""
    return [s.mask for s in iter_slices(bundle, alpha, lam, config, count, graph_config, fixed_size)]


# ---------------------------------------------------------------- integrality assumption


def satisfies_ordering_assumption(graph: KnnGraph) -> bool:
    """Whether some ordering of all nodes has no edge (either direction)
    between consecutive nodes, i.e. a Hamiltonian path in the complement of
    the undirected kNN graph. Exact search; meant for small graphs."""
    n = graph.n
    adj = [0] * n
    for i, row in enumerate(graph.neighbors):
        for j in row:
            adj[i] |= 1 << int(j)
            adj[int(j)] |= 1 << i
    full = (1 << n) - 1
    free = [full & ~adj[i] & ~(1 << i) for i in range(n)]
    dead: set[tuple[int, int]] = set()

    def extend(visited: int, last: int) -> bool:
        if visited == full:
            return True
        if (visited, last) in dead:
            return False
        cand = free[last] & ~visited
        while cand:
            bit = cand & -cand
            nxt = bit.bit_length() - 1
            if extend(visited | bit, nxt):
                return True
            cand ^= bit
        dead.add((visited, last))
        return False

    return any(extend(1 << s, s) for s in range(n))
