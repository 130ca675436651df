"""Command-line entry point: ``slicescope {discover,evaluate,synth,bench,replay}``.

Exit codes: 0 success, 1 bad input, 2 infeasible or invalid configuration,
3 internal failure. Tables go to stdout, diagnostics to stderr. Every command
writes ``manifest.json`` next to its outputs; ``replay`` re-runs a manifest
and checks that the outputs come out byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
from dataclasses import asdict, fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from ._threads import max_workers
from .dataset_io import DatasetBundle, DatasetError, load_dataset, save_binary
from .evaluation import (
    EvalConfig,
    EvaluationError,
    evaluate_slice,
    format_report,
    project_2d,
    read_slice_csv,
    write_projection_csv,
    write_slice_csv,
)
from .knn_graph import DEFAULT_K, GraphBuildConfig, GraphError, cached_knn_graph
from .slicer import SlicerError, TrainConfig, predict_proba, select_test_slice, train_slicer
from .solver import InfeasibleError, SolverConfig, default_alpha, iter_slices
from .synth import (
    DEFAULT_LAMBDA_GRID,
    KINDS,
    LATTICE_CELLS,
    LATTICE_MARGINALS,
    METRIC_COLUMNS,
    GeneratorParams,
    NestedParams,
    PipelineConfig,
    SynthError,
    generate_nested_setting,
    generate_setting,
    generator_gate,
    lattice_edge_checks,
    lattice_metrics,
    quick_settings,
    run_benchmark,
    tune_lambda,
)

log = logging.getLogger("slicescope")

EXIT_OK, EXIT_INPUT, EXIT_CONFIG, EXIT_INTERNAL = 0, 1, 2, 3
MANIFEST = "manifest.json"
PATH_OPTIONS = ("--input", "--test", "--slice-file", "--truth", "--settings", "--manifest")


class InputError(Exception):
    """Unreadable or malformed user input (exit 1)."""


class ConfigError(Exception):
    """Flags that cannot be satisfied together (exit 2)."""


# ---------------------------------------------------------------- helpers


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _dump_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, allow_nan=False) + "\n", encoding="utf-8")


def _load(path: str) -> DatasetBundle:
    try:
        return load_dataset(path)
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror or exc}") from None


class Run:
    """Collects inputs, outputs and resolved parameters for the manifest."""

    def __init__(self, command: str, argv: list[str], out_dir: Path):
        self.command = command
        self.argv = list(argv)
        self.out_dir = out_dir
        self.started = _now()
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.parameters: dict = {}
        out_dir.mkdir(parents=True, exist_ok=True)

    def add_input(self, path: str | Path) -> None:
        self.inputs[str(Path(path).resolve())] = sha256_file(path)

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out_dir / name

    def finish(self) -> None:
        doc = {
            "tool": "slicescope",
            "version": __version__,
            "command": self.command,
            "argv": self.argv,
            "cwd": str(Path.cwd()),
            "parameters": self.parameters,
            "threads": max_workers(),
            "inputs": self.inputs,
            "outputs": {name: sha256_file(self.out_dir / name) for name in sorted(set(self.outputs))},
            "started_at": self.started,
            "finished_at": _now(),
        }
        _dump_json(self.out_dir / MANIFEST, doc)
        log.info("wrote %d files to %s", len(set(self.outputs)) + 1, self.out_dir)


def _solver_config(args) -> SolverConfig:
    return SolverConfig(method=args.method, restarts=args.restarts, seed=args.seed)


def _train_config(args) -> TrainConfig:
    return TrainConfig(architecture=args.slicer, seed=args.seed)


# ---------------------------------------------------------------- discover


def cmd_discover(args, argv: list[str]) -> int:
    if args.test and args.no_classifier:
        raise ConfigError("--test needs the slice classifier; drop --no-classifier")
    if args.slices < 1:
        raise ConfigError("--slices must be >= 1")
    val = _load(args.input)
    test = _load(args.test) if args.test else None
    if test is not None and test.d != val.d:
        raise InputError(f"test embeddings have {test.d} dimensions, validation has {val.d}")
    run = Run("discover", argv, Path(args.out_dir))
    run.add_input(args.input)
    if args.test:
        run.add_input(args.test)

    alpha = args.alpha if args.alpha is not None else default_alpha(val.n)
    solver_cfg = _solver_config(args)
    train_cfg = _train_config(args)
    gcfg = GraphBuildConfig(k=args.k)
    tuning = None
    if args.tune:
        if args.lam is not None:
            raise ConfigError("--tune and --lambda are mutually exclusive")
        pipe = PipelineConfig(k=args.k, solver=solver_cfg, train=train_cfg, epsilon=args.epsilon)
        tuning = tune_lambda(val, DEFAULT_LAMBDA_GRID, alpha, args.epsilon, args.seed, pipe)
        lam = tuning.chosen_lambda
        log.info("tuned lambda = %g (qualified: %s)", lam, tuning.qualified)
        if not tuning.qualified:
            log.warning("no lambda reached the %.2f gap threshold; using the largest gap", args.epsilon)
    else:
        lam = args.lam if args.lam is not None else 1.0
    mode = "direct" if args.no_classifier else ("test" if test is not None else "classifier")
    run.parameters = {
        "alpha": alpha,
        "alpha_source": "flag" if args.alpha is not None else "default",
        "lambda": lam,
        "lambda_source": "tune" if args.tune else ("flag" if args.lam is not None else "default"),
        "k": args.k,
        "slices": args.slices,
        "method": solver_cfg.method,
        "restarts": args.restarts,
        "seed": args.seed,
        "epsilon": args.epsilon,
        "slicer": args.slicer,
        "mode": mode,
        "input": str(Path(args.input).resolve()),
        "test": str(Path(args.test).resolve()) if args.test else None,
        "tuning": tuning.to_dict() if tuning else None,
    }

    found = list(iter_slices(val, alpha, lam, solver_cfg, args.slices, gcfg))
    masks = [s.mask for s in found]
    write_slice_csv(run.path("slices.csv"), masks, val.sample_ids)
    solver_doc = {"alpha": alpha, "lambda": lam, "k": args.k, "method": solver_cfg.method, "slices": []}
    for i, s in enumerate(found, start=1):
        entry = {"slice": i, "rows": int(s.rows.size), "budget": s.problem.budget}
        entry.update(s.result.to_dict())
        entry["slice_indices"] = [int(j) for j in np.flatnonzero(s.mask)]
        solver_doc["slices"].append(entry)
    _dump_json(run.path("solver.json"), solver_doc)

    eval_bundle = test if test is not None else val
    graph_name = "graph_test.kng" if test is not None else "graph.kng"
    graph = cached_knn_graph(eval_bundle.embeddings, gcfg, run.path(graph_name))
    test_masks = []
    for i, mask in enumerate(masks, start=1):
        suffix = "" if i == 1 else f"_{i}"
        if mode == "direct":
            report = evaluate_slice(val, graph, mask, EvalConfig(alpha_test=alpha, epsilon=args.epsilon))
        else:
            model = train_slicer(val.embeddings, mask, train_cfg)
            model.save(run.path(f"model{suffix}.json"))
            probs = predict_proba(model, eval_bundle.embeddings)
            share = alpha if test is not None else mask.sum() / val.n
            chosen = select_test_slice(probs, share)
            test_masks.append(chosen)
            report = evaluate_slice(
                eval_bundle, graph, chosen, EvalConfig(alpha_test=share, epsilon=args.epsilon), scores=probs
            )
        _dump_json(run.path(f"report{suffix}.json"), report.to_dict())
        print(f"# slice {i} ({mode})")
        print(format_report(report))
    if test is not None:
        write_slice_csv(run.path("test_slices.csv"), test_masks, test.sample_ids)
    run.finish()
    return EXIT_OK


# ---------------------------------------------------------------- evaluate


def read_truth_csv(path: str, n: int) -> np.ndarray:
    """Truth labels from a CSV with columns ``index`` and ``planted``."""
    truth = np.zeros(n, dtype=bool)
    try:
        with Path(path).open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            missing = {"index", "planted"} - set(reader.fieldnames or ())
            if missing:
                raise InputError(f"{path}: missing column {sorted(missing)[0]!r}")
            for r, row in enumerate(reader):
                try:
                    i, flag = int(row["index"]), int(row["planted"])
                except ValueError:
                    raise InputError(f"{path}: non-integer value at row {r}") from None
                if not 0 <= i < n or flag not in (0, 1):
                    raise InputError(f"{path}: bad entry at row {r}")
                truth[i] = bool(flag)
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror or exc}") from None
    return truth


def cmd_evaluate(args, argv: list[str]) -> int:
    bundle = _load(args.input)
    try:
        mask = read_slice_csv(args.slice_file, bundle.n, args.slice_number)
    except OSError as exc:
        raise InputError(f"{args.slice_file}: {exc.strerror or exc}") from None
    if not mask.any():
        raise InputError(f"{args.slice_file}: slice {args.slice_number} is empty")
    if args.truth:
        bundle = DatasetBundle(
            embeddings=bundle.embeddings,
            losses=bundle.losses,
            correct=bundle.correct,
            slice_label=read_truth_csv(args.truth, bundle.n),
            ids=bundle.ids,
        )
    run = Run("evaluate", argv, Path(args.out_dir))
    for p in (args.input, args.slice_file, args.truth):
        if p:
            run.add_input(p)
    run.parameters = {
        "k": args.k,
        "epsilon": args.epsilon,
        "slice_number": args.slice_number,
        "project": args.project,
        "input": str(Path(args.input).resolve()),
    }
    graph = cached_knn_graph(bundle.embeddings, GraphBuildConfig(k=args.k), run.path("graph.kng"))
    report = evaluate_slice(bundle, graph, mask, EvalConfig(alpha_test=mask.mean(), epsilon=args.epsilon))
    _dump_json(run.path("report.json"), report.to_dict())
    print(format_report(report))
    if args.project:
        proj = project_2d(bundle.embeddings)
        if proj.degenerate:
            log.warning("embeddings are collinear; second projection column is zero")
        write_projection_csv(run.path("projection.csv"), bundle, mask, proj)
    run.finish()
    return EXIT_OK


# ---------------------------------------------------------------- synth


def _write_truth(path: Path, planted: np.ndarray, cluster: np.ndarray) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "planted", "cluster"])
        for i in range(planted.size):
            w.writerow([i, int(planted[i]), int(cluster[i])])


def cmd_synth(args, argv: list[str]) -> int:
    run = Run("synth", argv, Path(args.out_dir))
    run.parameters = {"kind": args.kind, "seed": args.seed, "n": args.n, "k": args.k}
    if args.kind == "nested":
        params = NestedParams() if args.n is None else NestedParams(n=args.n)
        setting = generate_nested_setting(params, args.seed)
        run.parameters["generator"] = asdict(params)
        save_binary(setting.bundle, run.path("dataset.slb"))
        lattice = setting.lattice()
        with run.path("lattice.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            cols = [*LATTICE_CELLS, *LATTICE_MARGINALS]
            w.writerow(["index", "y", "a", *cols])
            for i in range(setting.bundle.n):
                w.writerow([i, int(setting.y[i]), int(setting.a[i]), *(int(lattice[c][i]) for c in cols)])
        metrics = lattice_metrics(setting, k=args.k)
        edges = lattice_edge_checks(metrics)
        gate = {
            "metrics": metrics,
            "edges": edges,
            "compactness_monotone": all(e["compactness_increases"] for e in edges),
            "variance_violations": sum(not e["variance_decreases"] for e in edges),
        }
        gate["passed"] = gate["compactness_monotone"] and gate["variance_violations"] >= 1
        for e in edges:
            log.info(
                "%-8s -> %-8s compactness %s  variance %s", e["coarse"], e["fine"],
                "up" if e["compactness_increases"] else "DOWN", "down" if e["variance_decreases"] else "UP",
            )
    else:
        params = GeneratorParams() if args.n is None else GeneratorParams(n_val=args.n, n_test=args.n)
        setting = generate_setting(args.kind, params, args.seed)
        run.parameters["generator"] = asdict(params)
        save_binary(setting.validation, run.path("validation.slb"))
        save_binary(setting.test, run.path("test.slb"))
        _write_truth(run.path("truth_val.csv"), setting.planted_mask_val, setting.cluster_val)
        _write_truth(run.path("truth_test.csv"), setting.planted_mask_test, setting.cluster_test)
        gate = generator_gate(setting, k=args.k)
        for key, value in gate.items():
            log.info("%s: %s", key, value)
    _dump_json(run.path("gate.json"), gate)
    if not gate["passed"]:
        log.warning("generator acceptance gate did not pass")
    run.finish()
    return EXIT_OK


# ---------------------------------------------------------------- bench


def _settings_from_file(path: str) -> list:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    entries = doc.get("settings") if isinstance(doc, dict) else None
    if not isinstance(entries, list) or not entries:
        raise InputError(f"{path}: expected a non-empty 'settings' list")
    known = {f.name for f in fields(GeneratorParams)}
    out = []
    for j, e in enumerate(entries):
        raw = dict(e.get("params", {}))
        unknown = set(raw) - known
        if unknown:
            raise InputError(f"{path}: setting {j} has unknown parameter {sorted(unknown)[0]!r}")
        if raw.get("planted_p_bad") is not None:
            raw["planted_p_bad"] = tuple(raw["planted_p_bad"])
        out.append(generate_setting(e.get("kind", "correlation"), GeneratorParams(**raw), int(e.get("seed", 0))))
    return out


def _format_table(table) -> str:
    head = ["kind", "method", *METRIC_COLUMNS]
    rows = [head]
    for r in table:
        cells = [r["kind"], r["method"]]
        for col in METRIC_COLUMNS:
            v = r[col]
            cells.append("-" if v is None else (f"{v:.2f}" if col == "Manifold Comp." else f"{100 * v:.1f}%"))
        rows.append(cells)
    widths = [max(len(row[c]) for row in rows) for c in range(len(head))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows)


def cmd_bench(args, argv: list[str]) -> int:
    if args.quick == bool(args.settings):
        raise ConfigError("pass exactly one of --quick or --settings")
    run = Run("bench", argv, Path(args.out_dir))
    if args.quick:
        settings = quick_settings(seed=args.seed)
        if args.kind:
            settings = [s for s in settings if s.kind == args.kind]
    else:
        run.add_input(args.settings)
        settings = _settings_from_file(args.settings)
    alpha = args.alpha if args.alpha is not None else 0.05
    lam = args.lam if args.lam is not None else 1.0
    cfg = PipelineConfig(k=args.k, solver=_solver_config(args), train=_train_config(args), epsilon=args.epsilon)
    run.parameters = {
        "alpha": alpha,
        "lambda": lam,
        "k": args.k,
        "method": cfg.solver.method,
        "restarts": args.restarts,
        "seed": args.seed,
        "slicer": args.slicer,
        "quick": args.quick,
        "settings": [s.describe() for s in settings],
    }
    result = run_benchmark(settings, alpha, lam, cfg)
    with run.path("bench.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "method", *METRIC_COLUMNS])
        for r in result.table:
            w.writerow([r["kind"], r["method"], *("" if r[c] is None else repr(r[c]) for c in METRIC_COLUMNS)])
    _dump_json(run.path("bench.json"), result.to_dict())
    print(_format_table(result.table))
    run.finish()
    return EXIT_OK


# ---------------------------------------------------------------- replay


def _replay_argv(manifest: dict, out_dir: str) -> list[str]:
    cwd = Path(manifest.get("cwd", "."))
    argv, out, skip = manifest["argv"], [], False
    for j, tok in enumerate(argv):
        if skip:
            skip = False
            continue
        if tok == "--out-dir":
            skip = True
            continue
        if tok.startswith("--out-dir="):
            continue
        if j > 0 and argv[j - 1] in PATH_OPTIONS and not Path(tok).is_absolute():
            tok = str(cwd / tok)
        out.append(tok)
    return out + ["--out-dir", out_dir]


def cmd_replay(args, argv: list[str]) -> int:
    try:
        manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    except OSError as exc:
        raise InputError(f"{args.manifest}: {exc.strerror or exc}") from None
    except json.JSONDecodeError:
        raise InputError(f"{args.manifest}: not a JSON manifest") from None
    if manifest.get("tool") != "slicescope" or "argv" not in manifest:
        raise InputError(f"{args.manifest}: not a slicescope manifest")
    if manifest["command"] == "replay":
        raise ConfigError("refusing to replay a replay manifest")
    if manifest.get("version") != __version__:
        log.warning("manifest was written by version %s, running %s", manifest.get("version"), __version__)
    for path, digest in manifest.get("inputs", {}).items():
        if not Path(path).is_file() or sha256_file(path) != digest:
            raise InputError(f"input {path} is missing or changed since the recorded run")
    code = main(_replay_argv(manifest, args.out_dir))
    if code != EXIT_OK:
        return code
    new = json.loads((Path(args.out_dir) / MANIFEST).read_text(encoding="utf-8"))
    differ = sorted(k for k, v in manifest["outputs"].items() if new["outputs"].get(k) != v)
    if differ:
        log.error("replay outputs differ from the recorded run: %s", ", ".join(differ))
        return EXIT_INTERNAL
    log.info("replay reproduced %d outputs byte-for-byte", len(manifest["outputs"]))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _unit_interval(text: str) -> float:
    v = float(text)
    if not (0 < v <= 1):
        raise argparse.ArgumentTypeError(f"expected a value in (0, 1], got {text}")
    return v


def _nonnegative(text: str) -> float:
    v = float(text)
    if not (v >= 0 and math.isfinite(v)):
        raise argparse.ArgumentTypeError(f"expected a finite value >= 0, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slicescope", description="Coherent error slice discovery.")
    parser.add_argument("--version", action="version", version=f"slicescope {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="only warnings and errors on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default):
        p.add_argument("--out-dir", default=out_default, help=f"output directory (default: {out_default})")
        p.add_argument("--k", type=int, default=DEFAULT_K, help="neighbours per node in the kNN graph")
        p.add_argument("--seed", type=int, default=0)

    def pipeline(p):
        p.add_argument("--epsilon", type=float, default=0.15, help="accuracy-gap threshold")
        p.add_argument("--method", choices=("fw", "pg"), default="fw", help="Frank-Wolfe or projected gradient")
        p.add_argument("--restarts", type=int, default=SolverConfig.restarts)
        p.add_argument("--slicer", choices=("logistic", "mlp_1hidden"), default="mlp_1hidden")

    p = sub.add_parser("discover", help="find error slices in a validation set")
    p.add_argument("--input", required=True, help="validation data (SLB1 or CSV)")
    p.add_argument("--test", help="test data; the slicer selects the top alpha fraction of it")
    p.add_argument("--alpha", type=_unit_interval, help="slice share (default: 0.05, or 0.01 from 5000 rows)")
    p.add_argument("--lambda", dest="lam", type=_nonnegative, help="coherence weight (default 1.0)")
    p.add_argument("--tune", action="store_true", help="choose lambda on a held-out half of the input")
    p.add_argument("--slices", type=int, default=1, help="number of disjoint slices to find")
    p.add_argument("--no-classifier", action="store_true", help="report the discovered slice itself")
    common(p, "slicescope-out")
    pipeline(p)
    p.set_defaults(func=cmd_discover)

    p = sub.add_parser("evaluate", help="score a slice file against a dataset")
    p.add_argument("--input", required=True)
    p.add_argument("--slice-file", required=True, help="CSV with an 'index' column (e.g. slices.csv)")
    p.add_argument("--slice-number", type=int, default=1)
    p.add_argument("--truth", help="CSV with 'index' and 'planted' columns")
    p.add_argument("--epsilon", type=float, default=0.15)
    p.add_argument("--project", action="store_true", help="also write a 2-D PCA projection CSV")
    common(p, "slicescope-eval")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="generate a synthetic setting")
    p.add_argument("--kind", choices=(*KINDS, "nested"), required=True)
    p.add_argument("--n", type=int, help="rows per split")
    common(p, "slicescope-synth")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bench", help="run the synthetic benchmark")
    p.add_argument("--quick", action="store_true", help="3 settings per kind with n=1000")
    p.add_argument("--settings", help="JSON file with a 'settings' list of {kind, seed, params}")
    p.add_argument("--kind", choices=KINDS, help="restrict --quick to one kind")
    p.add_argument("--alpha", type=_unit_interval)
    p.add_argument("--lambda", dest="lam", type=_nonnegative)
    common(p, "slicescope-bench")
    pipeline(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("replay", help="re-run a manifest and verify its outputs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_replay)
    return parser


class _StderrHandler(logging.StreamHandler):
    """Writes to whatever ``sys.stderr`` is at emit time."""

    @property
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, value):
        pass


_HANDLER = _StderrHandler()
_HANDLER.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if _HANDLER not in log.handlers:
        log.addHandler(_HANDLER)
    log.setLevel(logging.WARNING if getattr(args, "quiet", False) else logging.INFO)
    try:
        return args.func(args, argv)
    except (InputError, DatasetError, EvaluationError, GraphError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except (ConfigError, InfeasibleError, SlicerError, SynthError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the internal-failure code
        log.error("internal failure: %s: %s", type(exc).__name__, exc)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
