import csv
import json
import time

import numpy as np
import pytest

from slicescope.cli import main
from slicescope.dataset_io import DatasetBundle, load_binary, save_binary
from slicescope.synth import METRIC_COLUMNS


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["-q", "synth", "--kind", "correlation", "--seed", "1", "--n", "600", "--out-dir", str(out)]) == 0
    return out


def test_synth_outputs_and_byte_identity(synth_dir, tmp_path):
    names = {"validation.slb", "test.slb", "truth_val.csv", "truth_test.csv", "gate.json", "manifest.json"}
    assert {p.name for p in synth_dir.iterdir()} == names
    assert main(["-q", "synth", "--kind", "correlation", "--seed", "1", "--n", "600", "--out-dir", str(tmp_path)]) == 0
    for name in names - {"manifest.json"}:
        assert (tmp_path / name).read_bytes() == (synth_dir / name).read_bytes()
    assert load_binary(synth_dir / "validation.slb").n == 600


def test_synth_nested_lattice(tmp_path):
    assert main(["-q", "synth", "--kind", "nested", "--n", "800", "--out-dir", str(tmp_path)]) == 0
    with (tmp_path / "lattice.csv").open() as fh:
        header = next(csv.reader(fh))
    assert header[3:] == ["y=1,a=1", "y=1,a=0", "y=0,a=1", "y=0,a=0", "y=1", "y=0", "a=1", "a=0"]


def test_discover_happy_path(synth_dir, tmp_path, capsys):
    code = main(["discover", "--input", str(synth_dir / "validation.slb"), "--alpha", "0.05",
                 "--lambda", "1.0", "--out-dir", str(tmp_path)])
    assert code == 0
    for name in ("slices.csv", "solver.json", "report.json", "manifest.json", "model.json", "graph.kng"):
        assert (tmp_path / name).is_file()
    solver = json.loads((tmp_path / "solver.json").read_text())
    assert len(solver["slices"][0]["slice_indices"]) == 30
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["parameters"]["alpha"] == 0.05 and manifest["parameters"]["lambda"] == 1.0
    assert "slice size" in capsys.readouterr().out


def test_discover_tune_records_lambda(synth_dir, tmp_path):
    code = main(["-q", "discover", "--input", str(synth_dir / "validation.slb"), "--tune", "--epsilon", "0.15",
                 "--no-classifier", "--out-dir", str(tmp_path)])
    assert code == 0
    params = json.loads((tmp_path / "manifest.json").read_text())["parameters"]
    assert params["lambda_source"] == "tune"
    assert params["lambda"] in (0.5, 0.8, 1.0, 1.5, 2.0, 2.5, 3.0)
    assert params["alpha"] == 0.05 and params["alpha_source"] == "default"


def test_discover_multi_slice_and_test_split(synth_dir, tmp_path):
    code = main(["-q", "discover", "--input", str(synth_dir / "validation.slb"), "--test", str(synth_dir / "test.slb"),
                 "--slices", "2", "--method", "pg", "--restarts", "2", "--out-dir", str(tmp_path)])
    assert code == 0
    rows = list(csv.DictReader((tmp_path / "slices.csv").open()))
    first = {r["index"] for r in rows if r["slice"] == "1"}
    second = {r["index"] for r in rows if r["slice"] == "2"}
    assert first and second and not first & second
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["slice_size"] == 30 and set(report["precision_at"]) == {"10", "25"}
    assert (tmp_path / "report_2.json").is_file() and (tmp_path / "test_slices.csv").is_file()


def test_missing_loss_column_exit_1(tmp_path, capsys):
    (tmp_path / "bad.csv").write_text("id,score,z0\na,0.1,1\n")
    assert main(["discover", "--input", str(tmp_path / "bad.csv"), "--out-dir", str(tmp_path / "o")]) == 1
    assert "'loss'" in capsys.readouterr().err


def test_exit_codes(synth_dir, tmp_path):
    val = str(synth_dir / "validation.slb")
    assert main(["-q", "discover", "--input", str(tmp_path / "none.slb"), "--out-dir", str(tmp_path)]) == 1
    assert main(["-q", "discover", "--input", val, "--alpha", "0.001", "--out-dir", str(tmp_path)]) == 2
    assert main(["-q", "discover", "--input", val, "--k", "1000", "--out-dir", str(tmp_path)]) == 2
    assert main(["-q", "discover", "--input", val, "--test", val, "--no-classifier", "--out-dir", str(tmp_path)]) == 2
    assert main(["-q", "bench", "--out-dir", str(tmp_path)]) == 2
    assert main(["-q", "synth", "--kind", "weird"]) == 2


def test_evaluate_full_mask_projection_and_truth(synth_dir, tmp_path, capsys):
    bundle = load_binary(synth_dir / "test.slb")
    (tmp_path / "all.csv").write_text("index\n" + "\n".join(str(i) for i in range(bundle.n)) + "\n")
    code = main(["evaluate", "--input", str(synth_dir / "test.slb"), "--slice-file", str(tmp_path / "all.csv"),
                 "--truth", str(synth_dir / "truth_test.csv"), "--project", "--out-dir", str(tmp_path / "e")])
    assert code == 0
    out = capsys.readouterr().out
    assert "precision@10" in out and "average precision" in out
    report = json.loads((tmp_path / "e" / "report.json").read_text())
    assert report["performance_gap"] == 0.0
    rows = list(csv.DictReader((tmp_path / "e" / "projection.csv").open()))
    assert len(rows) == bundle.n
    assert list(rows[0]) == ["id", "pc1", "pc2", "in_slice", "loss", "correct"]


def test_bench_settings_file_and_columns(tmp_path, capsys):
    spec = {"settings": [{"kind": "correlation", "seed": 0, "params": {"n_val": 300, "n_test": 300}},
                         {"kind": "rare", "seed": 1, "params": {"n_val": 400, "n_test": 400}}]}
    (tmp_path / "s.json").write_text(json.dumps(spec))
    assert main(["-q", "bench", "--settings", str(tmp_path / "s.json"), "--alpha", "0.1",
                 "--out-dir", str(tmp_path / "b")]) == 0
    with (tmp_path / "b" / "bench.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["kind", "method", *METRIC_COLUMNS]
    assert len(rows) == 1 + 2 * 2
    assert "Manifold Comp." in capsys.readouterr().out


def test_bench_quick_under_five_minutes(tmp_path):
    start = time.perf_counter()
    assert main(["-q", "bench", "--quick", "--seed", "3", "--out-dir", str(tmp_path)]) == 0
    assert time.perf_counter() - start < 300
    table = json.loads((tmp_path / "bench.json").read_text())["table"]
    assert len(table) == 6


def test_replay_detects_changed_input(tmp_path):
    rng = np.random.default_rng(0)
    data = tmp_path / "d.slb"
    save_binary(DatasetBundle(embeddings=rng.normal(size=(60, 3)), losses=rng.random(60)), data)
    assert main(["-q", "discover", "--input", str(data), "--alpha", "0.1", "--no-classifier",
                 "--out-dir", str(tmp_path / "a")]) == 0
    assert main(["-q", "replay", "--manifest", str(tmp_path / "a" / "manifest.json"),
                 "--out-dir", str(tmp_path / "b")]) == 0
    save_binary(DatasetBundle(embeddings=rng.normal(size=(60, 3)), losses=rng.random(60)), data)
    assert main(["-q", "replay", "--manifest", str(tmp_path / "a" / "manifest.json"),
                 "--out-dir", str(tmp_path / "c")]) == 1
