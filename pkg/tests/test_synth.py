import numpy as np
import pytest

from slicescope.synth import (
    DEFAULT_LAMBDA_GRID,
    KINDS,
    METRIC_COLUMNS,
    GeneratorParams,
    NestedParams,
    NestedSetting,
    SynthError,
    aggregate,
    generate_nested_setting,
    generate_setting,
    generator_gate,
    run_benchmark,
    tune_lambda,
)

SMALL = GeneratorParams(n_val=600, n_test=600)


@pytest.mark.parametrize("kind", KINDS)
def test_planted_slices_are_error_slices(kind):
    s = generate_setting(kind, SMALL, seed=3)
    for bundle, planted in ((s.validation, s.planted_mask_val), (s.test, s.planted_mask_test)):
        assert planted.any()
        assert bundle.losses[planted].mean() > bundle.losses.mean()
        np.testing.assert_array_equal(bundle.slice_label, planted)
        assert np.all(bundle.losses >= 0)
        assert bundle.embeddings.astype(np.float32).astype(np.float64).tobytes() == bundle.embeddings.tobytes()


def test_kind_specifics():
    rare = generate_setting("rare", seed=0)
    assert rare.planted_mask_val.sum() == 60
    corr = generate_setting("correlation", seed=0)
    assert corr.planted_mask_val.sum() == 250
    acc_in = corr.validation.correct[corr.planted_mask_val].mean()
    acc_out = corr.validation.correct[~corr.planted_mask_val].mean()
    assert 0.2 < acc_in < 0.4 and acc_out > 0.9
    noisy = generate_setting("noisy", seed=0)
    flipped = ~noisy.validation.correct[noisy.planted_mask_val]
    assert 0.15 < flipped.mean() < 0.4


def test_seed_determinism():
    a, b = generate_setting("noisy", SMALL, 5), generate_setting("noisy", SMALL, 5)
    assert a.validation.equals(b.validation) and a.test.equals(b.test)
    assert not generate_setting("noisy", SMALL, 6).validation.equals(a.validation)


def test_degenerate_params():
    with pytest.raises(SynthError):
        generate_setting("correlation", GeneratorParams(clusters=1))
    with pytest.raises(SynthError):
        generate_setting("correlation", GeneratorParams(planted_fraction=0.6))
    with pytest.raises(SynthError):
        generate_setting("spurious")
    with pytest.raises(SynthError):
        generate_setting("rare", GeneratorParams(clusters=20, d=16))
    with pytest.raises(SynthError):
        generate_nested_setting(NestedParams(d=4))


@pytest.mark.parametrize("kind", KINDS)
def test_generator_gate(kind):
    gate = generator_gate(generate_setting(kind, seed=1))
    assert gate["passed"] and gate["neighbor_purity_mean"] >= 0.95


def test_multi_planted_loss_order():
    p = GeneratorParams(planted_fraction=0.05, planted_p_bad=(0.2, 0.4, 0.6))
    s = generate_setting("correlation", p, 0)
    means = [s.validation.losses[s.cluster_val == c].mean() for c in range(3)]
    assert means[0] > means[1] > means[2] > s.validation.losses.mean()


def test_nested_lattice_shape_and_determinism():
    s = generate_nested_setting(seed=2)
    lat = s.lattice()
    assert len(lat) == 9 and len(NestedSetting.edges()) == 12
    assert lat["y=1"].sum() + lat["y=0"].sum() == s.bundle.n
    np.testing.assert_array_equal(lat["y=1,a=1"] | lat["y=1,a=0"], lat["y=1"])
    assert generate_nested_setting(seed=2).bundle.equals(s.bundle)


def test_tune_lambda_single_grid_and_default():
    assert DEFAULT_LAMBDA_GRID == (0.5, 0.8, 1.0, 1.5, 2.0, 2.5, 3.0)
    s = generate_setting("correlation", SMALL, 0)
    r = tune_lambda(s.validation, grid=[1.5], alpha=0.1)
    assert r.chosen_lambda == 1.5 and len(r.per_lambda) == 1
    with pytest.raises(SynthError):
        tune_lambda(s.validation, grid=[])


def test_benchmark_shape_and_pure_aggregation():
    settings = [generate_setting(k, GeneratorParams(n_val=400, n_test=400), 0) for k in KINDS]
    res = run_benchmark(settings, alpha=0.1, lam=1.0)
    assert len(res.table) == len(KINDS) * 2
    assert {r["method"] for r in res.table} == {"MCSD", "Top-loss"}
    for row in res.table:
        assert set(METRIC_COLUMNS) <= set(row)
    assert aggregate(res.per_setting) == list(res.table)
    assert aggregate(list(res.per_setting)) == aggregate(list(res.per_setting))
    with pytest.raises(SynthError):
        run_benchmark([])
