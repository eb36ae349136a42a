import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from microgrid_drl.data import SynthConfig, TimeSeriesDataset, split, synth_generate
from microgrid_drl.forecast import (
    REPORT_HEADER, ForecastDivergence, ForecasterBundle, build_observation, evaluate_bundle,
    evaluate_forecaster, format_table, mape, observation_width, rmse, train_bundle, train_forecaster,
    write_report,
)


def test_mape_examples():
    assert mape([110.0], [100.0]) == pytest.approx(10.0)
    assert mape([5.0, 7.0], [5.0, 7.0]) == 0.0
    assert mape([90.0, 110.0], [100.0, 100.0]) == pytest.approx(10.0)


def test_mape_skips_zero_actuals_with_count():
    value, dropped = mape([1.0, 110.0], [0.0, 100.0], return_dropped=True)
    assert value == pytest.approx(10.0) and dropped == 1
    with pytest.raises(ValueError):
        mape([1.0, 2.0], [0.0, 0.0])


def test_rmse_examples():
    assert rmse([2.0, 3.0], [2.0, 3.0]) == 0.0
    assert rmse([1.0, 3.0], [0.0, 0.0]) == pytest.approx(np.sqrt(5.0))
    with pytest.raises(ValueError):
        rmse([], [])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e6, 1e6), st.floats(0.1, 1e6)), min_size=1, max_size=50))
def test_metrics_nonnegative(pairs):
    pred, act = np.array(pairs).T
    assert mape(pred, act) >= 0 and rmse(pred, act) >= 0


def test_constant_series_learned():
    fc = train_forecaster(np.full(96, 42.0), 1, 150, np.random.default_rng(0), hidden=8)
    assert fc.losses[-1] < 1e-6
    np.testing.assert_allclose(fc.run(np.full(30, 42.0)), 42.0, atol=1e-3)


def test_loss_curve_finite_and_decreasing():
    x = np.sin(2 * np.pi * np.arange(240) / 24)
    fc = train_forecaster(x, 1, 60, np.random.default_rng(1), hidden=8)
    assert np.all(np.isfinite(fc.losses)) and len(fc.losses) == 60
    assert fc.losses[-1] <= fc.losses[0]


def test_normalisation_round_trip():
    x = np.random.default_rng(2).normal(300, 40, size=500)
    fc = train_forecaster(x, 1, 1, np.random.default_rng(0), hidden=2)
    np.testing.assert_allclose(fc.denormalize(fc.normalize(x)), x, rtol=0, atol=1e-12)


def test_training_is_reproducible():
    x = np.sin(np.arange(100) / 4.0)
    a = train_forecaster(x, 2, 10, np.random.default_rng(5), hidden=4)
    b = train_forecaster(x, 2, 10, np.random.default_rng(5), hidden=4)
    assert a.store.checksum() == b.store.checksum() and a.losses == b.losses


def test_non_finite_loss_aborts_with_epoch():
    x = np.sin(np.arange(50) / 4.0)
    with pytest.raises(ForecastDivergence, match="epoch 0"), np.errstate(all="ignore"):
        train_forecaster(x, 1, 5, np.random.default_rng(0), hidden=4, learning_rate=np.inf, stats=(0.0, 1e-320))


def test_bad_arguments():
    with pytest.raises(ValueError):
        train_forecaster(np.ones(5), 0, 1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        train_forecaster(np.ones(2), 2, 1, np.random.default_rng(0))


def test_sequence_run_matches_stepwise():
    x = np.cos(np.arange(40) / 3.0) * 50 + 200
    fc = train_forecaster(x, 1, 5, np.random.default_rng(3), hidden=6)
    np.testing.assert_allclose(fc.run(x), fc.run_stepwise(x), rtol=0, atol=1e-12)


@pytest.fixture(scope="module")
def small_bundle():
    ds = synth_generate(SynthConfig(days=10, seed=1).noiseless())
    train, test = split(ds, 0.7)
    return ds, train, test, train_bundle(train, epochs=30, seed=0, hidden=8)


def test_bundle_has_all_models_and_report_rows(small_bundle, tmp_path):
    ds, train, test, bundle = small_bundle
    assert sorted(bundle.models) == [(q, k) for q in ("demand", "generation", "price") for k in (1, 2)]
    scores = evaluate_bundle(bundle, test)
    assert len(scores) == 6
    write_report(scores, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == ",".join(REPORT_HEADER) and len(lines) == 7
    table = format_table(scores)
    assert "1-step MAPE" in table and "2-step MAPE" in table and "generation" in table


def test_generation_mape_drops_night_zeros(small_bundle):
    _, _, test, bundle = small_bundle
    score = next(s for s in evaluate_bundle(bundle, test) if s.quantity == "generation")
    assert score.dropped_zero > 0 and score.mape >= 0


def test_bundle_save_load_round_trip(small_bundle, tmp_path):
    ds, _, _, bundle = small_bundle
    bundle.save(tmp_path / "b.json", "cfg")
    back = ForecasterBundle.load(tmp_path / "b.json")
    assert back.checksum() == bundle.checksum()
    assert np.array_equal(back.episode_forecasts(ds, 48, 24, 1), bundle.episode_forecasts(ds, 48, 24, 1))


def test_predict_k_step_needs_warmup(small_bundle):
    ds, _, _, bundle = small_bundle
    with pytest.raises(ValueError):
        bundle.predict_k_step("demand", ds.demand[:10], 1)
    assert np.isfinite(bundle.predict_k_step("demand", ds.demand[:30], 2))


def test_predict_k_step_bounded_for_any_window(small_bundle):
    _, _, _, bundle = small_bundle
    rng = np.random.default_rng(0)
    for _ in range(10):
        assert np.isfinite(bundle.predict_k_step("price", rng.normal(0, 1e3, 30), 1))


def test_episode_forecasts_match_direct_predictions(small_bundle):
    ds, _, _, bundle = small_bundle
    start, T = 72, 24
    table = bundle.episode_forecasts(ds, start, T, 1)
    assert table.shape == (T + 1, 5)
    W = bundle.warmup
    for t in (0, 5, 24):
        h = start + t
        lo = start - W - 1
        g1 = bundle.predict_k_step("generation", ds.generation[lo:h], 1)
        d2 = bundle.predict_k_step("demand", ds.demand[lo:h], 2)
        p1 = bundle.predict_k_step("price", ds.price[lo:h + 1], 1)
        assert table[t, 0] == pytest.approx(g1, abs=1e-12)
        assert table[t, 2] == pytest.approx(p1, abs=1e-12)
        assert table[t, 4] == pytest.approx(d2, abs=1e-12)


def test_episode_forecasts_ignore_future_values(small_bundle):
    ds, _, _, bundle = small_bundle
    start, t = 96, 6
    h = start + t
    noisy = {q: ds.series(q).copy() for q in ("generation", "demand", "price")}
    noisy["generation"][h:] += 500.0
    noisy["demand"][h:] += 500.0
    noisy["price"][h + 1:] += 5.0
    other = TimeSeriesDataset(ds.timestamps, noisy["generation"], noisy["demand"], noisy["price"])
    a = bundle.episode_forecasts(ds, start, 24, 1)[t]
    b = bundle.episode_forecasts(other, start, 24, 1)[t]
    assert np.array_equal(a, b)


def test_evaluation_targets_stay_in_test_split(small_bundle):
    ds, train, test, bundle = small_bundle
    fc = bundle.get("demand", 2)
    preds, actuals = evaluate_forecaster(fc, ds.demand, test.start, test.stop)
    assert preds.size == test.stop - test.start - 2
    np.testing.assert_array_equal(actuals, ds.demand[test.start + 2:test.stop])


def test_training_only_reads_training_hours():
    ds = synth_generate(SynthConfig(days=10, seed=2))
    train, test = split(ds, 0.7)
    tampered = TimeSeriesDataset(ds.timestamps, ds.generation.copy(), ds.demand.copy(), ds.price.copy())
    tampered.demand[test.start:] = 1e6
    tampered.price[test.start:] = -3.0
    a = train_bundle(train, horizons=(1,), epochs=3, seed=4, hidden=4)
    b = train_bundle(split(tampered, 0.7)[0], horizons=(1,), epochs=3, seed=4, hidden=4)
    assert a.checksum() == b.checksum()
    for key, fc in a.models.items():
        assert (fc.mean, fc.std) == (b.models[key].mean, b.models[key].std)


def test_build_observation_width_and_order():
    state = [0.5, 10.0, 300.0, 0.04]
    fc = {("generation", 1): 1.0, ("demand", 1): 2.0, ("price", 1): 3.0,
          ("generation", 2): 4.0, ("demand", 2): 5.0}
    obs = build_observation(state, fc, 1)
    assert obs.shape == (9,) == (observation_width(1),)
    assert obs.tolist() == [0.5, 10.0, 300.0, 0.04, 1.0, 2.0, 3.0, 4.0, 5.0]
    assert np.array_equal(obs, build_observation(state, fc, 1))


def test_build_observation_zero_stub_pads_with_zeros():
    fc = {("generation", 1): 0.0, ("demand", 1): 0.0, ("price", 1): 0.0,
          ("generation", 2): 0.0, ("demand", 2): 0.0}
    obs = build_observation([0.2, 1.0, 2.0, 3.0], fc, 1)
    assert obs.tolist() == [0.2, 1.0, 2.0, 3.0, 0, 0, 0, 0, 0]


def test_build_observation_missing_horizon():
    with pytest.raises(KeyError):
        build_observation([0.5, 0, 0, 0], {("generation", 1): 0.0, ("demand", 1): 0.0}, 1)
