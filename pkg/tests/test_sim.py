import copy
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spikeforge.converter import ScaleReport, convert_network
from spikeforge.nn import Dense, Flatten, NetworkSpec, TrainedNetwork
from spikeforge.sim import (EvaluationReport, SimConfig, SimConfigError, poisson_encode, run_evaluation,
                            sample_rng, simulate_batch, simulate_sample, if_step)


def passthrough_snn(w=1.0):
    spec = NetworkSpec((1, 1, 1), [Flatten(), Dense(1)])
    net = TrainedNetwork(spec, [None, {"weights": np.array([[w]]), "bias": np.zeros(1)}])
    return convert_network(net, ScaleReport({1: 1.0}, 100, 1))


def test_config_defaults_and_validation():
    cfg = SimConfig()
    assert (cfg.duration_ms, cfg.dt_ms, cfg.input_rate_hz, cfg.batch_size, cfg.num_runs, cfg.evaluate_ann) == \
        (200, 1, 1000, 8, 20, True)
    assert cfg.steps == 200
    with pytest.raises(SimConfigError):
        SimConfig(duration_ms=10.5)
    for bad in ({"num_runs": 0}, {"batch_size": 0}, {"dt_ms": -1}, {"input_rate_hz": 0}):
        with pytest.raises(SimConfigError):
            SimConfig(**bad)


def test_poisson_zero_and_saturation():
    cfg = SimConfig()
    raster = poisson_encode(np.array([[[0.0, 1.0]]]), cfg, np.random.default_rng(0))
    counts = raster.counts(0)
    assert counts[0] == 0 and counts[1] == 200


def test_poisson_half_pixel_three_sigma():
    cfg = SimConfig(duration_ms=100_000, input_rate_hz=1000)
    frac = poisson_encode(np.array([0.5]), cfg, np.random.default_rng(11)).rates(0)[0]
    assert abs(frac - 0.5) <= 3 * np.sqrt(0.25 / 1e5)


@pytest.mark.parametrize("p", [0.1, 0.5, 0.9])
def test_poisson_four_sigma(p):
    cfg = SimConfig(duration_ms=10_000)
    frac = poisson_encode(np.array([p]), cfg, np.random.default_rng(int(p * 10))).rates(0)[0]
    assert abs(frac - p) <= 4 * np.sqrt(p * (1 - p) / 1e4)


def test_poisson_deterministic():
    cfg = SimConfig(duration_ms=50)
    img = np.random.default_rng(0).random((1, 4, 4))
    a = poisson_encode(img, cfg, sample_rng(3, 1, 2)).layers[0]
    b = poisson_encode(img, cfg, sample_rng(3, 1, 2)).layers[0]
    c = poisson_encode(img, cfg, sample_rng(3, 1, 3)).layers[0]
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_if_step_examples():
    v = np.zeros(1)
    assert sum(if_step(v, np.array([0.3]), 1.0)[0] for _ in range(20)) == 6
    v = np.zeros(1)
    assert all(if_step(v, np.array([1.0]), 1.0)[0] for _ in range(10))
    v = np.zeros(1)
    assert not any(if_step(v, np.zeros(1), 1.0)[0] for _ in range(10)) and v[0] == 0.0
    v = np.array([0.4])
    if_step(v, np.array([-1.0]), 1.0)
    assert v[0] == 0.0


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-3, 1.0), st.floats(0.1, 5.0), st.integers(1, 400))
def test_reset_by_subtraction_count(frac, theta, steps):
    c = frac * theta
    v = np.zeros(1)
    n = sum(int(if_step(v, np.array([c]), theta)[0]) for _ in range(steps))
    lo = int(np.floor(c * steps / theta))
    assert n in (lo, lo + 1)


def test_zero_image_predicts_class_zero(toy):
    snn = copy.deepcopy(toy["snn"])
    for proj in snn.projections:
        proj.bias = np.zeros_like(proj.bias)
    res = simulate_sample(snn, np.zeros((1, 8, 8)), SimConfig(duration_ms=50), np.random.default_rng(0))
    assert res.predicted_class == 0
    assert all(r.sum() == 0 for r in res.rates)


def test_bias_drives_silent_input(toy):
    # biases inject a constant current, as they shift the analog activation for a blank image
    res = simulate_sample(toy["snn"], np.zeros((1, 8, 8)), SimConfig(duration_ms=200), np.random.default_rng(0))
    assert res.rates[0].sum() == 0
    assert res.predicted_class == int(toy["net"].predict(np.zeros((1, 1, 8, 8)))[0])


def test_passthrough_chain():
    res = simulate_sample(passthrough_snn(), np.ones((1, 1, 1)), SimConfig(duration_ms=100), np.random.default_rng(0))
    assert res.raster.counts(1)[0] == 99
    # one step of synaptic delay: the input spike at t reaches the output at t + 1
    assert res.raster.spike_times(1, 0).tolist() == list(range(1, 100))


def test_raster_spike_times_sorted(toy):
    res = simulate_sample(toy["snn"], toy["tx"][0], SimConfig(duration_ms=100), np.random.default_rng(1))
    for l, layer in enumerate(res.raster.layers):
        for n in range(layer.shape[1]):
            t = res.raster.spike_times(l, n)
            assert np.all(np.diff(t) > 0) and (t.size == 0 or (t[0] >= 0 and t[-1] < 100))
    for l, r in enumerate(res.rates):
        assert np.array_equal(r, res.raster.counts(l) / 100)


def test_image_shape_checked(toy):
    with pytest.raises(ValueError):
        simulate_sample(toy["snn"], np.zeros((1, 5, 5)), SimConfig(), np.random.default_rng(0))


def test_long_run_matches_ann(toy):
    cfg = SimConfig(duration_ms=2000, batch_size=50)
    tx = toy["tx"]
    preds = []
    for start in range(0, len(tx), cfg.batch_size):
        rngs = [sample_rng(0, 0, i) for i in range(start, min(len(tx), start + cfg.batch_size))]
        preds.extend(r.predicted_class for r in simulate_batch(toy["snn"], tx[start:start + cfg.batch_size], cfg, rngs))
    agree = np.mean(np.asarray(preds) == toy["net"].predict(tx))
    assert agree >= 0.9


def test_run_evaluation_report(toy):
    cfg = SimConfig(duration_ms=100, num_runs=20)
    tx, ty = toy["tx"][:16], toy["ty"][:16]
    rep = run_evaluation(toy["snn"], tx, ty, cfg, ann=toy["net"])
    assert len(rep.per_run_accuracy) == 20
    assert rep.mean_accuracy == pytest.approx(np.mean(rep.per_run_accuracy))
    assert rep.std_accuracy == pytest.approx(np.std(rep.per_run_accuracy))
    assert rep.ann_accuracy == toy["net"].accuracy(tx, ty)
    r0 = simulate_sample(toy["snn"], tx[0], cfg, sample_rng(cfg.seed, 0, 0)).raster.layers[0]
    r1 = simulate_sample(toy["snn"], tx[0], cfg, sample_rng(cfg.seed, 1, 0)).raster.layers[0]
    assert not np.array_equal(r0, r1)  # runs draw fresh input streams
    again = run_evaluation(toy["snn"], tx, ty, cfg, ann=toy["net"])
    assert again.to_json() == rep.to_json()
    no_ann = run_evaluation(toy["snn"], tx, ty, cfg.replace(evaluate_ann=False, num_runs=2), ann=toy["net"])
    assert no_ann.ann_accuracy is None


def test_batching_and_threads_do_not_change_results(toy):
    tx, ty = toy["tx"][:13], toy["ty"][:13]
    base = SimConfig(duration_ms=100, num_runs=3)
    ref = run_evaluation(toy["snn"], tx, ty, base.replace(batch_size=1))
    for bs, workers in ((8, 1), (5, 4), (13, 3)):
        rep = run_evaluation(toy["snn"], tx, ty, base.replace(batch_size=bs), workers=workers)
        assert rep.predictions == ref.predictions
        assert rep.per_run_accuracy == ref.per_run_accuracy
    cfg = base.replace(batch_size=8)
    one = [simulate_sample(toy["snn"], tx[i], cfg, sample_rng(0, 0, i)).raster for i in range(5)]
    many = [r.raster for r in simulate_batch(toy["snn"], tx[:5], cfg, [sample_rng(0, 0, i) for i in range(5)])]
    for a, b in zip(one, many):
        assert all(np.array_equal(x, y) for x, y in zip(a.layers, b.layers))


def test_empty_test_set(toy):
    with pytest.raises(ValueError):
        run_evaluation(toy["snn"], np.zeros((0, 1, 8, 8)), np.zeros(0), SimConfig())


def test_report_serialization(toy):
    rep = run_evaluation(toy["snn"], toy["tx"][:4], toy["ty"][:4], SimConfig(duration_ms=50, num_runs=3))
    back = EvaluationReport.from_dict(json.loads(rep.to_json()))
    assert back == rep
    lines = rep.to_csv().splitlines()
    assert lines[0] == "run,snn_accuracy,ann_accuracy" and len(lines) == 4
    assert [float(l.split(",")[1]) for l in lines[1:]] == rep.per_run_accuracy
