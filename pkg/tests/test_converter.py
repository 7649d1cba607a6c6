import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spikeforge import nn
from spikeforge.converter import (ConnectionFormatError, ConnectionTable, ConversionError, ScaleReport,
                                  SpikingNetwork, compute_activation_scales, convert_network, export_connections,
                                  format_table, import_connections, parse_table, spiking_layer_map)
from spikeforge.nn import AvgPool, Conv2d, Dense, Flatten, NetworkSpec, TrainedNetwork
from spikeforge.sim import SimConfig, sample_rng, simulate_batch


def dense_net(w, b=None):
    w = np.atleast_2d(np.asarray(w, dtype=float))
    spec = NetworkSpec((1, 1, w.shape[1]), [Flatten(), Dense(w.shape[0])])
    return TrainedNetwork(spec, [None, {"weights": w, "bias": np.zeros(w.shape[0]) if b is None else b}])


def random_net(spec, seed=0):
    params = nn.init_params(spec, np.random.default_rng(seed))
    for p in params:
        if p is not None:
            p["bias"] = np.random.default_rng(seed + 1).normal(0, 0.05, size=p["bias"].shape)
    return TrainedNetwork(spec, params)


def percentile_oracle(values, q):
    v = np.sort(values)
    rank = q / 100 * (len(v) - 1)
    lo = int(np.floor(rank))
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (v[hi] - v[lo]) * (rank - lo)


def test_identity_scale_is_max():
    net = dense_net(np.eye(3))
    x = np.array([[[[0.5, 2.0, 1.0]]], [[[0.1, 0.3, 1.9]]]])
    assert compute_activation_scales(net, x, 100).scales == {1: 2.0}


def test_zero_calibration_warns():
    net = dense_net(np.eye(3))
    with pytest.warns(RuntimeWarning, match="zero"):
        rep = compute_activation_scales(net, np.zeros((4, 1, 1, 3)), 99.9)
    assert rep.scales[1] == 1.0 and rep.degenerate_layers == [1]


def test_scale_errors():
    net = dense_net(np.eye(2))
    with pytest.raises(ConversionError):
        compute_activation_scales(net, np.zeros((0, 1, 1, 2)))
    with pytest.raises(ConversionError):
        compute_activation_scales(net, np.ones((1, 1, 1, 2)), percentile=40)


def test_scales_match_sort_oracle():
    spec = NetworkSpec((1, 8, 8), [Conv2d(3, 3, 3, 1, 1), AvgPool(2), Flatten(), Dense(6), Dense(3)])
    net = random_net(spec, 3)
    x = np.random.default_rng(4).random((30, 1, 8, 8))
    rep = compute_activation_scales(net, x, 99.9, batch_size=7)
    outs = nn.forward_batch(spec, net.params, x)
    for i in spiking_layer_map(spec):
        assert rep.scales[i] == pytest.approx(percentile_oracle(outs[i].ravel(), 99.9), rel=1e-12)
    high = compute_activation_scales(net, x, 100)
    low = compute_activation_scales(net, x, 99)
    assert all(high.scales[i] >= low.scales[i] for i in high.scales)
    assert ScaleReport.from_dict(rep.to_dict()) == rep


def test_dense_weight_scaling():
    snn = convert_network(dense_net([[0.5]]), ScaleReport({1: 2.0}, 99.9, 1))
    assert snn.projections[0].weights[0, 0] == 0.25
    assert snn.populations[1].threshold == 1.0
    assert snn.projections[0].delay_steps == 1


def test_unit_scales_keep_weights():
    spec = NetworkSpec((1, 8, 8), [Conv2d(2, 3, 3, 1, 1), AvgPool(2), Flatten(), Dense(3)])
    net = random_net(spec)
    snn = convert_network(net, ScaleReport({0: 1.0, 1: 1.0, 3: 1.0}, 100, 1))
    assert np.array_equal(snn.projections[0].weights, net.params[0]["weights"])
    assert np.array_equal(snn.projections[2].weights, net.params[3]["weights"])
    assert snn.projections[1].pool_weight == 0.25


def test_missing_scale_rejected():
    with pytest.raises(ConversionError, match="scale"):
        convert_network(dense_net([[1.0]]), ScaleReport({}, 99.9, 1))


def test_normalization_preserves_prediction():
    spec = NetworkSpec((1, 8, 8), [Conv2d(3, 3, 3, 1, 1), AvgPool(2), Conv2d(4, 3, 3, 1, 1), AvgPool(2), Flatten(),
                                   Dense(8), Dense(4)])
    net = random_net(spec, 5)
    x = np.random.default_rng(6).random((40, 1, 8, 8))
    rep = compute_activation_scales(net, x)
    snn = convert_network(net, rep)
    analog = snn.analog_forward(x)
    outs = nn.forward_batch(spec, net.params, x)
    for pop, i in enumerate(spiking_layer_map(spec), start=1):
        np.testing.assert_allclose(analog[pop] * rep.scales[i], outs[i].reshape(len(x), -1), rtol=1e-10,
                                   atol=1e-12)
    assert np.array_equal(np.argmax(analog[-1], axis=1), net.predict(x))


def conv_fan_in_oracle(c, h, w, k, kh, kw, stride, pad):
    """Count in-bounds kernel taps for every output position with explicit loops."""
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    counts = np.zeros((k, ho, wo), dtype=int)
    for i in range(ho):
        for j in range(wo):
            n = 0
            for a in range(kh):
                for b in range(kw):
                    y, xx = i * stride + a - pad, j * stride + b - pad
                    n += 0 <= y < h and 0 <= xx < w
            counts[:, i, j] = n * c
    return counts.ravel()


def test_default_net_connection_counts():
    spec = NetworkSpec.default(16)
    net = random_net(spec)
    snn = convert_network(net, ScaleReport({i: 1.5 for i in spiking_layer_map(spec)}, 99.9, 1))
    tables = snn.tables()
    conv1 = np.bincount(tables[0].post, minlength=snn.populations[1].size)
    assert np.array_equal(conv1, conv_fan_in_oracle(1, 16, 16, 16, 3, 3, 1, 1))
    assert conv1.max() == 9 * 1
    conv2 = np.bincount(tables[2].post, minlength=snn.populations[3].size)
    assert np.array_equal(conv2, conv_fan_in_oracle(16, 8, 8, 32, 3, 3, 1, 1))
    assert conv2.max() == 9 * 16
    for t in (tables[1], tables[3]):
        assert np.all(np.bincount(t.post) == 4)
        assert np.allclose(t.weight, 0.25 * 1.5 / 1.5)
    assert len(tables[4]) == 32 * 4 * 4 * 128
    # the unrolled tables drive the same currents as the structured projections
    s = (np.random.default_rng(0).random((3, snn.populations[2].size)) < 0.3).astype(float)
    t = tables[2]
    direct = np.zeros((3, snn.populations[3].size))
    for r in range(3):
        np.add.at(direct[r], t.post, t.weight * s[r, t.pre])
    np.testing.assert_allclose(snn.projections[2].analog(s) - snn.projections[2].bias, direct, atol=1e-12)


def test_pool_rows_carry_ratio():
    spec = NetworkSpec((1, 4, 4), [Conv2d(1, 1, 1), AvgPool(2), Flatten(), Dense(2)])
    net = random_net(spec)
    snn = convert_network(net, ScaleReport({0: 2.0, 1: 0.5, 3: 1.0}, 99.9, 1))
    t = snn.tables()[1]
    assert np.all(np.bincount(t.post) == 4)
    assert np.allclose(t.weight, 0.25 * 2.0 / 0.5)


def test_export_example(tmp_path):
    table = ConnectionTable([1, 0], [0, 0], [-0.25, 0.5], [1.0, 1.0], 2, 1)
    assert format_table(table) == "0 0 0.5 1\n1 0 -0.25 1\n"


def test_import_bounds_error():
    with pytest.raises(ConnectionFormatError, match=r"f.txt:2:"):
        parse_table("0 0 0.5 1\n7 0 0.1 1\n", 4, 1, "f.txt")
    with pytest.raises(ConnectionFormatError, match=r":1:"):
        parse_table("0 0 x 1\n", 4, 1)
    with pytest.raises(ConnectionFormatError, match="4 columns"):
        parse_table("0 0 1\n", 4, 1)
    with pytest.raises(ConnectionFormatError):
        parse_table("0 0 1 0\n", 4, 1)


def test_delay_must_be_multiple_of_dt():
    with pytest.raises(ConnectionFormatError):
        ConnectionTable([0], [0], [1.0], [1.5], 1, 1).delay_steps(1.0)
    assert ConnectionTable([0], [0], [1.0], [3.0], 1, 1).delay_steps(1.0).tolist() == [3]


def test_default_net_roundtrip(tmp_path):
    spec = NetworkSpec.default(16)
    net = random_net(spec, 9)
    x = np.random.default_rng(1).random((10, 1, 16, 16))
    snn = convert_network(net, compute_activation_scales(net, x))
    export_connections(snn, tmp_path / "a")
    back = import_connections(tmp_path / "a")
    for t1, t2 in zip(snn.tables(), back.tables()):
        assert t1.equals(t2)
    export_connections(back, tmp_path / "b")
    for f in sorted((tmp_path / "a").glob("*.txt")):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    np.testing.assert_allclose(back.analog_forward(x)[-1], snn.analog_forward(x)[-1], atol=1e-12)


def test_imported_network_simulates_like_original(tmp_path, toy):
    snn = toy["snn"]
    export_connections(snn, tmp_path)
    back = import_connections(tmp_path)
    cfg = SimConfig(duration_ms=100)
    imgs = toy["tx"][:10]
    a = simulate_batch(snn, imgs, cfg, [sample_rng(0, 0, i) for i in range(10)])
    b = simulate_batch(back, imgs.reshape(10, -1), cfg, [sample_rng(0, 0, i) for i in range(10)])
    assert [r.predicted_class for r in a] == [r.predicted_class for r in b]
    diff = sum(np.abs(ra.raster.counts(4) - rb.raster.counts(4)).sum() for ra, rb in zip(a, b))
    assert diff <= 2


def test_import_requires_files(tmp_path):
    with pytest.raises(ConnectionFormatError):
        import_connections(tmp_path)
    (tmp_path / "populations.txt").write_text("0 2 1\n1 1 1\n")
    with pytest.raises(ConnectionFormatError, match="layer_0_to_1"):
        import_connections(tmp_path)


def test_snn_save_load(tmp_path, toy):
    toy["snn"].save(tmp_path / "snn.npz")
    back = SpikingNetwork.load(tmp_path / "snn.npz")
    for t1, t2 in zip(toy["snn"].tables(), back.tables()):
        assert t1.equals(t2)
    assert back.layer_names == toy["snn"].layer_names


weights = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@settings(max_examples=1000, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.data())
def test_table_text_roundtrip(n_pre, n_post, data):
    rows = data.draw(st.lists(st.tuples(st.integers(0, n_pre - 1), st.integers(0, n_post - 1), weights,
                                        st.integers(1, 16)), max_size=20))
    table = ConnectionTable([r[0] for r in rows], [r[1] for r in rows], [r[2] for r in rows],
                            [float(r[3]) for r in rows], n_pre, n_post)
    back = parse_table(format_table(table), n_pre, n_post)
    assert back.equals(table)
