"""Compiled and numpy kernels against loop oracles and against each other."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import correlate2d

from spikeforge import _pure, backend
from spikeforge.stdp import StdpParams, all_pairs_delta

from conftest import BACKENDS


def conv_loop(x, w, b, stride, padding):
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, k, ho, wo))
    for s in range(n):
        for f in range(k):
            for i in range(ho):
                for j in range(wo):
                    acc = b[f]
                    for ch in range(c):
                        for a in range(kh):
                            for bb in range(kw):
                                acc += w[f, ch, a, bb] * xp[s, ch, i * stride + a, j * stride + bb]
                    out[s, f, i, j] = acc
    return out


def test_conv_forward_matches_loop(kern):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    for stride, pad in [(1, 0), (2, 1), (1, 1), (3, 2)]:
        np.testing.assert_allclose(kern.conv2d_forward(x, w, b, stride, pad), conv_loop(x, w, b, stride, pad),
                                   rtol=0, atol=1e-12)


def test_conv_forward_matches_scipy(kern):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 1, 9, 7))
    w = rng.normal(size=(1, 1, 3, 2))
    ref = correlate2d(x[0, 0], w[0, 0], mode="valid")
    np.testing.assert_allclose(kern.conv2d_forward(x, w, np.zeros(1), 1, 0)[0, 0], ref, atol=1e-12)


def test_conv_backward_matches_numeric(kern):
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 2, 5, 4))
    w = rng.normal(size=(3, 2, 3, 2))
    b = rng.normal(size=3)
    g = rng.normal(size=kern.conv2d_forward(x, w, b, 2, 1).shape)
    gx, gw, gb = kern.conv2d_backward(x, w, g, 2, 1)

    def loss(xx, ww, bb):
        return float(np.sum(kern.conv2d_forward(xx, ww, bb, 2, 1) * g))

    eps = 1e-6
    for arr, grad in ((x, gx), (w, gw), (b, gb)):
        flat = arr.reshape(-1)
        num = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss(x, w, b)
            flat[i] = orig - eps
            down = loss(x, w, b)
            flat[i] = orig
            num[i] = (up - down) / (2 * eps)
        np.testing.assert_allclose(grad.reshape(-1), num, rtol=1e-6, atol=1e-8)


def test_pool_forward_backward(kern):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 8, 8))
    out = kern.avg_pool_forward(x, 2, 2)
    ref = x.reshape(2, 3, 4, 2, 4, 2).mean(axis=(3, 5))
    np.testing.assert_allclose(out, ref, atol=1e-12)
    g = rng.normal(size=out.shape)
    gx = kern.avg_pool_backward(g, x.shape, 2, 2)
    np.testing.assert_allclose(gx, np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4, atol=1e-15)
    # overlapping windows accumulate
    gx = kern.avg_pool_backward(np.ones((1, 1, 2, 2)), (1, 1, 3, 3), 2, 1)
    np.testing.assert_allclose(gx[0, 0], np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]]) / 4)


def test_dense_propagate_matches_matmul(kern):
    rng = np.random.default_rng(4)
    x = (rng.random((13, 40)) < 0.3).astype(float)
    w = rng.normal(size=(6, 40))
    np.testing.assert_allclose(kern.dense_propagate(x, w), x @ w.T, atol=1e-12)


def test_dense_propagate_row_independent_of_batch(kern):
    rng = np.random.default_rng(5)
    x = (rng.random((17, 300)) < 0.2).astype(float)
    w = rng.normal(size=(20, 300))
    full = kern.dense_propagate(x, w)
    for i in (0, 7, 16):
        assert np.array_equal(kern.dense_propagate(x[i : i + 1], w)[0], full[i])


def test_integrate_fire_constant_input(kern):
    out = kern.integrate_fire(np.full((20, 1), 0.3), np.ones(1))
    assert int(out.sum()) == 6
    out = kern.integrate_fire(np.ones((50, 1)), np.ones(1))
    assert out.all()
    out = kern.integrate_fire(np.zeros((50, 3)), np.ones(3))
    assert not out.any()


@settings(max_examples=200, deadline=None)
@given(c=st.floats(1e-3, 1.0), theta=st.floats(0.5, 4.0), steps=st.integers(1, 400))
def test_integrate_fire_count_bounds(c, theta, steps):
    """Reset by subtraction: count is floor(cT/theta) or one more."""
    c = c * theta
    for name in BACKENDS:
        k = backend.get_kernels(name)
        n = int(k.integrate_fire(np.full((steps, 1), c), np.array([theta])).sum())
        base = math.floor(c * steps / theta)
        assert n in (base, base + 1)


def test_integrate_fire_floor(kern):
    cur = np.array([[-5.0], [0.6], [0.6]])
    # the floor discards the negative excursion, so two steps of 0.6 reach 1.2
    assert kern.integrate_fire(cur, np.ones(1))[:, 0].tolist() == [0, 0, 1]


def test_backends_agree_on_integrate_fire():
    if len(BACKENDS) < 2:
        pytest.skip("compiled kernels not built")
    rng = np.random.default_rng(6)
    cur = rng.normal(0.2, 0.5, size=(300, 50))
    thr = rng.uniform(0.5, 2, size=50)
    a = backend.get_kernels("python").integrate_fire(cur, thr)
    b = backend.get_kernels("cython").integrate_fire(cur, thr)
    assert np.array_equal(a, b)


def test_stdp_apply_matches_all_pairs(kern):
    rng = np.random.default_rng(7)
    params = StdpParams()
    dp, dm = params.decays(1.0)
    pre = (rng.random((200, 5)) < 0.05).astype(np.uint8)
    post = (rng.random((200, 3)) < 0.05).astype(np.uint8)
    w0 = np.full((3, 5), 0.5)
    w = w0.copy()
    kern.stdp_apply(pre, post, w, params.a_plus, params.a_minus, dp, dm, -1e9, 1e9)
    np.testing.assert_allclose(w - w0, all_pairs_delta(pre, post, params), atol=1e-12)


def test_stdp_layer_run_backends_identical():
    if len(BACKENDS) < 2:
        pytest.skip("compiled kernels not built")
    rng = np.random.default_rng(8)
    p = StdpParams()
    dp, dm = p.decays(1.0)
    pre = (rng.random((150, 30)) < 0.1).astype(np.uint8)
    for wta in (True, False):
        outs = []
        for name in ("python", "cython"):
            w = rng.uniform(0, 0.3, size=(4, 30)) if not outs else w0.copy()
            if not outs:
                w0 = w.copy()
            theta = np.zeros(4)
            post = backend.get_kernels(name).stdp_layer_run(pre, w, theta, 1.0, 0.05, 0.999, p.a_plus, p.a_minus,
                                                           dp, dm, 0.0, 1.0, wta, True)
            outs.append((post, w, theta))
        assert np.array_equal(outs[0][0], outs[1][0])
        assert np.array_equal(outs[0][1], outs[1][1])
        assert np.array_equal(outs[0][2], outs[1][2])
        if wta:
            assert outs[0][0].sum(axis=1).max() <= 1


def test_stdp_layer_run_frozen_without_learning(kern):
    rng = np.random.default_rng(9)
    pre = (rng.random((100, 10)) < 0.2).astype(np.uint8)
    w = rng.uniform(0, 1, size=(3, 10))
    w0 = w.copy()
    theta = np.full(3, 0.1)
    kern.stdp_layer_run(pre, w, theta, 1.0, 0.05, 0.99, 0.01, 0.012, 0.95, 0.95, 0.0, 1.0, True, False)
    assert np.array_equal(w, w0)
    assert np.array_equal(theta, np.full(3, 0.1))


def test_backend_selection():
    assert backend.BACKEND in ("cython", "python")
    assert backend.get_kernels("python") is _pure
    with pytest.raises(ValueError):
        backend.get_kernels("fortran")
    for name in backend.KERNEL_NAMES:
        assert callable(getattr(backend.kernels, name))


@pytest.mark.skipif(not backend.compiled_available(), reason="compiled backend not built")
def test_benchmark_runs(capsys):
    import importlib.util
    from pathlib import Path

    path = Path(__file__).resolve().parents[1] / "benchmarks" / "bench_kernels.py"
    spec = importlib.util.spec_from_file_location("bench_kernels", path)
    bench = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(bench)
    assert bench.main(["--repeat", "1"]) == 0
    assert "dense_propagate" in capsys.readouterr().out
