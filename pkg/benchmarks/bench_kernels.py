"""Time every hot kernel on the compiled and the numpy backend.

    python3 benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Each kernel runs on a workload sized like the default network at 32x32
(or a 100-neuron STDP layer), and outputs of the two backends are compared
before timing so a speedup never hides a wrong answer.
"""
import argparse
import json
import math
import sys
import timeit

import numpy as np

from spikeforge import backend


def workloads(rng):
    x = rng.random((8, 16, 16, 16))
    w = rng.normal(0, 0.1, (32, 16, 3, 3))
    b = rng.normal(0, 0.1, 32)
    g = rng.normal(size=(8, 32, 16, 16))
    pooled = rng.random((8, 32, 16, 16))
    spikes = (rng.random((8 * 200, 2048)) < 0.05).astype(np.float64)
    dense_w = rng.normal(0, 0.05, (128, 2048))
    currents = rng.normal(0.05, 0.1, (200, 8 * 4096))
    thr = np.ones(8 * 4096)
    pre = (rng.random((100, 784)) < 0.05).astype(np.uint8)
    post = (rng.random((100, 100)) < 0.02).astype(np.uint8)
    sw = rng.uniform(0, 0.3, (100, 784))
    decay = math.exp(-1 / 20)
    return {
        "conv2d_forward": lambda k: k.conv2d_forward(x, w, b, 1, 1),
        "conv2d_backward": lambda k: k.conv2d_backward(x, w, g, 1, 1),
        "avg_pool_forward": lambda k: k.avg_pool_forward(pooled, 2, 2),
        "avg_pool_backward": lambda k: k.avg_pool_backward(pooled[:, :, :8, :8], pooled.shape, 2, 2),
        "dense_propagate": lambda k: k.dense_propagate(spikes, dense_w),
        "integrate_fire": lambda k: k.integrate_fire(currents, thr),
        "stdp_apply": lambda k: k.stdp_apply(pre, post, sw.copy(), 0.01, 0.012, decay, decay, 0.0, 1.0),
        "stdp_layer_run": lambda k: k.stdp_layer_run(pre, sw.copy(), np.zeros(100), 2.0, 0.1, math.exp(-1e-4),
                                                     0.01, 0.012, decay, decay, 0.0, 1.0, True, True),
    }


def _flat(out):
    if isinstance(out, tuple):
        return np.concatenate([np.ravel(o).astype(np.float64) for o in out])
    return np.ravel(out).astype(np.float64)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results to this file")
    args = ap.parse_args(argv)
    if not backend.compiled_available():
        print("compiled backend not built; run `pip install -e . --no-build-isolation`", file=sys.stderr)
        return 2
    py, cy = backend.get_kernels("python"), backend.get_kernels("cython")
    rows = []
    print(f"{'kernel':<20s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s} {'max |diff|':>11s}")
    for name, fn in workloads(np.random.default_rng(0)).items():
        diff = float(np.max(np.abs(_flat(fn(py)) - _flat(fn(cy))), initial=0.0))
        t_py = min(timeit.repeat(lambda: fn(py), number=1, repeat=args.repeat)) * 1e3
        t_cy = min(timeit.repeat(lambda: fn(cy), number=1, repeat=args.repeat)) * 1e3
        rows.append({"kernel": name, "python_ms": t_py, "cython_ms": t_cy, "speedup": t_py / t_cy, "max_abs_diff": diff})
        print(f"{name:<20s} {t_py:10.2f} {t_cy:10.2f} {t_py / t_cy:7.1f}x {diff:11.2e}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
