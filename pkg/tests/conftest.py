import numpy as np
import pytest

from spikeforge import backend
from spikeforge.converter import compute_activation_scales, convert_network
from spikeforge.nn import AvgPool, Conv2d, Dense, Flatten, NetworkSpec, TrainHyper, train
from spikeforge.synthetic import make_bar_dataset

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def record(criterion, ok, detail):
    """Log one acceptance line and fail the calling test if the criterion is not met."""
    line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


BACKENDS = ["python"] + (["cython"] if backend.compiled_available() else [])


@pytest.fixture(params=BACKENDS)
def kern(request):
    return backend.get_kernels(request.param)


def toy_spec():
    """Two-class bar network on 8x8 inputs."""
    return NetworkSpec((1, 8, 8), [Conv2d(4, 3, 3, 1, 1), AvgPool(2), Flatten(), Dense(16), Dense(2)])


def toy_data():
    ds = make_bar_dataset(300, size=8, seed=1)
    x, y = ds.array(), ds.labels
    return (x[:200], y[:200]), (x[200:], y[200:])


@pytest.fixture(scope="session")
def toy():
    """Trained toy ANN, its spiking conversion and the held-out samples."""
    (x, y), (tx, ty) = toy_data()
    net = train(toy_spec(), (x, y), TrainHyper(lr=0.05, epochs=30, batch_size=16, seed=0), test_set=(tx, ty))
    scales = compute_activation_scales(net, x)
    snn = convert_network(net, scales)
    return {"net": net, "snn": snn, "scales": scales, "x": x, "y": y, "tx": tx, "ty": ty}


TOY_INI = """\
# two-class bar pipeline on 8x8 inputs
[data]
source = bars
image_size = 8
synthetic_samples = 300
synthetic_seed = 1
test_fraction = 0.3333

[ann]
layers = conv 4 3 1 1; pool 2; flatten; dense 16; dense 2
lr = 0.05
epochs = 30
batch_size = 16

[simulation]
num_runs = 3
test_samples = 40

[stdp]
arch = 10
epochs = 2
train_samples = 60
"""

PIPELINE = ["prepare-data", "train-ann", "convert", "export-connections", "simulate", "report", "stdp-train"]


def run_pipeline(workdir, *extra, ini=TOY_INI, stages=PIPELINE):
    """Run the CLI stages on the toy config; returns the exit codes."""
    from spikeforge.cli import main

    workdir.mkdir(parents=True, exist_ok=True)
    cfg = workdir / "toy.ini"
    cfg.write_text(ini)
    return [main([stage, "-c", str(cfg), "--workdir", str(workdir), *extra]) for stage in stages]
