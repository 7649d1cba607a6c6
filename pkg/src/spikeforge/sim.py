"""Clock-driven simulation of converted networks with Poisson-encoded input.

Because the network is feed-forward, a whole sample is simulated one
population at a time: the synaptic current of population ``l`` over all
steps is computed from the complete spike train of population ``l-1``
(shifted by the synaptic delay) and then integrated in one pass. This is
step-for-step identical to advancing all populations together.
"""
from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from spikeforge._pure import FIRE_RTOL
from spikeforge.backend import kernels


class SimConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    duration_ms: float = 200.0
    dt_ms: float = 1.0
    input_rate_hz: float = 1000.0
    batch_size: int = 8
    num_runs: int = 20
    evaluate_ann: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("duration_ms", "dt_ms", "input_rate_hz", "batch_size", "num_runs"):
            if not getattr(self, name) > 0:
                raise SimConfigError(f"{name} must be positive, got {getattr(self, name)}")
        steps = self.duration_ms / self.dt_ms
        if abs(steps - round(steps)) > 1e-9:
            raise SimConfigError(f"duration_ms {self.duration_ms} is not a multiple of dt_ms {self.dt_ms}")

    @property
    def steps(self):
        return int(round(self.duration_ms / self.dt_ms))

    @property
    def drive(self):
        """Per-step spike probability of a full-intensity pixel."""
        return min(1.0, self.input_rate_hz * self.dt_ms / 1000.0)

    def replace(self, **changes):
        d = asdict(self)
        d.update(changes)
        return SimConfig(**d)


@dataclass
class SpikeRaster:
    """Spikes of every recorded population as uint8 arrays ``[steps, n]``."""

    layers: list
    total_steps: int

    def spike_times(self, layer, neuron):
        return np.flatnonzero(self.layers[layer][:, neuron])

    def counts(self, layer):
        return self.layers[layer].sum(axis=0, dtype=np.int64)

    def rates(self, layer):
        return self.counts(layer) / self.total_steps


@dataclass
class SampleResult:
    raster: SpikeRaster
    rates: list
    predicted_class: int


def sample_rng(seed, run_index, sample_index):
    """Independent stream per (seed, run, sample); order of evaluation is irrelevant."""
    return np.random.default_rng([seed, run_index, sample_index])


def spike_probabilities(image, cfg):
    p = np.asarray(image, dtype=np.float64).reshape(-1) * (cfg.input_rate_hz * cfg.dt_ms / 1000.0)
    return np.clip(p, 0.0, 1.0)


def poisson_encode(image, cfg, rng):
    """Bernoulli spike train per pixel with probability ``min(1, p * rate * dt)``."""
    p = spike_probabilities(image, cfg)
    spikes = (rng.random((cfg.steps, p.size)) < p).astype(np.uint8)
    return SpikeRaster([spikes], cfg.steps)


def if_step(v, current, threshold):
    """One integrate-and-fire update on membrane ``v`` (modified in place).

    Returns the boolean spike vector. Reset is by subtraction, and the
    membrane is floored at zero.
    """
    v += current
    threshold = np.broadcast_to(threshold, v.shape)
    fired = v >= threshold * (1.0 - FIRE_RTOL)
    v[fired] -= threshold[fired]
    np.maximum(v, 0.0, out=v)
    return fired


def _simulate_spikes(snn, input_spikes, cfg):
    """Propagate input spikes ``[T, B, n0]`` through every projection."""
    steps, batch = input_spikes.shape[:2]
    layers = [input_spikes]
    drive = cfg.drive
    for l, proj in enumerate(snn.projections):
        prev = layers[-1]
        flat = prev.reshape(steps * batch, -1).astype(np.float64)
        current = np.zeros((steps, batch, proj.n_post))
        for delay, fn in proj.delay_groups():
            if delay >= steps:
                continue
            syn = fn(flat[: (steps - delay) * batch]).reshape(steps - delay, batch, proj.n_post)
            current[delay:] += syn
        current += proj.bias * drive
        thr = np.tile(snn.thresholds(l + 1), batch)
        spikes = kernels.integrate_fire(current.reshape(steps, batch * proj.n_post), thr)
        layers.append(spikes.reshape(steps, batch, proj.n_post))
    return layers


def simulate_batch(snn, images, cfg, rngs):
    """Simulate several samples; one generator per sample drives its input."""
    images = np.asarray(images, dtype=np.float64)
    if images.shape[1:] != tuple(snn.input_shape) and images[0].size != snn.populations[0].size:
        raise ValueError(f"image shape {images.shape[1:]} does not match network input {snn.input_shape}")
    inputs = np.stack([poisson_encode(img, cfg, rng).layers[0] for img, rng in zip(images, rngs)], axis=1)
    layers = _simulate_spikes(snn, inputs, cfg)
    results = []
    for b in range(len(images)):
        raster = SpikeRaster([np.ascontiguousarray(layer[:, b]) for layer in layers], cfg.steps)
        rates = [raster.rates(l) for l in range(len(layers))]
        # np.argmax picks the lowest index among ties; a silent network predicts 0
        results.append(SampleResult(raster, rates, int(np.argmax(raster.counts(len(layers) - 1)))))
    return results


def simulate_sample(snn, image, cfg, rng):
    return simulate_batch(snn, np.asarray(image)[None], cfg, [rng])[0]


# -- repeated evaluation ------------------------------------------------------------------


@dataclass
class EvaluationReport:
    per_run_accuracy: list
    mean_accuracy: float
    std_accuracy: float
    ann_accuracy: float | None
    n_samples: int
    config: dict
    predictions: list = field(default_factory=list)

    def to_dict(self):
        return {
            "per_run_accuracy": self.per_run_accuracy,
            "mean_accuracy": self.mean_accuracy,
            "std_accuracy": self.std_accuracy,
            "ann_accuracy": self.ann_accuracy,
            "n_samples": self.n_samples,
            "config": self.config,
            "predictions": self.predictions,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["per_run_accuracy"], d["mean_accuracy"], d["std_accuracy"], d["ann_accuracy"],
                   d["n_samples"], d["config"], d.get("predictions", []))

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["run", "snn_accuracy", "ann_accuracy"])
        for run, acc in enumerate(self.per_run_accuracy):
            w.writerow([run, repr(acc), "" if self.ann_accuracy is None else repr(self.ann_accuracy)])
        return buf.getvalue()


def run_evaluation(snn, test_x, test_y, cfg, ann=None, workers=1):
    """Repeat the spiking test ``cfg.num_runs`` times with fresh Poisson input.

    Samples are simulated in batches of ``cfg.batch_size``; batching and
    ``workers`` only affect scheduling, never results.
    """
    test_x = np.asarray(test_x, dtype=np.float64)
    test_y = np.asarray(test_y, dtype=np.int64)
    n = len(test_x)
    if n == 0:
        raise ValueError("test set is empty")
    tasks = [(run, start) for run in range(cfg.num_runs) for start in range(0, n, cfg.batch_size)]

    def work(task):
        run, start = task
        stop = min(n, start + cfg.batch_size)
        rngs = [sample_rng(cfg.seed, run, i) for i in range(start, stop)]
        return [r.predicted_class for r in simulate_batch(snn, test_x[start:stop], cfg, rngs)]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(work, tasks))
    else:
        outputs = [work(t) for t in tasks]
    predictions = [[] for _ in range(cfg.num_runs)]
    for (run, _), preds in zip(tasks, outputs):
        predictions[run].extend(preds)
    accs = [float(np.mean(np.asarray(p) == test_y)) for p in predictions]
    ann_acc = None
    if cfg.evaluate_ann and ann is not None:
        ann_acc = ann.accuracy(test_x, test_y)
    return EvaluationReport(
        per_run_accuracy=accs,
        mean_accuracy=float(np.mean(accs)),
        std_accuracy=float(np.std(accs)),
        ann_accuracy=ann_acc,
        n_samples=n,
        config=asdict(cfg),
        predictions=predictions,
    )

