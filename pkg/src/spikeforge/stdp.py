"""Unsupervised spike-timing-dependent plasticity with winner-take-all layers.

Weights change through pre/post eligibility traces (all-pairs additive STDP).
Layers are dense, trained greedily one after another, each with
algorithmic lateral inhibition and adaptive (homeostatic) thresholds.
Class labels are only used afterwards, to name each output neuron.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from spikeforge import npz
from spikeforge.backend import kernels
from spikeforge.converter import ConnectionTable, format_table
from spikeforge.sim import SimConfig, poisson_encode


class StdpError(ValueError):
    pass


class SilentLayerError(RuntimeError):
    def __init__(self, layer, epoch):
        super().__init__(f"layer {layer} emitted no spikes during epoch {epoch}; "
                         "decrease the threshold or raise the input rate")
        self.layer = layer
        self.epoch = epoch


@dataclass(frozen=True)
class StdpParams:
    a_plus: float = 0.01
    a_minus: float = 0.012
    tau_plus_ms: float = 20.0
    tau_minus_ms: float = 20.0
    w_min: float = 0.0
    w_max: float = 1.0
    # base threshold as a fraction of the mean drive per presentation; see calibrate_threshold
    threshold: float = 0.5
    # threshold increment per spike, relative to the base threshold
    theta_plus: float = 0.05
    theta_decay_ms: float = 1e4
    init_max: float = 0.3
    wta: bool = True

    def __post_init__(self):
        for name in ("a_plus", "a_minus", "tau_plus_ms", "tau_minus_ms", "threshold", "theta_decay_ms"):
            if not getattr(self, name) > 0:
                raise StdpError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.w_min < self.w_max:
            raise StdpError(f"need w_min < w_max, got [{self.w_min}, {self.w_max}]")
        if self.theta_plus < 0:
            raise StdpError("theta_plus must be non-negative")
        if not 0 < self.init_max <= 1:
            raise StdpError("init_max must lie in (0, 1]")

    def decays(self, dt_ms):
        return math.exp(-dt_ms / self.tau_plus_ms), math.exp(-dt_ms / self.tau_minus_ms)


def stdp_window(delta_t_ms, params=StdpParams()):
    """Weight change for one pre/post pair, ``delta_t = t_post - t_pre``."""
    dt = np.asarray(delta_t_ms, dtype=np.float64)
    out = np.where(dt > 0, params.a_plus * np.exp(-np.abs(dt) / params.tau_plus_ms),
                   -params.a_minus * np.exp(-np.abs(dt) / params.tau_minus_ms))
    out = np.where(dt == 0, 0.0, out)
    return float(out) if out.ndim == 0 else out


@dataclass
class StdpLayer:
    """Dense excitatory layer; ``weights`` is ``[n_post, n_pre]``."""

    weights: np.ndarray
    theta: np.ndarray
    base_threshold: float

    @property
    def n_pre(self):
        return self.weights.shape[1]

    @property
    def n_post(self):
        return self.weights.shape[0]

    @classmethod
    def initial(cls, n_pre, n_post, params, rng):
        w = params.w_min + rng.uniform(0.0, params.init_max, size=(n_post, n_pre)) * (params.w_max - params.w_min)
        return cls(w, np.zeros(n_post), 1.0)

    def copy(self):
        return StdpLayer(self.weights.copy(), self.theta.copy(), self.base_threshold)

    def run(self, pre, params, dt_ms=1.0, learn=False):
        """Drive the layer with ``pre`` spikes ``[T, n_pre]``; returns post spikes.

        With ``learn`` set, weights and thresholds are updated in place.
        """
        pre = np.ascontiguousarray(pre, dtype=np.uint8)
        if pre.ndim != 2 or pre.shape[1] != self.n_pre:
            raise StdpError(f"expected spikes [T, {self.n_pre}], got {pre.shape}")
        dp, dm = params.decays(dt_ms)
        return kernels.stdp_layer_run(pre, self.weights, self.theta, self.base_threshold,
                                      params.theta_plus * self.base_threshold,
                                      math.exp(-dt_ms / params.theta_decay_ms), params.a_plus, params.a_minus,
                                      dp, dm, params.w_min, params.w_max, params.wta, learn)


def stdp_apply(layer, pre, post, params=StdpParams(), dt_ms=1.0):
    """Return a copy of ``layer`` after replaying recorded pre/post spike trains.

    Per step: both traces decay, every pre spike depresses by ``a_minus`` times
    the post trace, every post spike potentiates by ``a_plus`` times the pre
    trace, weights are clipped, and only then are the new spikes added to the
    traces. The total change equals the pairwise window summed over all pairs
    (up to clipping).
    """
    pre = np.ascontiguousarray(pre, dtype=np.uint8)
    post = np.ascontiguousarray(post, dtype=np.uint8)
    if pre.shape[0] != post.shape[0] or pre.shape[1] != layer.n_pre or post.shape[1] != layer.n_post:
        raise StdpError(f"spike shapes {pre.shape}, {post.shape} do not match layer "
                        f"{layer.n_post}x{layer.n_pre}")
    out = layer.copy()
    dp, dm = params.decays(dt_ms)
    kernels.stdp_apply(pre, post, out.weights, params.a_plus, params.a_minus, dp, dm, params.w_min, params.w_max)
    return out


def all_pairs_delta(pre, post, params=StdpParams(), dt_ms=1.0):
    """Explicit double sum of the window over every spike pair (no clipping)."""
    pre = np.asarray(pre)
    post = np.asarray(post)
    dw = np.zeros((post.shape[1], pre.shape[1]))
    for i in range(post.shape[1]):
        tp = np.flatnonzero(post[:, i])
        for j in range(pre.shape[1]):
            tq = np.flatnonzero(pre[:, j])
            if len(tp) and len(tq):
                dw[i, j] = np.sum(stdp_window((tp[:, None] - tq[None, :]) * dt_ms, params))
    return dw


# -- multi-layer training -------------------------------------------------------------


@dataclass
class StdpModel:
    layers: list
    params: StdpParams
    sim: SimConfig
    assignment: np.ndarray = None
    response: np.ndarray = None
    n_classes: int = 0
    history: list = field(default_factory=list)

    def propagate(self, image, rng, upto=None):
        """Spike trains of the input and every layer (frozen) for one image."""
        spikes = [poisson_encode(image, self.sim, rng).layers[0]]
        for layer in self.layers[:upto]:
            spikes.append(layer.run(spikes[-1], self.params, self.sim.dt_ms, learn=False))
        return spikes

    def output_counts(self, images, seed, tag):
        images = np.asarray(images, dtype=np.float64)
        counts = np.zeros((len(images), self.layers[-1].n_post), dtype=np.int64)
        for i, img in enumerate(images):
            counts[i] = self.propagate(img, _rng(seed, tag, i))[-1].sum(axis=0)
        return counts

    def predict(self, images, seed=None):
        """Class with the highest mean count over its assigned neurons (ties to lowest)."""
        if self.assignment is None:
            raise StdpError("model has no label assignment")
        seed = self.sim.seed if seed is None else seed
        counts = self.output_counts(images, seed, _TAG_PREDICT)
        return vote(counts, self.assignment, self.n_classes)

    def accuracy(self, images, labels, seed=None):
        return float(np.mean(self.predict(images, seed) == np.asarray(labels)))

    def assignment_json(self):
        return json.dumps({str(i): int(c) for i, c in enumerate(self.assignment)}, sort_keys=True, indent=2) + "\n"

    def tables(self):
        return [_dense_table(layer.weights, self.sim.dt_ms) for layer in self.layers]

    def export(self, dir_path):
        """Write connection tables, ``labels.json`` and ``stdp.npz`` into ``dir_path``."""
        d = Path(dir_path)
        d.mkdir(parents=True, exist_ok=True)
        for l, table in enumerate(self.tables()):
            (d / f"layer_{l}_to_{l + 1}.txt").write_text(format_table(table), encoding="ascii", newline="\n")
        if self.assignment is not None:
            (d / "labels.json").write_text(self.assignment_json(), encoding="ascii", newline="\n")
        self.save(d / "stdp.npz")
        return d

    def save(self, path):
        records = {}
        for l, layer in enumerate(self.layers):
            records[f"layer{l}_weights"] = layer.weights
            records[f"layer{l}_theta"] = layer.theta
        if self.response is not None:
            records["response"] = self.response
        meta = {"params": asdict(self.params), "sim": asdict(self.sim), "n_classes": self.n_classes,
                "base_thresholds": [layer.base_threshold for layer in self.layers],
                "assignment": None if self.assignment is None else [int(a) for a in self.assignment],
                "history": self.history}
        npz.write_npz(records, path, text_records={"stdp.json": json.dumps(meta, sort_keys=True)})

    @classmethod
    def load(cls, path):
        arrays, texts = npz.read_npz_archive(path)
        meta = json.loads(texts["stdp.json"])
        layers = [StdpLayer(arrays[f"layer{l}_weights"], arrays[f"layer{l}_theta"], thr)
                  for l, thr in enumerate(meta["base_thresholds"])]
        assignment = None if meta["assignment"] is None else np.asarray(meta["assignment"], dtype=np.int64)
        return cls(layers, StdpParams(**meta["params"]), SimConfig(**meta["sim"]), assignment,
                   arrays.get("response"), meta["n_classes"], meta["history"])


_TAG_TRAIN, _TAG_ASSIGN, _TAG_PREDICT, _TAG_ORDER, _TAG_INIT, _TAG_CALIBRATE = range(6)
CALIBRATION_SAMPLES = 50


def _rng(seed, *keys):
    return np.random.default_rng([seed, *keys])


def _dense_table(w, dt_ms):
    m, n = w.shape
    post, pre = np.meshgrid(np.arange(m), np.arange(n), indexing="ij")
    return ConnectionTable(pre.ravel(), post.ravel(), w.ravel(), np.full(m * n, dt_ms), n, m)


def calibrate_threshold(layer, pre_trains, params):
    """Set the base threshold to ``params.threshold`` times the mean drive.

    The drive is the synaptic input a neuron would integrate over a whole
    presentation, ``sum_t w . s(t)``, averaged over neurons and samples with
    the current weights. This keeps deep layers, whose input is sparse under
    winner-take-all, in the same firing regime as the first.
    """
    counts = np.stack([np.asarray(p, dtype=np.float64).sum(axis=0) for p in pre_trains])
    drive = float((counts @ layer.weights.T).mean())
    if drive <= 0:
        raise StdpError("calibration input produced no presynaptic spikes")
    layer.base_threshold = params.threshold * drive
    return layer.base_threshold


def vote(counts, assignment, n_classes):
    """Per-sample class scores: mean spike count of the neurons assigned to each class."""
    counts = np.asarray(counts, dtype=np.float64)
    scores = np.zeros((len(counts), n_classes))
    for c in range(n_classes):
        members = assignment == c
        if members.any():
            scores[:, c] = counts[:, members].mean(axis=1)
    return np.argmax(scores, axis=1)


def assign_labels(counts, labels, n_classes):
    """Response matrix ``[n_classes, n_neurons]`` of mean rates and the argmax class per neuron."""
    counts = np.asarray(counts, dtype=np.float64)
    labels = np.asarray(labels)
    response = np.zeros((n_classes, counts.shape[1]))
    for c in range(n_classes):
        sel = labels == c
        if sel.any():
            response[c] = counts[sel].mean(axis=0)
    return np.argmax(response, axis=0).astype(np.int64), response


def train_unsupervised(train_x, train_y, arch, params=StdpParams(), epochs=1, cfg=SimConfig(), n_classes=None):
    """Greedy layer-wise STDP training followed by label assignment.

    ``arch`` lists the layer sizes after the input, e.g. ``[100]`` or
    ``[64, 10]``. Labels are only read by the final assignment step.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.int64)
    arch = [int(a) for a in arch]
    if not arch or min(arch) < 1:
        raise StdpError(f"arch needs at least one layer of positive size, got {arch}")
    if epochs < 0:
        raise StdpError(f"epochs must be >= 0, got {epochs}")
    if len(train_x) == 0 or len(train_x) != len(train_y):
        raise StdpError("need a non-empty training set with one label per image")
    if n_classes is None:
        n_classes = int(train_y.max()) + 1
    sizes = [int(np.prod(train_x.shape[1:]))] + arch
    layers = [StdpLayer.initial(sizes[l], sizes[l + 1], params, _rng(cfg.seed, _TAG_INIT, l))
              for l in range(len(arch))]
    model = StdpModel(layers, params, cfg, n_classes=n_classes)
    n_cal = min(len(train_x), CALIBRATION_SAMPLES)
    for l, layer in enumerate(layers):
        cal = [model.propagate(train_x[i], _rng(cfg.seed, _TAG_CALIBRATE, l, i), upto=l)[-1] for i in range(n_cal)]
        try:
            calibrate_threshold(layer, cal, params)
        except StdpError:
            raise SilentLayerError(l - 1, -1) if l else StdpError("input images produce no spikes") from None
        for epoch in range(epochs):
            order = _rng(cfg.seed, _TAG_ORDER, l, epoch).permutation(len(train_x))
            total = 0
            for i in order:
                pre = model.propagate(train_x[i], _rng(cfg.seed, _TAG_TRAIN, l, epoch, i), upto=l)[-1]
                total += int(layer.run(pre, params, cfg.dt_ms, learn=True).sum())
            model.history.append({"layer": l, "epoch": epoch, "spikes": total})
            if total == 0:
                raise SilentLayerError(l, epoch)
    counts = model.output_counts(train_x, cfg.seed, _TAG_ASSIGN)
    model.assignment, model.response = assign_labels(counts, train_y, n_classes)
    return model
