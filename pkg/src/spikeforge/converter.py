"""Rate-based ANN-to-SNN conversion and the connection-table interchange format.

Each non-Flatten ANN layer becomes a population of integrate-and-fire
neurons with threshold 1. Layer weights are rescaled by
``scale[l-1] / scale[l]`` and biases by ``1 / scale[l]``, where ``scale[l]``
is a high percentile of the layer's activations over calibration data, so a
unit's firing rate (spikes per step) approximates its normalized activation.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from spikeforge import npz
from spikeforge.backend import kernels
from spikeforge.nn import AvgPool, Conv2d, Dense, Flatten, forward_batch

log = logging.getLogger(__name__)

MIN_SCALE = 1e-6


class ConversionError(ValueError):
    pass


class ConnectionFormatError(ValueError):
    pass


# -- activation scales ------------------------------------------------------------


@dataclass
class ScaleReport:
    """Per-layer activation scale, keyed by ANN layer index (Flatten layers omitted)."""

    scales: dict
    percentile: float
    n_samples: int
    degenerate_layers: list = field(default_factory=list)

    def to_dict(self):
        return {"scales": {str(k): v for k, v in self.scales.items()}, "percentile": self.percentile,
                "n_samples": self.n_samples, "degenerate_layers": self.degenerate_layers}

    @classmethod
    def from_dict(cls, d):
        return cls({int(k): float(v) for k, v in d["scales"].items()}, d["percentile"], d["n_samples"],
                   list(d.get("degenerate_layers", [])))


def compute_activation_scales(net, calibration_x, percentile=99.9, batch_size=64):
    """Percentile of each layer's activations over the calibration images.

    Hidden layers are measured after ReLU; the output layer on its logits.
    A layer whose activations are all zero gets scale 1 and a warning.
    """
    calibration_x = np.asarray(calibration_x, dtype=np.float64)
    if len(calibration_x) == 0:
        raise ConversionError("calibration set is empty")
    if not 50.0 < percentile <= 100.0:
        raise ConversionError(f"percentile must lie in (50, 100], got {percentile}")
    collected = None
    for start in range(0, len(calibration_x), batch_size):
        outs = forward_batch(net.spec, net.params, calibration_x[start : start + batch_size])
        if collected is None:
            collected = [[] for _ in outs]
        for i, o in enumerate(outs):
            collected[i].append(o.reshape(-1))
    scales, degenerate = {}, []
    for i, layer in enumerate(net.spec.layers):
        if isinstance(layer, Flatten):
            continue
        values = np.concatenate(collected[i])
        if not np.any(values):
            warnings.warn(f"layer {i} ({layer.kind}) produced only zero activations; using scale 1",
                          RuntimeWarning, stacklevel=2)
            scales[i] = 1.0
            degenerate.append(i)
            continue
        scales[i] = max(float(np.percentile(values, percentile)), MIN_SCALE)
    return ScaleReport(scales, float(percentile), int(len(calibration_x)), degenerate)


# -- connection tables ------------------------------------------------------------------


@dataclass
class ConnectionTable:
    """Synapse rows ``(pre, post, weight, delay_ms)`` sorted by (pre, post)."""

    pre: np.ndarray
    post: np.ndarray
    weight: np.ndarray
    delay_ms: np.ndarray
    n_pre: int
    n_post: int

    def __post_init__(self):
        self.pre = np.asarray(self.pre, dtype=np.int64)
        self.post = np.asarray(self.post, dtype=np.int64)
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.delay_ms = np.asarray(self.delay_ms, dtype=np.float64)
        if not (len(self.pre) == len(self.post) == len(self.weight) == len(self.delay_ms)):
            raise ConnectionFormatError("connection columns differ in length")
        if len(self.pre) and (self.pre.min() < 0 or self.pre.max() >= self.n_pre):
            raise ConnectionFormatError(f"pre index outside [0, {self.n_pre})")
        if len(self.post) and (self.post.min() < 0 or self.post.max() >= self.n_post):
            raise ConnectionFormatError(f"post index outside [0, {self.n_post})")
        if len(self.delay_ms) and self.delay_ms.min() <= 0:
            raise ConnectionFormatError("delays must be positive")
        order = np.lexsort((self.post, self.pre))
        self.pre, self.post = self.pre[order], self.post[order]
        self.weight, self.delay_ms = self.weight[order], self.delay_ms[order]

    def __len__(self):
        return len(self.pre)

    def delay_steps(self, dt_ms):
        steps = np.rint(self.delay_ms / dt_ms).astype(np.int64)
        if len(steps) and (steps.min() < 1 or not np.allclose(steps * dt_ms, self.delay_ms, rtol=0, atol=1e-9)):
            raise ConnectionFormatError(f"delays must be positive multiples of dt = {dt_ms} ms")
        return steps

    def equals(self, other):
        return (self.n_pre == other.n_pre and self.n_post == other.n_post
                and np.array_equal(self.pre, other.pre) and np.array_equal(self.post, other.post)
                and np.array_equal(self.weight, other.weight) and np.array_equal(self.delay_ms, other.delay_ms))


def _format_number(x):
    """Shortest decimal that round-trips to the same double; integral values without '.0'."""
    x = float(x)
    if x.is_integer() and abs(x) < 1e16:
        return str(int(x))
    return repr(x)


def format_table(table):
    lines = [f"{p} {q} {_format_number(w)} {_format_number(d)}\n"
             for p, q, w, d in zip(table.pre.tolist(), table.post.tolist(), table.weight.tolist(),
                                   table.delay_ms.tolist())]
    return "".join(lines)


def parse_table(text, n_pre, n_post, source="<table>"):
    pre, post, weight, delay = [], [], [], []
    for lineno, line in enumerate(text.split("\n"), start=1):
        if not line.strip():
            continue
        cols = line.split()
        if len(cols) != 4:
            raise ConnectionFormatError(f"{source}:{lineno}: expected 4 columns, got {len(cols)}")
        try:
            p, q, w, d = int(cols[0]), int(cols[1]), float(cols[2]), float(cols[3])
        except ValueError:
            raise ConnectionFormatError(f"{source}:{lineno}: malformed row {line!r}") from None
        if not 0 <= p < n_pre:
            raise ConnectionFormatError(f"{source}:{lineno}: pre index {p} outside [0, {n_pre})")
        if not 0 <= q < n_post:
            raise ConnectionFormatError(f"{source}:{lineno}: post index {q} outside [0, {n_post})")
        if not np.isfinite(w) or not d > 0:
            raise ConnectionFormatError(f"{source}:{lineno}: weight must be finite and delay positive")
        pre.append(p)
        post.append(q)
        weight.append(w)
        delay.append(d)
    return ConnectionTable(pre, post, weight, delay, n_pre, n_post)


# -- spiking network ------------------------------------------------------------------------


@dataclass
class Population:
    size: int
    threshold: float = 1.0
    reset_mode: str = "subtract"
    shape: tuple = ()
    name: str = ""

    def __post_init__(self):
        if self.threshold <= 0:
            raise ConversionError(f"population {self.name!r}: threshold must be positive")
        if not self.shape:
            self.shape = (self.size,)


@dataclass
class Projection:
    """Connections from population ``l`` to ``l+1``.

    ``kind`` is "conv", "pool" or "dense" for structured projections (one
    uniform delay) or "table" for an imported synapse list. ``bias`` is the
    constant current injected into each post neuron per step at unit drive.
    """

    kind: str
    pre_shape: tuple
    post_shape: tuple
    bias: np.ndarray
    weights: np.ndarray = None
    stride: int = 1
    padding: int = 0
    size: int = 2
    pool_weight: float = 0.0
    delay_steps: int = 1
    table: ConnectionTable = None
    dt_ms: float = 1.0

    @property
    def n_pre(self):
        return int(np.prod(self.pre_shape))

    @property
    def n_post(self):
        return int(np.prod(self.post_shape))

    def delay_groups(self):
        """``[(delay_steps, callable spikes[S, n_pre] -> current[S, n_post])]``."""
        if self.kind == "table":
            steps = self.table.delay_steps(self.dt_ms)
            groups = []
            for d in np.unique(steps):
                sel = steps == d
                mat = sp.csr_matrix((self.table.weight[sel], (self.table.post[sel], self.table.pre[sel])),
                                    shape=(self.n_post, self.n_pre))
                groups.append((int(d), lambda s, m=mat: np.asarray((m @ s.T).T)))
            return groups
        return [(self.delay_steps, self._structured)]

    def _structured(self, s):
        n = s.shape[0]
        if self.kind == "conv":
            x = s.reshape((n,) + tuple(self.pre_shape))
            zero = np.zeros(self.weights.shape[0])
            return kernels.conv2d_forward(x, self.weights, zero, self.stride, self.padding).reshape(n, -1)
        if self.kind == "pool":
            x = s.reshape((n,) + tuple(self.pre_shape))
            out = kernels.avg_pool_forward(x, self.size, self.stride)
            return (out * (self.size * self.size * self.pool_weight)).reshape(n, -1)
        return kernels.dense_propagate(s, self.weights)

    def analog(self, x):
        """Rate-model response ``W x + bias`` for a batch ``[S, n_pre]``."""
        total = np.zeros((x.shape[0], self.n_post))
        for _, fn in self.delay_groups():
            total += fn(x)
        return total + self.bias

    def to_table(self):
        """Unroll into explicit synapse rows."""
        if self.kind == "table":
            return self.table
        delay = self.delay_steps * self.dt_ms
        if self.kind == "dense":
            m, n = self.weights.shape
            post, pre = np.meshgrid(np.arange(m), np.arange(n), indexing="ij")
            return ConnectionTable(pre.ravel(), post.ravel(), self.weights.ravel(),
                                   np.full(m * n, delay), n, m)
        c, h, w = self.pre_shape
        k, ho, wo = self.post_shape
        if self.kind == "conv":
            kh, kw = self.weights.shape[2:]
            f, ch, i, j, oi, oj = np.meshgrid(np.arange(k), np.arange(c), np.arange(kh), np.arange(kw),
                                              np.arange(ho), np.arange(wo), indexing="ij")
            y = oi * self.stride + i - self.padding
            x = oj * self.stride + j - self.padding
            ok = (y >= 0) & (y < h) & (x >= 0) & (x < w)
            pre = (ch * h + y) * w + x
            post = (f * ho + oi) * wo + oj
            weight = self.weights[f, ch, i, j]
        else:
            ch, oi, oj, i, j = np.meshgrid(np.arange(c), np.arange(ho), np.arange(wo), np.arange(self.size),
                                           np.arange(self.size), indexing="ij")
            y = oi * self.stride + i
            x = oj * self.stride + j
            ok = np.ones(y.shape, dtype=bool)
            pre = (ch * h + y) * w + x
            post = (ch * ho + oi) * wo + oj
            weight = np.full(y.shape, self.pool_weight)
        return ConnectionTable(pre[ok], post[ok], weight[ok], np.full(int(ok.sum()), delay),
                               self.n_pre, self.n_post)


@dataclass
class SpikingNetwork:
    populations: list
    projections: list
    input_shape: tuple
    dt_ms: float = 1.0

    def __post_init__(self):
        if len(self.projections) != len(self.populations) - 1:
            raise ConversionError("need exactly one projection between consecutive populations")
        for l, proj in enumerate(self.projections):
            if proj.n_pre != self.populations[l].size or proj.n_post != self.populations[l + 1].size:
                raise ConversionError(f"projection {l} sizes do not match populations {l} and {l + 1}")

    @property
    def layer_names(self):
        return [p.name for p in self.populations]

    def thresholds(self, l):
        return np.full(self.populations[l].size, self.populations[l].threshold)

    def analog_forward(self, x):
        """Rate-model activations per population for images ``[S, C, H, W]``.

        Hidden populations are rectified; the output population is returned raw.
        This is the normalized ANN the spiking rates approximate.
        """
        a = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
        outs = [a]
        for l, proj in enumerate(self.projections):
            z = proj.analog(a)
            a = z if l == len(self.projections) - 1 else np.maximum(z, 0.0)
            outs.append(a)
        return outs

    def tables(self):
        return [proj.to_table() for proj in self.projections]

    # persistence in the compact (structured) form
    def save(self, path):
        records, meta_proj = {}, []
        for l, proj in enumerate(self.projections):
            records[f"proj{l}_bias"] = proj.bias
            entry = {"kind": proj.kind, "pre_shape": list(proj.pre_shape), "post_shape": list(proj.post_shape),
                     "stride": proj.stride, "padding": proj.padding, "size": proj.size,
                     "pool_weight": proj.pool_weight, "delay_steps": proj.delay_steps}
            if proj.kind in ("conv", "dense"):
                records[f"proj{l}_weights"] = proj.weights
            if proj.kind == "table":
                t = proj.table
                records[f"proj{l}_pre"] = t.pre.astype(np.float64)
                records[f"proj{l}_post"] = t.post.astype(np.float64)
                records[f"proj{l}_weight"] = t.weight
                records[f"proj{l}_delay"] = t.delay_ms
            meta_proj.append(entry)
        meta = {"dt_ms": self.dt_ms, "input_shape": list(self.input_shape), "projections": meta_proj,
                "populations": [{"size": p.size, "threshold": p.threshold, "reset_mode": p.reset_mode,
                                 "shape": list(p.shape), "name": p.name} for p in self.populations]}
        npz.write_npz(records, path, text_records={"snn.json": json.dumps(meta, sort_keys=True)})

    @classmethod
    def load(cls, path):
        arrays, texts = npz.read_npz_archive(path)
        meta = json.loads(texts["snn.json"])
        pops = [Population(p["size"], p["threshold"], p["reset_mode"], tuple(p["shape"]), p["name"])
                for p in meta["populations"]]
        projs = []
        for l, e in enumerate(meta["projections"]):
            table = None
            if e["kind"] == "table":
                table = ConnectionTable(arrays[f"proj{l}_pre"].astype(np.int64),
                                        arrays[f"proj{l}_post"].astype(np.int64), arrays[f"proj{l}_weight"],
                                        arrays[f"proj{l}_delay"], pops[l].size, pops[l + 1].size)
            projs.append(Projection(e["kind"], tuple(e["pre_shape"]), tuple(e["post_shape"]),
                                    arrays[f"proj{l}_bias"], arrays.get(f"proj{l}_weights"), e["stride"],
                                    e["padding"], e["size"], e["pool_weight"], e["delay_steps"], table,
                                    meta["dt_ms"]))
        return cls(pops, projs, tuple(meta["input_shape"]), meta["dt_ms"])


# -- conversion ----------------------------------------------------------------------------


def convert_network(net, scales, dt_ms=1.0, delay_steps=1):
    """Build the spiking counterpart of ``net`` normalized by ``scales``."""
    spec = net.spec
    out_shapes = spec.output_shapes()
    missing = [i for i, layer in enumerate(spec.layers) if not isinstance(layer, Flatten) and i not in scales.scales]
    if missing:
        raise ConversionError(f"scale report has no entry for layers {missing}; was it computed for this network?")
    pops = [Population(int(np.prod(spec.input_shape)), shape=spec.input_shape, name="input")]
    projs = []
    prev_scale = 1.0
    prev_shape = spec.input_shape
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Flatten):
            prev_shape = out_shapes[i]
            continue
        lam = scales.scales[i]
        ratio = prev_scale / lam
        p = net.params[i]
        post_shape = out_shapes[i]
        if isinstance(layer, Conv2d):
            bias = np.repeat(p["bias"] / lam, post_shape[1] * post_shape[2])
            proj = Projection("conv", prev_shape, post_shape, bias, p["weights"] * ratio, layer.stride,
                              layer.padding, delay_steps=delay_steps, dt_ms=dt_ms)
        elif isinstance(layer, AvgPool):
            proj = Projection("pool", prev_shape, post_shape, np.zeros(int(np.prod(post_shape))), None,
                              layer.step, 0, layer.size, ratio / (layer.size * layer.size),
                              delay_steps=delay_steps, dt_ms=dt_ms)
        elif isinstance(layer, Dense):
            proj = Projection("dense", (int(np.prod(prev_shape)),), post_shape, p["bias"] / lam,
                              p["weights"] * ratio, delay_steps=delay_steps, dt_ms=dt_ms)
        else:
            raise ConversionError(f"layer {i}: unsupported layer kind {type(layer).__name__}")
        projs.append(proj)
        pops.append(Population(int(np.prod(post_shape)), 1.0, "subtract", post_shape, f"{layer.kind}_{i}"))
        prev_scale = lam
        prev_shape = post_shape
    return SpikingNetwork(pops, projs, spec.input_shape, dt_ms)


def spiking_layer_map(spec):
    """ANN layer index for every non-input population, in order."""
    return [i for i, layer in enumerate(spec.layers) if not isinstance(layer, Flatten)]


# -- connection files -------------------------------------------------------------------------


def export_connections(snn, dir_path):
    """Write ``layer_<l>_to_<l+1>.txt`` for every projection plus ``populations.txt``."""
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    for l, table in enumerate(snn.tables()):
        (d / f"layer_{l}_to_{l + 1}.txt").write_text(format_table(table), encoding="ascii", newline="\n")
    lines = [f"{l} {p.size} {_format_number(p.threshold)}\n" for l, p in enumerate(snn.populations)]
    (d / "populations.txt").write_text("".join(lines), encoding="ascii", newline="\n")
    # biases are not part of the four-column format; kept alongside for lossless re-import
    bias = {f"bias_{l + 1}": proj.bias for l, proj in enumerate(snn.projections)}
    npz.write_npz(bias, d / "biases.npz")
    return d


def import_connections(dir_path, layer_sizes=None, dt_ms=1.0):
    """Rebuild a table-backed :class:`SpikingNetwork` from exported files.

    ``layer_sizes`` defaults to the sizes listed in ``populations.txt``.
    """
    d = Path(dir_path)
    thresholds = {}
    pop_file = d / "populations.txt"
    if pop_file.exists():
        for lineno, line in enumerate(pop_file.read_text(encoding="ascii").split("\n"), start=1):
            if not line.strip():
                continue
            cols = line.split()
            if len(cols) != 3:
                raise ConnectionFormatError(f"{pop_file}:{lineno}: expected 'layer_index size threshold'")
            thresholds[int(cols[0])] = (int(cols[1]), float(cols[2]))
    if layer_sizes is None:
        if not thresholds:
            raise ConnectionFormatError(f"{d}: no populations.txt and no layer sizes given")
        layer_sizes = [thresholds[l][0] for l in sorted(thresholds)]
    layer_sizes = list(layer_sizes)
    biases = npz.read_npz(d / "biases.npz") if (d / "biases.npz").exists() else {}
    pops = [Population(n, thresholds.get(l, (n, 1.0))[1], name=f"layer_{l}") for l, n in enumerate(layer_sizes)]
    projs = []
    for l in range(len(layer_sizes) - 1):
        f = d / f"layer_{l}_to_{l + 1}.txt"
        if not f.exists():
            raise ConnectionFormatError(f"{f}: missing connection file")
        table = parse_table(f.read_text(encoding="ascii"), layer_sizes[l], layer_sizes[l + 1], str(f))
        table.delay_steps(dt_ms)
        bias = biases.get(f"bias_{l + 1}", np.zeros(layer_sizes[l + 1]))
        projs.append(Projection("table", (layer_sizes[l],), (layer_sizes[l + 1],), bias, table=table, dt_ms=dt_ms))
    return SpikingNetwork(pops, projs, (layer_sizes[0],), dt_ms)
