"""Conversion-fidelity diagnostics: ANN activation vs SNN spike-rate correlation.

A correlation is ``None`` ("undefined") when either side is constant, which
is exactly what a silent spiking layer produces; it is never folded into 0.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from spikeforge.converter import spiking_layer_map
from spikeforge.nn import forward_batch
from spikeforge.sim import sample_rng, simulate_batch

log = logging.getLogger(__name__)

UNDEFINED = "undefined"


class DiagnosticsError(ValueError):
    pass


def pearson(x, y):
    """Pearson r of two equal-length vectors, or ``None`` if either is constant."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise DiagnosticsError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise DiagnosticsError(f"need at least 2 points, got {x.size}")
    if np.all(x == x[0]) or np.all(y == y[0]):
        return None
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = np.dot(dx, dx)
    syy = np.dot(dy, dy)
    if sxx == 0.0 or syy == 0.0:
        return None
    r = np.dot(dx, dy) / np.sqrt(sxx * syy)
    return float(min(1.0, max(-1.0, r)))


@dataclass
class LayerCorrelation:
    name: str
    r: float | None
    n_samples: int
    n_neurons: int

    @property
    def n(self):
        return self.n_samples * self.n_neurons


@dataclass
class CorrelationReport:
    layers: list
    per_sample_final: list
    final_points: tuple = field(default=None, repr=False)

    def r_values(self):
        return [layer.r for layer in self.layers]

    def to_dict(self):
        return {"layers": [{"name": c.name, "r": c.r, "n_samples": c.n_samples, "n_neurons": c.n_neurons}
                           for c in self.layers],
                "per_sample_final": self.per_sample_final}

    @classmethod
    def from_dict(cls, d):
        return cls([LayerCorrelation(c["name"], c["r"], c["n_samples"], c["n_neurons"]) for c in d["layers"]],
                   list(d["per_sample_final"]))


def correlation_report(ann_activations, snn_rates, names=None):
    """Pool (activation, rate) pairs over neurons and samples, per layer.

    Both arguments are ``[sample][layer] -> array``; the last layer's
    activations are expected to be logits (pre-softmax).
    """
    if len(ann_activations) != len(snn_rates):
        raise DiagnosticsError(f"{len(ann_activations)} ANN samples vs {len(snn_rates)} SNN samples")
    if not ann_activations:
        raise DiagnosticsError("no samples")
    n_layers = len(ann_activations[0])
    for s, (a, r) in enumerate(zip(ann_activations, snn_rates)):
        if len(a) != n_layers or len(r) != n_layers:
            raise DiagnosticsError(f"sample {s}: expected {n_layers} layers on both sides")
        for l, (al, rl) in enumerate(zip(a, r)):
            if np.size(al) != np.size(rl):
                raise DiagnosticsError(f"sample {s}, layer {l}: {np.size(al)} activations vs {np.size(rl)} rates")
    names = list(names) if names is not None else [f"layer_{l}" for l in range(n_layers)]
    if len(names) != n_layers:
        raise DiagnosticsError(f"{len(names)} names for {n_layers} layers")
    layers = []
    for l in range(n_layers):
        a = np.concatenate([np.ravel(sample[l]) for sample in ann_activations])
        r = np.concatenate([np.ravel(sample[l]) for sample in snn_rates])
        n_neurons = int(np.size(ann_activations[0][l]))
        layers.append(LayerCorrelation(names[l], pearson(a, r) if a.size >= 2 else None,
                                       len(ann_activations), n_neurons))
    per_sample = []
    for a, r in zip(ann_activations, snn_rates):
        per_sample.append(pearson(a[-1], r[-1]) if np.size(a[-1]) >= 2 else None)
    final = (np.concatenate([np.ravel(s[-1]) for s in ann_activations]),
             np.concatenate([np.ravel(s[-1]) for s in snn_rates]))
    report = CorrelationReport(layers, per_sample, final)
    _log_final_layer_ranking(report)
    return report


def _log_final_layer_ranking(report):
    final = report.layers[-1].r
    hidden = [c for c in report.layers[:-1] if c.r is not None and c.name.startswith("conv")]
    if final is None:
        log.warning("final layer correlation is undefined (silent or constant output)")
    elif any(c.r > final for c in hidden):
        log.info("final layer r=%.4f is below a convolution layer (%s)", final,
                 ", ".join(f"{c.name}={c.r:.4f}" for c in hidden))


def collect_activations(net, snn, images, cfg, run_index=0):
    """ANN activations and SNN rates per sample for every spiking layer.

    ANN hidden layers are taken after ReLU and the output layer as logits.
    Input spikes come from the same per-sample streams as ``run_evaluation``.
    """
    images = np.asarray(images, dtype=np.float64)
    layer_map = spiking_layer_map(net.spec)
    ann_layers = []
    for start in range(0, len(images), cfg.batch_size):
        outs = forward_batch(net.spec, net.params, images[start : start + cfg.batch_size])
        ann_layers.extend([[outs[i][b].ravel() for i in layer_map] for b in range(len(outs[0]))])
    snn_layers = []
    for start in range(0, len(images), cfg.batch_size):
        stop = min(len(images), start + cfg.batch_size)
        rngs = [sample_rng(cfg.seed, run_index, i) for i in range(start, stop)]
        for res in simulate_batch(snn, images[start:stop], cfg, rngs):
            snn_layers.append(res.rates[1:])
    names = [p.name for p in snn.populations[1:]]
    return ann_layers, snn_layers, names


def fidelity_report(net, snn, images, cfg, run_index=0):
    ann, rates, names = collect_activations(net, snn, images, cfg, run_index)
    return correlation_report(ann, rates, names)


# -- report files ----------------------------------------------------------------------


def _fmt(r):
    return UNDEFINED if r is None else repr(float(r))


def parse_r(text):
    return None if text == UNDEFINED else float(text)


def correlations_csv(report):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "r", "n"])
    for c in report.layers:
        w.writerow([c.name, _fmt(c.r), c.n])
    return buf.getvalue()


def accuracy_csv(eval_report):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "snn_acc", "ann_acc"])
    if eval_report is not None:
        ann = "" if eval_report.ann_accuracy is None else repr(float(eval_report.ann_accuracy))
        for run, acc in enumerate(eval_report.per_run_accuracy):
            w.writerow([run, repr(float(acc)), ann])
    return buf.getvalue()


def summary(report, eval_report):
    out = {"correlations": {c.name: c.r for c in report.layers},
           "per_sample_final_r": report.per_sample_final}
    defined = [r for r in report.per_sample_final if r is not None]
    out["mean_per_sample_final_r"] = float(np.mean(defined)) if defined else None
    if eval_report is not None and eval_report.per_run_accuracy:
        out.update({"snn_mean_accuracy": eval_report.mean_accuracy, "snn_std_accuracy": eval_report.std_accuracy,
                    "ann_accuracy": eval_report.ann_accuracy, "num_runs": len(eval_report.per_run_accuracy),
                    "n_samples": eval_report.n_samples})
    else:
        out.update({"snn_mean_accuracy": None, "snn_std_accuracy": None, "ann_accuracy": None, "num_runs": 0,
                    "n_samples": 0})
    return out


def scatter_svg(x, y, title="final layer", width=400, height=400, margin=40):
    """Deterministic SVG 1.1 scatter of ANN activation (x) vs spike rate (y)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)

    def span(v):
        lo, hi = (float(v.min()), float(v.max())) if v.size else (0.0, 1.0)
        return (lo, hi) if hi > lo else (lo - 0.5, hi + 0.5)

    (x0, x1), (y0, y1) = span(x), span(y)
    pw, ph = width - 2 * margin, height - 2 * margin
    px = margin + (x - x0) / (x1 - x0) * pw
    py = height - margin - (y - y0) / (y1 - y0) * ph
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="{margin}" y="{margin}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="{margin / 2:.1f}" text-anchor="middle" font-size="14">{title}</text>',
        f'<text x="{width / 2:.1f}" y="{height - 8}" text-anchor="middle" font-size="12">'
        f'ANN activation [{x0:.3g}, {x1:.3g}]</text>',
        f'<text x="12" y="{height / 2:.1f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 12 {height / 2:.1f})">SNN rate [{y0:.3g}, {y1:.3g}]</text>',
    ]
    parts.extend(f'<circle cx="{a:.2f}" cy="{b:.2f}" r="2" fill="steelblue" fill-opacity="0.6"/>'
                 for a, b in zip(px, py))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(report, eval_report, out_dir):
    """Write correlations.csv, accuracy.csv, summary.json and final_layer_scatter.svg."""
    d = Path(out_dir)
    files = {
        "correlations.csv": correlations_csv(report),
        "accuracy.csv": accuracy_csv(eval_report),
        "summary.json": json.dumps(summary(report, eval_report), sort_keys=True, indent=2) + "\n",
    }
    x, y = report.final_points if report.final_points is not None else (np.zeros(0), np.zeros(0))
    files["final_layer_scatter.svg"] = scatter_svg(x, y, title=f"{report.layers[-1].name}: ANN vs SNN")
    written = []
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DiagnosticsError(f"{d}: cannot create report directory ({exc.strerror})") from exc
    for name, text in files.items():
        path = d / name
        try:
            path.write_text(text, encoding="utf-8", newline="\n")
        except OSError as exc:
            raise DiagnosticsError(f"{path}: cannot write ({exc.strerror})") from exc
        written.append(path)
    return written


def read_correlations_csv(path):
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    return [(row["layer"], parse_r(row["r"]), int(row["n"])) for row in rows]
