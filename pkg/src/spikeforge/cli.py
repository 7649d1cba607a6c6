"""Command-line pipeline: prepare-data, train-ann, convert, export-connections,
simulate, stdp-train and report.

Every stage reads and writes fixed artifact names inside the work directory,
so stages can be re-run independently. Exit status is 0 on success, 2 for a
missing prerequisite or invalid configuration, and 1 for internal failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from spikeforge import backend
from spikeforge.config import SCHEMA, ConfigError, parse_config

log = logging.getLogger("spikeforge")

DATASET = "dataset.npz"
ANN = "ann.npz"
SNN = "snn.npz"
SCALES = "scales.json"
CONNECTIONS = "connections"
REPORTS = "reports"
STDP_DIR = "stdp"
EVALUATION_JSON = "evaluation.json"
EVALUATION_CSV = "evaluation.csv"

# artifact -> stage that writes it
PRODUCER = {DATASET: "prepare-data", ANN: "train-ann", SNN: "convert",
            f"{REPORTS}/{EVALUATION_JSON}": "simulate"}

PRIMARY_SECTION = {
    "prepare-data": "data",
    "train-ann": "ann",
    "convert": "conversion",
    "export-connections": "conversion",
    "simulate": "simulation",
    "stdp-train": "stdp",
    "report": "simulation",
}


class MissingPrerequisite(RuntimeError):
    def __init__(self, path, stage):
        super().__init__(f"{path} not found; run `spikeforge {stage}` first")
        self.stage = stage


def _require(workdir, name):
    path = workdir / name
    if not path.exists():
        raise MissingPrerequisite(path, PRODUCER[name])
    return path


def _write_text(path, text):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="\n")


def _dump_json(obj):
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


# -- stages ------------------------------------------------------------------------------


def cmd_prepare_data(cfg, workdir):
    from spikeforge import dataset, synthetic

    d = cfg["data"]
    size = d["image_size"]
    if d["source"] == "directory":
        root = cfg["paths"]["dataset_root"]
        if not root:
            raise ConfigError("[paths] dataset_root is required when [data] source = directory")
        ds = dataset.load_image_dir(root, d["manifest"] or None)
    elif d["source"] == "bars":
        ds = synthetic.make_bar_dataset(d["synthetic_samples"], size=size, seed=d["synthetic_seed"])
    else:
        per_class = max(2, d["synthetic_samples"] // 10)
        ds = synthetic.make_gesture_like(per_class, size=size, seed=d["synthetic_seed"])
    if d["max_samples"]:
        ds = dataset.stratified_subset(ds, d["max_samples"], d["split_seed"])
    ds = dataset.preprocess(ds, size, size)
    split = dataset.stratified_split(ds, d["test_fraction"], d["split_seed"], d["by_subject"])
    workdir.mkdir(parents=True, exist_ok=True)
    split.save(workdir / DATASET)
    print(f"prepare-data: {len(split.train)} train / {len(split.test)} test samples, "
          f"{ds.n_classes} classes, {size}x{size} -> {workdir / DATASET}")


def _load_split(workdir):
    from spikeforge.dataset import SplitDataset

    return SplitDataset.load(_require(workdir, DATASET))


def cmd_train_ann(cfg, workdir):
    from spikeforge.nn import train

    split = _load_split(workdir)
    x, y = split.train.array(), split.train.labels
    tx, ty = split.test.array(), split.test.labels
    n_classes = max(split.train.n_classes, int(max(y.max(), ty.max() if len(ty) else 0)) + 1)
    try:
        spec = cfg.network_spec(x.shape[1:], n_classes)
    except ValueError as exc:
        raise ConfigError(f"[ann] layers: {exc}") from None
    net = train(spec, (x, y), cfg.train_hyper(), test_set=(tx, ty))
    net.save(workdir / ANN)
    print(f"train-ann: train accuracy {net.meta['train_accuracy']:.4f}, "
          f"test accuracy {net.meta.get('test_accuracy', float('nan')):.4f} -> {workdir / ANN}")


def cmd_convert(cfg, workdir):
    from spikeforge.converter import compute_activation_scales, convert_network
    from spikeforge.nn import TrainedNetwork

    net = TrainedNetwork.load(_require(workdir, ANN))
    split = _load_split(workdir)
    x = split.train.array()
    n_cal = cfg.get("conversion", "calibration_samples")
    if n_cal:
        x = x[:n_cal]
    scales = compute_activation_scales(net, x, cfg.get("conversion", "percentile"))
    snn = convert_network(net, scales, dt_ms=cfg.get("simulation", "dt_ms"))
    snn.save(workdir / SNN)
    _write_text(workdir / SCALES, _dump_json(scales.to_dict()))
    print(f"convert: {len(snn.populations)} populations, scales "
          + ", ".join(f"{k}:{v:.4g}" for k, v in sorted(scales.scales.items())) + f" -> {workdir / SNN}")


def cmd_export_connections(cfg, workdir):
    from spikeforge.converter import SpikingNetwork, export_connections

    snn = SpikingNetwork.load(_require(workdir, SNN))
    out = export_connections(snn, workdir / CONNECTIONS)
    n = sum(len(t) for t in snn.tables())
    print(f"export-connections: {len(snn.projections)} tables, {n} synapses -> {out}")


def _test_subset(cfg, split):
    tx, ty = split.test.array(), split.test.labels
    n = cfg.get("simulation", "test_samples")
    return (tx[:n], ty[:n]) if n else (tx, ty)


def cmd_simulate(cfg, workdir):
    from spikeforge.converter import SpikingNetwork
    from spikeforge.nn import TrainedNetwork
    from spikeforge.sim import run_evaluation

    snn = SpikingNetwork.load(_require(workdir, SNN))
    sim = cfg.sim_config()
    ann = TrainedNetwork.load(_require(workdir, ANN)) if sim.evaluate_ann else None
    tx, ty = _test_subset(cfg, _load_split(workdir))
    report = run_evaluation(snn, tx, ty, sim, ann=ann, workers=cfg.get("simulation", "workers"))
    _write_text(workdir / REPORTS / EVALUATION_JSON, report.to_json())
    _write_text(workdir / REPORTS / EVALUATION_CSV, report.to_csv())
    ann_txt = "" if report.ann_accuracy is None else f", ANN {report.ann_accuracy:.4f}"
    print(f"simulate: SNN accuracy {report.mean_accuracy:.4f} +/- {report.std_accuracy:.4f} over "
          f"{len(report.per_run_accuracy)} runs{ann_txt} -> {workdir / REPORTS}")


def cmd_report(cfg, workdir):
    from spikeforge.converter import SpikingNetwork
    from spikeforge.diagnostics import emit_report, fidelity_report
    from spikeforge.nn import TrainedNetwork
    from spikeforge.sim import EvaluationReport

    evaluation = EvaluationReport.from_dict(
        json.loads(_require(workdir, f"{REPORTS}/{EVALUATION_JSON}").read_text(encoding="utf-8")))
    net = TrainedNetwork.load(_require(workdir, ANN))
    snn = SpikingNetwork.load(_require(workdir, SNN))
    tx, _ = _test_subset(cfg, _load_split(workdir))
    tx = tx[: cfg.get("simulation", "correlation_samples")]
    corr = fidelity_report(net, snn, tx, cfg.sim_config())
    files = emit_report(corr, evaluation, workdir / REPORTS)
    for c in corr.layers:
        print(f"report: {c.name:>12s}  r = {'undefined' if c.r is None else f'{c.r:.4f}'}")
    print(f"report: wrote {', '.join(p.name for p in files)} -> {workdir / REPORTS}")


def cmd_stdp_train(cfg, workdir):
    from spikeforge.stdp import train_unsupervised

    split = _load_split(workdir)
    x, y = split.train.array(), split.train.labels
    n = cfg.get("stdp", "train_samples")
    if n:
        x, y = x[:n], y[:n]
    n_classes = max(split.train.n_classes, int(y.max()) + 1)
    model = train_unsupervised(x, y, cfg.stdp_arch(), cfg.stdp_params(), cfg.get("stdp", "epochs"),
                               cfg.stdp_sim_config(), n_classes=n_classes)
    out = model.export(workdir / STDP_DIR)
    tx, ty = split.test.array(), split.test.labels
    result = {"train_accuracy": model.accuracy(x, y), "test_accuracy": model.accuracy(tx, ty) if len(tx) else None,
              "arch": cfg.stdp_arch(), "epochs": cfg.get("stdp", "epochs"), "history": model.history}
    _write_text(out / EVALUATION_JSON, _dump_json(result))
    test_txt = "n/a" if result["test_accuracy"] is None else f"{result['test_accuracy']:.4f}"
    print(f"stdp-train: train accuracy {result['train_accuracy']:.4f}, test accuracy {test_txt} -> {out}")


COMMANDS = {
    "prepare-data": (cmd_prepare_data, "load, resize and split the image dataset"),
    "train-ann": (cmd_train_ann, "train the convolutional network"),
    "convert": (cmd_convert, "normalize and convert the trained network to spiking form"),
    "export-connections": (cmd_export_connections, "write per-layer connection tables"),
    "simulate": (cmd_simulate, "evaluate the spiking network on the test set"),
    "stdp-train": (cmd_stdp_train, "train dense winner-take-all layers with STDP"),
    "report": (cmd_report, "emit correlation and accuracy reports"),
}


# -- argument parsing ------------------------------------------------------------------------


def _flag(name):
    return "--" + name.replace("_", "-")


def _sections_by_key():
    owners = {}
    for section, keys in SCHEMA.items():
        for key in keys:
            owners.setdefault(key, []).append(section)
    return owners


def build_parser():
    parser = argparse.ArgumentParser(prog="spikeforge", description=__doc__.split("\n\n")[0])
    parser.add_argument("--backend-info", action="store_true", help="print the active kernel backend and exit")
    sub = parser.add_subparsers(dest="command", metavar="command")
    owners = _sections_by_key()
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("-c", "--config", help="INI configuration file")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        primary = PRIMARY_SECTION[name]
        for section, keys in SCHEMA.items():
            group = p.add_argument_group(f"[{section}]")
            for key in keys:
                flags = [_flag(f"{section}_{key}")]
                bare_owner = primary if primary in owners[key] else (owners[key][0] if len(owners[key]) == 1 else None)
                if bare_owner == section:
                    flags.insert(0, _flag(key))
                group.add_argument(*flags, dest=f"{section}.{key}", metavar="VALUE", default=None,
                                   help=f"default {SCHEMA[section][key][1]!r}")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.backend_info:
        print(f"backend: {backend.BACKEND}")
        return 0
    if not args.command:
        parser.print_help(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    overrides = {}
    for dest, value in vars(args).items():
        if "." in dest and value is not None:
            section, key = dest.split(".", 1)
            overrides[(section, key)] = value
    try:
        cfg = parse_config(args.config, overrides)
        fn = COMMANDS[args.command][0]
        np.seterr(over="ignore", under="ignore")
        fn(cfg, cfg.workdir)
    except MissingPrerequisite as exc:
        print(f"spikeforge {args.command}: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"spikeforge {args.command}: configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported, mapped to exit status 1
        log.debug("internal failure", exc_info=True)
        print(f"spikeforge {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
