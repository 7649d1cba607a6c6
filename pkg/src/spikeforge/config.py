"""INI pipeline configuration with typed, validated sections.

Precedence for every key is: command-line flag > config file > default.
``SPIKEFORGE_WORKDIR`` sits between the flag and the file for
``[paths] workdir``.
"""
from __future__ import annotations

import configparser
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

from spikeforge.nn import AvgPool, Conv2d, Dense, Flatten, NetworkSpec, TrainHyper
from spikeforge.sim import SimConfig, SimConfigError
from spikeforge.stdp import StdpError, StdpParams

WORKDIR_ENV = "SPIKEFORGE_WORKDIR"

# section -> key -> (type, default)
SCHEMA = {
    "paths": {
        "dataset_root": (str, ""),
        "workdir": (str, "work"),
    },
    "data": {
        "source": (str, "directory"),
        "manifest": (str, ""),
        "image_size": (int, 32),
        "test_fraction": (float, 0.2),
        "split_seed": (int, 0),
        "by_subject": (bool, False),
        "max_samples": (int, 0),
        "synthetic_samples": (int, 300),
        "synthetic_seed": (int, 0),
    },
    "ann": {
        "layers": (str, "default"),
        "lr": (float, 0.01),
        "epochs": (int, 10),
        "batch_size": (int, 32),
        "seed": (int, 0),
    },
    "conversion": {
        "percentile": (float, 99.9),
        "calibration_samples": (int, 0),
    },
    "simulation": {
        "duration_ms": (float, 200.0),
        "dt_ms": (float, 1.0),
        "input_rate_hz": (float, 1000.0),
        "batch_size": (int, 8),
        "num_runs": (int, 20),
        "evaluate_ann": (bool, True),
        "seed": (int, 0),
        "workers": (int, 1),
        "test_samples": (int, 0),
        "correlation_samples": (int, 20),
    },
    "stdp": {
        "a_plus": (float, 0.01),
        "a_minus": (float, 0.012),
        "tau_plus_ms": (float, 20.0),
        "tau_minus_ms": (float, 20.0),
        "w_min": (float, 0.0),
        "w_max": (float, 1.0),
        "threshold": (float, 0.5),
        "theta_plus": (float, 0.05),
        "theta_decay_ms": (float, 1e4),
        "init_max": (float, 0.3),
        "arch": (str, "100"),
        "epochs": (int, 1),
        "duration_ms": (float, 100.0),
        "input_rate_hz": (float, 100.0),
        "seed": (int, 0),
        "train_samples": (int, 0),
    },
}

SOURCES = ("directory", "bars", "gesture-like")


class ConfigError(ValueError):
    def __init__(self, message, path=None, line=None):
        where = f"{path}:{line}: " if path is not None and line is not None else (f"{path}: " if path else "")
        super().__init__(where + message)
        self.line = line


def _convert(kind, raw):
    if kind is bool:
        v = raw.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind is str:
        return raw.strip()
    return kind(raw.strip())


def _key_lines(text):
    """Map (section, key) to its 1-based line number in ``text``."""
    lines, section = {}, None
    for lineno, line in enumerate(text.splitlines(), start=1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            lines[(section, None)] = lineno
            continue
        m = re.match(r"\s*([^#;=:\s][^=:]*?)\s*[=:]", line)
        if m and section is not None:
            lines[(section, m.group(1).strip().lower())] = lineno
    return lines


@dataclass
class PipelineConfig:
    values: dict
    path: str = None
    origin: dict = field(default_factory=dict)

    def __getitem__(self, section):
        return self.values[section]

    def get(self, section, key):
        return self.values[section][key]

    @property
    def workdir(self):
        return Path(self.values["paths"]["workdir"])

    def sim_config(self):
        s = self.values["simulation"]
        return SimConfig(s["duration_ms"], s["dt_ms"], s["input_rate_hz"], s["batch_size"], s["num_runs"],
                         s["evaluate_ann"], s["seed"])

    def train_hyper(self):
        a = self.values["ann"]
        return TrainHyper(a["lr"], a["epochs"], a["batch_size"], a["seed"])

    def stdp_params(self):
        s = self.values["stdp"]
        return StdpParams(s["a_plus"], s["a_minus"], s["tau_plus_ms"], s["tau_minus_ms"], s["w_min"], s["w_max"],
                          s["threshold"], s["theta_plus"], s["theta_decay_ms"], s["init_max"])

    def stdp_sim_config(self):
        s = self.values["stdp"]
        return SimConfig(duration_ms=s["duration_ms"], dt_ms=self.values["simulation"]["dt_ms"],
                         input_rate_hz=s["input_rate_hz"], seed=s["seed"])

    def stdp_arch(self):
        return parse_arch(self.values["stdp"]["arch"])

    def network_spec(self, input_shape, n_classes):
        return parse_layers(self.values["ann"]["layers"], input_shape, n_classes)


def parse_arch(text):
    try:
        arch = [int(tok) for tok in re.split(r"[\s,]+", text.strip()) if tok]
    except ValueError:
        raise ValueError(f"arch must list positive layer sizes, got {text!r}") from None
    if not arch or min(arch) < 1:
        raise ValueError(f"arch must list positive layer sizes, got {text!r}")
    return arch


def parse_layers(text, input_shape, n_classes):
    """``default`` or ``;``-separated layers, e.g. ``conv 4 3 1 1; pool 2; flatten; dense 16; dense 2``.

    conv takes ``filters kernel [stride [padding]]``, pool ``size [stride]``,
    dense ``units``.
    """
    text = text.strip()
    if text == "default":
        c, h, w = input_shape
        if h != w:
            raise ValueError(f"the default network needs square input, got {h}x{w}")
        return NetworkSpec.default(h, n_classes, c)
    layers = []
    for part in text.split(";"):
        tok = part.split()
        if not tok:
            continue
        kind, args = tok[0].lower(), tok[1:]
        try:
            nums = [int(a) for a in args]
        except ValueError:
            raise ValueError(f"non-integer argument in layer {part.strip()!r}") from None
        if kind == "conv" and 2 <= len(nums) <= 4:
            layers.append(Conv2d(nums[0], nums[1], nums[1], *nums[2:]))
        elif kind == "pool" and 1 <= len(nums) <= 2:
            layers.append(AvgPool(*nums))
        elif kind == "flatten" and not nums:
            layers.append(Flatten())
        elif kind == "dense" and len(nums) == 1:
            layers.append(Dense(nums[0]))
        else:
            raise ValueError(f"cannot parse layer {part.strip()!r}")
    return NetworkSpec(tuple(input_shape), layers)


def defaults():
    return {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}


def _validate(values, where):
    """Check cross-key and module invariants; ``where(section, key)`` gives an error location."""
    def fail(section, key, message):
        path, line = where(section, key)
        raise ConfigError(f"[{section}] {key}: {message}", path, line)

    d = values["data"]
    if d["source"] not in SOURCES:
        fail("data", "source", f"must be one of {', '.join(SOURCES)}")
    if d["image_size"] < 8:
        fail("data", "image_size", "must be at least 8")
    if not 0 < d["test_fraction"] < 1:
        fail("data", "test_fraction", "must lie in (0, 1)")
    for key in ("max_samples",):
        if d[key] < 0:
            fail("data", key, "must be >= 0 (0 means all)")
    if d["synthetic_samples"] < 4:
        fail("data", "synthetic_samples", "must be at least 4")
    a = values["ann"]
    if not a["lr"] > 0:
        fail("ann", "lr", "must be positive")
    if a["epochs"] < 0:
        fail("ann", "epochs", "must be >= 0")
    if a["batch_size"] < 1:
        fail("ann", "batch_size", "must be positive")
    c = values["conversion"]
    if not 50 < c["percentile"] <= 100:
        fail("conversion", "percentile", "must lie in (50, 100]")
    if c["calibration_samples"] < 0:
        fail("conversion", "calibration_samples", "must be >= 0 (0 means all)")
    s = values["simulation"]
    for key in ("duration_ms", "dt_ms", "input_rate_hz", "batch_size", "num_runs", "workers", "correlation_samples"):
        if not s[key] > 0:
            fail("simulation", key, f"must be positive, got {s[key]}")
    if s["test_samples"] < 0:
        fail("simulation", "test_samples", "must be >= 0 (0 means all)")
    try:
        SimConfig(s["duration_ms"], s["dt_ms"], s["input_rate_hz"], s["batch_size"], s["num_runs"],
                  s["evaluate_ann"], s["seed"])
    except SimConfigError as exc:
        fail("simulation", "duration_ms", str(exc))
    t = values["stdp"]
    try:
        StdpParams(t["a_plus"], t["a_minus"], t["tau_plus_ms"], t["tau_minus_ms"], t["w_min"], t["w_max"],
                   t["threshold"], t["theta_plus"], t["theta_decay_ms"], t["init_max"])
    except StdpError as exc:
        named = [k for k in SCHEMA["stdp"] if re.search(rf"\b{k}\b", str(exc))] or ["a_plus"]
        located = [k for k in named if where("stdp", k)[1] is not None]
        fail("stdp", (located or named)[0], str(exc))
    try:
        parse_arch(t["arch"])
    except ValueError as exc:
        fail("stdp", "arch", str(exc))
    if t["epochs"] < 0:
        fail("stdp", "epochs", "must be >= 0")
    if t["train_samples"] < 0:
        fail("stdp", "train_samples", "must be >= 0 (0 means all)")
    try:
        SimConfig(duration_ms=t["duration_ms"], dt_ms=s["dt_ms"], input_rate_hz=t["input_rate_hz"])
    except SimConfigError as exc:
        fail("stdp", "duration_ms", str(exc))


def parse_config(path=None, overrides=None, env=None):
    """Read ``path`` (may be None for pure defaults) and apply ``overrides``.

    ``overrides`` maps ``(section, key)`` to a raw string or typed value.
    """
    env = os.environ if env is None else env
    values = defaults()
    origin = {}
    text = ""
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config ({exc.strerror})", path) from exc
    lines = _key_lines(text)
    parser = configparser.ConfigParser(comment_prefixes=("#", ";"), inline_comment_prefixes=("#",),
                                       interpolation=None, strict=True, empty_lines_in_values=False)
    try:
        parser.read_string(text, source=str(path))
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("key outside of any [section]", path, exc.lineno) from None
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0], path, getattr(exc, "lineno", None)) from None
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]", path, lines.get((section, None)))
        for key, raw in parser.items(section):
            line = lines.get((section, key))
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]", path, line)
            kind = SCHEMA[section][key][0]
            try:
                values[section][key] = _convert(kind, raw)
            except ValueError:
                raise ConfigError(f"[{section}] {key}: cannot parse {raw.strip()!r} as {kind.__name__}",
                                  path, line) from None
            origin[(section, key)] = ("file", line)
    if env.get(WORKDIR_ENV):
        values["paths"]["workdir"] = env[WORKDIR_ENV]
        origin[("paths", "workdir")] = ("env", None)
    for (section, key), raw in (overrides or {}).items():
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown setting {section}.{key}")
        kind = SCHEMA[section][key][0]
        try:
            values[section][key] = _convert(kind, raw) if isinstance(raw, str) else kind(raw)
        except ValueError:
            raise ConfigError(f"--{section}-{key.replace('_', '-')}: cannot parse {raw!r} as {kind.__name__}") \
                from None
        origin[(section, key)] = ("cli", None)

    def where(section, key):
        src = origin.get((section, key))
        if src is None:
            return path, None
        if src[0] == "file":
            return path, src[1]
        return f"<{src[0]}>", None

    _validate(values, where)
    return PipelineConfig(values, None if path is None else str(path), origin)
