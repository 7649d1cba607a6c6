"""Small CNN engine: layer ops, network topology, backprop, SGD training.

Everything runs in float64. Tensors are plain numpy arrays; single-sample
ops take ``[C, H, W]`` images, the batched internals take ``[N, C, H, W]``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from spikeforge.backend import kernels

log = logging.getLogger(__name__)


class ShapeError(ValueError):
    """Tensor dimensions do not agree."""


class ConfigurationError(ValueError):
    """Layer hyper-parameters are inconsistent with the input they receive."""


class TrainingError(RuntimeError):
    def __init__(self, message, epoch=None):
        super().__init__(message if epoch is None else f"epoch {epoch}: {message}")
        self.epoch = epoch


# -- layer descriptors -------------------------------------------------------


@dataclass(frozen=True)
class Conv2d:
    out_channels: int
    kernel_h: int = 3
    kernel_w: int = 3
    stride: int = 1
    padding: int = 0
    kind = "conv2d"


@dataclass(frozen=True)
class AvgPool:
    size: int = 2
    stride: int | None = None
    kind = "avgpool"

    @property
    def step(self):
        return self.size if self.stride is None else self.stride


@dataclass(frozen=True)
class Flatten:
    kind = "flatten"


@dataclass(frozen=True)
class Dense:
    units: int
    kind = "dense"


LAYER_KINDS = {cls.kind: cls for cls in (Conv2d, AvgPool, Flatten, Dense)}


def layer_to_dict(layer):
    return {"kind": layer.kind, **asdict(layer)}


def layer_from_dict(d):
    d = dict(d)
    kind = d.pop("kind")
    if kind not in LAYER_KINDS:
        raise ConfigurationError(f"unknown layer kind {kind!r}")
    return LAYER_KINDS[kind](**d)


def conv_output_size(n, kernel, stride, padding):
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")
    span = n + 2 * padding - kernel
    if span < 0:
        raise ConfigurationError(f"kernel {kernel} does not fit input {n} with padding {padding}")
    if span % stride:
        raise ConfigurationError(
            f"(input {n} + 2*padding {padding} - kernel {kernel}) is not divisible by stride {stride}")
    return span // stride + 1


def pool_output_size(n, size, stride):
    if size < 1 or stride < 1:
        raise ConfigurationError(f"pool size and stride must be >= 1, got {size}, {stride}")
    if n < size or (n - size) % stride:
        raise ConfigurationError(f"pool window {size}/stride {stride} does not tile input {n}")
    return (n - size) // stride + 1


# -- single-layer ops ----------------------------------------------------------


def conv2d_forward(x, weights, bias, stride=1, padding=0):
    """Cross-correlate a ``[C, H, W]`` input with ``[K, C, kh, kw]`` kernels."""
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if x.ndim != 3 or weights.ndim != 4:
        raise ShapeError(f"expected input [C,H,W] and weights [K,C,kh,kw], got {x.shape} and {weights.shape}")
    if weights.shape[1] != x.shape[0]:
        raise ShapeError(f"weights expect {weights.shape[1]} input channels, input has {x.shape[0]}")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match {weights.shape[0]} kernels")
    conv_output_size(x.shape[1], weights.shape[2], stride, padding)
    conv_output_size(x.shape[2], weights.shape[3], stride, padding)
    return kernels.conv2d_forward(x[None], weights, bias, stride, padding)[0]


def avg_pool_forward(x, size, stride=None):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"expected input [C,H,W], got {x.shape}")
    stride = size if stride is None else stride
    pool_output_size(x.shape[1], size, stride)
    pool_output_size(x.shape[2], size, stride)
    return kernels.avg_pool_forward(x[None], size, stride)[0]


def dense_forward(x, weights, bias):
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if x.ndim != 1 or weights.ndim != 2 or weights.shape[1] != x.shape[0]:
        raise ShapeError(f"dense weights {weights.shape} incompatible with input {x.shape}")
    if np.shape(bias) != (weights.shape[0],):
        raise ShapeError(f"bias shape {np.shape(bias)} does not match {weights.shape[0]} units")
    return weights @ x + bias


def relu(x):
    return np.maximum(x, 0.0)


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z):
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


# -- topology ------------------------------------------------------------------


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer list plus input shape ``(C, H, W)``.

    Conv2d and all Dense layers but the last are followed by ReLU; the last
    layer must be Dense and is followed by softmax.
    """

    input_shape: tuple
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigurationError(f"input_shape must be (C, H, W) with positive entries, got {self.input_shape}")
        if not self.layers or not isinstance(self.layers[-1], Dense):
            raise ConfigurationError("the final layer must be Dense")
        self.output_shapes()

    @classmethod
    def default(cls, input_size=32, n_classes=10, channels=1):
        return cls(
            (channels, input_size, input_size),
            (
                Conv2d(16, 3, 3, stride=1, padding=1),
                AvgPool(2),
                Conv2d(32, 3, 3, stride=1, padding=1),
                AvgPool(2),
                Flatten(),
                Dense(128),
                Dense(64),
                Dense(n_classes),
            ),
        )

    def output_shapes(self):
        shapes = []
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = _layer_output_shape(layer, shape)
            except ConfigurationError as exc:
                raise ConfigurationError(f"layer {i} ({layer.kind}): {exc}") from None
            shapes.append(shape)
        return shapes

    def activation(self, index):
        layer = self.layers[index]
        if index == len(self.layers) - 1:
            return "softmax"
        if isinstance(layer, (Conv2d, Dense)):
            return "relu"
        return None

    @property
    def n_classes(self):
        return self.layers[-1].units

    def to_dict(self):
        return {"input_shape": list(self.input_shape), "layers": [layer_to_dict(layer) for layer in self.layers]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["input_shape"]), tuple(layer_from_dict(x) for x in d["layers"]))

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def _layer_output_shape(layer, shape):
    if isinstance(layer, Conv2d):
        if len(shape) != 3:
            raise ConfigurationError(f"Conv2d needs a [C,H,W] input, got {shape}")
        if min(layer.out_channels, layer.kernel_h, layer.kernel_w) < 1 or layer.padding < 0:
            raise ConfigurationError("Conv2d sizes must be positive")
        return (layer.out_channels,
                conv_output_size(shape[1], layer.kernel_h, layer.stride, layer.padding),
                conv_output_size(shape[2], layer.kernel_w, layer.stride, layer.padding))
    if isinstance(layer, AvgPool):
        if len(shape) != 3:
            raise ConfigurationError(f"AvgPool needs a [C,H,W] input, got {shape}")
        return (shape[0], pool_output_size(shape[1], layer.size, layer.step),
                pool_output_size(shape[2], layer.size, layer.step))
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, Dense):
        if len(shape) != 1:
            raise ConfigurationError(f"Dense needs a flat input, got {shape}; insert Flatten")
        if layer.units < 1:
            raise ConfigurationError("Dense units must be positive")
        return (layer.units,)
    raise ConfigurationError(f"unsupported layer {layer!r}")


def param_shapes(spec):
    shapes = []
    in_shape = spec.input_shape
    for layer, out_shape in zip(spec.layers, spec.output_shapes()):
        if isinstance(layer, Conv2d):
            shapes.append(((layer.out_channels, in_shape[0], layer.kernel_h, layer.kernel_w), (layer.out_channels,)))
        elif isinstance(layer, Dense):
            shapes.append(((layer.units, in_shape[0]), (layer.units,)))
        else:
            shapes.append(None)
        in_shape = out_shape
    return shapes


def init_params(spec, rng):
    """Glorot-uniform weights, zero biases."""
    params = []
    for shapes in param_shapes(spec):
        if shapes is None:
            params.append(None)
            continue
        w_shape, b_shape = shapes
        receptive = int(np.prod(w_shape[2:])) if len(w_shape) == 4 else 1
        fan_in, fan_out = w_shape[1] * receptive, w_shape[0] * receptive
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params.append({"weights": rng.uniform(-limit, limit, size=w_shape), "bias": np.zeros(b_shape)})
    return params


@dataclass
class TrainedNetwork:
    spec: NetworkSpec
    params: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = param_shapes(self.spec)
        if len(self.params) != len(expected):
            raise ShapeError(f"{len(self.params)} parameter entries for {len(expected)} layers")
        for i, (p, shapes) in enumerate(zip(self.params, expected)):
            if shapes is None:
                if p is not None:
                    raise ShapeError(f"layer {i} has no parameters but some were given")
                continue
            if p is None or p["weights"].shape != shapes[0] or p["bias"].shape != shapes[1]:
                got = None if p is None else (p["weights"].shape, p["bias"].shape)
                raise ShapeError(f"layer {i} parameters {got} do not match {shapes}")

    def predict(self, x):
        """Class predictions for a batch ``[N, C, H, W]``."""
        logits = forward_batch(self.spec, self.params, x)[-1]
        return np.argmax(logits, axis=1)

    def accuracy(self, x, y):
        if len(x) == 0:
            return float("nan")
        return float(np.mean(self.predict(x) == np.asarray(y)))

    def records(self):
        """Flat name -> array mapping for archive storage."""
        out = {}
        for i, p in enumerate(self.params):
            if p is not None:
                out[f"layer{i}_weights"] = p["weights"]
                out[f"layer{i}_bias"] = p["bias"]
        return out

    def save(self, path):
        from spikeforge import npz

        text = {"spec.json": self.spec.to_json(), "meta.json": json.dumps(self.meta, sort_keys=True)}
        npz.write_npz(self.records(), path, text_records=text)

    @classmethod
    def load(cls, path):
        from spikeforge import npz

        arrays, text = npz.read_npz_archive(path)
        if "spec.json" not in text:
            raise ValueError(f"{path}: archive has no spec.json record")
        spec = NetworkSpec.from_dict(json.loads(text["spec.json"]))
        params = []
        for i, shapes in enumerate(param_shapes(spec)):
            if shapes is None:
                params.append(None)
            else:
                params.append({"weights": arrays[f"layer{i}_weights"], "bias": arrays[f"layer{i}_bias"]})
        meta = json.loads(text.get("meta.json", "{}"))
        return cls(spec, params, meta)


# -- batched forward / backward -------------------------------------------------


def _layer_forward(layer, p, x):
    if isinstance(layer, Conv2d):
        return kernels.conv2d_forward(x, p["weights"], p["bias"], layer.stride, layer.padding)
    if isinstance(layer, AvgPool):
        return kernels.avg_pool_forward(x, layer.size, layer.step)
    if isinstance(layer, Flatten):
        return x.reshape(x.shape[0], -1)
    return x @ p["weights"].T + p["bias"]


def _run(spec, params, x, start=0):
    """Forward from layer ``start``; returns (inputs, pre-activations, outputs)."""
    inputs, pre, post = [], [], []
    for i in range(start, len(spec.layers)):
        inputs.append(x)
        z = _layer_forward(spec.layers[i], params[i], x)
        pre.append(z)
        act = spec.activation(i)
        x = relu(z) if act == "relu" else z
        post.append(x)
    return inputs, pre, post


def _as_batch(spec, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape == spec.input_shape:
        return x[None], True
    if x.shape[1:] == spec.input_shape:
        return x, False
    raise ShapeError(f"input shape {x.shape} does not match network input {spec.input_shape}")


def forward_batch(spec, params, x):
    """Per-layer outputs for a batch; the last entry holds logits (no softmax)."""
    xb, _ = _as_batch(spec, x)
    return _run(spec, params, xb)[2]


def forward_all(net, x, final="softmax"):
    """Activations after every layer for one sample or a batch.

    ``final="softmax"`` returns class probabilities as the last entry,
    ``final="logits"`` the pre-softmax scores.
    """
    xb, single = _as_batch(net.spec, x)
    outs = _run(net.spec, net.params, xb)[2]
    if final == "softmax":
        outs[-1] = softmax(outs[-1])
    elif final != "logits":
        raise ValueError(f"final must be 'softmax' or 'logits', got {final!r}")
    return [o[0] for o in outs] if single else outs


def cross_entropy(logits, labels):
    labels = np.asarray(labels, dtype=np.int64)
    return float(-np.mean(log_softmax(logits)[np.arange(len(labels)), labels]))


def loss_and_grads(spec, params, x, labels):
    """Mean cross-entropy over the batch and its gradient for every parameter."""
    xb, _ = _as_batch(spec, x)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    inputs, pre, post = _run(spec, params, xb)
    logits = post[-1]
    n = len(labels)
    loss = cross_entropy(logits, labels)
    g = softmax(logits)
    g[np.arange(n), labels] -= 1.0
    g /= n
    grads = [None] * len(spec.layers)
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        if spec.activation(i) == "relu":
            g = g * (pre[i] > 0)
        x_in = inputs[i]
        if isinstance(layer, Conv2d):
            gx, gw, gb = kernels.conv2d_backward(x_in, params[i]["weights"], g, layer.stride, layer.padding)
            grads[i] = {"weights": gw, "bias": gb}
            g = gx
        elif isinstance(layer, AvgPool):
            g = kernels.avg_pool_backward(g, x_in.shape, layer.size, layer.step)
        elif isinstance(layer, Flatten):
            g = g.reshape(x_in.shape)
        else:
            grads[i] = {"weights": g.T @ x_in, "bias": g.sum(axis=0)}
            g = g @ params[i]["weights"]
    return loss, grads


# -- training --------------------------------------------------------------------


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 0.01
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0


def train(spec, train_set, hyper=TrainHyper(), test_set=None, params=None):
    """Mini-batch SGD on mean cross-entropy.

    ``train_set`` and ``test_set`` are ``(images [N,C,H,W], labels [N])``
    pairs. Deterministic for a fixed ``hyper.seed``. The per-epoch mean loss
    trace is stored in ``meta["loss_trace"]``.
    """
    x, y = np.asarray(train_set[0], dtype=np.float64), np.asarray(train_set[1], dtype=np.int64)
    if len(x) == 0:
        raise TrainingError("training set is empty")
    if len(x) != len(y):
        raise TrainingError(f"{len(x)} images but {len(y)} labels")
    if hyper.batch_size < 1:
        raise TrainingError(f"batch_size must be >= 1, got {hyper.batch_size}")
    if hyper.epochs < 0:
        raise TrainingError(f"epochs must be >= 0, got {hyper.epochs}")
    _as_batch(spec, x)
    rng = np.random.default_rng(hyper.seed)
    if params is None:
        params = init_params(spec, rng)
    else:
        params = [None if p is None else {k: v.copy() for k, v in p.items()} for p in params]

    loss_trace = []
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), hyper.batch_size):
            idx = order[start : start + hyper.batch_size]
            loss, grads = loss_and_grads(spec, params, x[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingError("loss is not finite", epoch=epoch)
            total += loss * len(idx)
            for p, gp in zip(params, grads):
                if p is not None:
                    p["weights"] -= hyper.lr * gp["weights"]
                    p["bias"] -= hyper.lr * gp["bias"]
        loss_trace.append(total / len(x))
        log.info("epoch %d/%d loss %.5f", epoch + 1, hyper.epochs, loss_trace[-1])

    net = TrainedNetwork(spec, params)
    net.meta = {
        "epochs": hyper.epochs,
        "lr": hyper.lr,
        "batch_size": hyper.batch_size,
        "seed": hyper.seed,
        "loss_trace": loss_trace,
        "train_accuracy": net.accuracy(x, y),
    }
    if test_set is not None and len(test_set[0]):
        net.meta["test_accuracy"] = net.accuracy(test_set[0], test_set[1])
    return net


# -- gradient check ----------------------------------------------------------------


def relative_error(analytic, numeric, floor=1e-6):
    """Elementwise |a - n| / max(|a|, |n|, floor).

    The floor turns the comparison absolute for gradients near zero, where
    central differences only carry rounding noise of order 1e-11.
    """
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_params: int
    # parameters whose +-eps probe crossed a ReLU kink even at the smallest step
    n_kinked: int
    analytic: list
    numeric: list


def numeric_gradients(spec, params, x, label, eps, min_eps=None):
    """Central finite differences of the loss for every parameter.

    Only layers from the perturbed one onwards are recomputed. When a probe
    flips any downstream ReLU mask the difference straddles a kink and is
    not a derivative; the step is then shrunk by 10x down to ``min_eps``
    (default eps/1000). Parameters still straddling a kink get NaN.
    """
    xb, _ = _as_batch(spec, x)
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    inputs, base_pre, _ = _run(spec, params, xb)
    relu_layers = [j for j in range(len(spec.layers)) if spec.activation(j) == "relu"]
    base_masks = {j: base_pre[j] > 0 for j in relu_layers}
    min_eps = eps * 1e-3 if min_eps is None else min_eps

    def probe(i):
        _, pre, post = _run(spec, params, inputs[i], start=i)
        same = all(np.array_equal(pre[j - i] > 0, base_masks[j]) for j in relu_layers if j >= i)
        return cross_entropy(post[-1], labels), same

    numeric = [None] * len(spec.layers)
    for i, p in enumerate(params):
        if p is None:
            continue
        numeric[i] = {}
        for name in ("weights", "bias"):
            arr = p[name]
            out = np.empty_like(arr)
            flat, out_flat = arr.reshape(-1), out.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                h = eps
                value = np.nan
                while h >= min_eps:
                    flat[j] = orig + h
                    up, ok_up = probe(i)
                    flat[j] = orig - h
                    down, ok_down = probe(i)
                    flat[j] = orig
                    if ok_up and ok_down:
                        value = (up - down) / (2.0 * h)
                        break
                    h /= 10.0
                out_flat[j] = value
            numeric[i][name] = out
    return numeric


def gradient_check(spec, x, label, eps=1e-4, seed=0, params=None, detail=False):
    """Worst relative error between backprop and central-difference gradients.

    Parameters come from the standard initializer with ``seed`` unless given.
    Returns the worst error, or a :class:`GradCheckResult` when ``detail``.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    if params is None:
        params = init_params(spec, np.random.default_rng(seed))
    _, analytic = loss_and_grads(spec, params, x, np.atleast_1d(label))
    numeric = numeric_gradients(spec, params, x, label, eps)
    worst, count, kinked = 0.0, 0, 0
    for a, n in zip(analytic, numeric):
        if a is None:
            continue
        for name in ("weights", "bias"):
            if not np.all(np.isfinite(a[name])):
                worst = float("inf")
            defined = np.isfinite(n[name])
            kinked += int((~defined).sum())
            count += a[name].size
            if defined.any():
                worst = max(worst, float(relative_error(a[name][defined], n[name][defined]).max()))
    if detail:
        return GradCheckResult(worst, count, kinked, analytic, numeric)
    return worst
