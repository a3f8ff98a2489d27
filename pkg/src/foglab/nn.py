"""Small numpy neural-network kit for the federated local model.

Supported chain: ``conv1d* -> lstm -> (dropout | dense)* -> dense(1, sigmoid)``.
Everything is float64 and every gradient is written out by hand.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .data import SplitSpec, WindowSet, split_indices
from .errors import NumericError, SpecError, StratificationError, ValidationError

EPS = 1e-12
WEIGHTS_FORMAT = "foglab-weights"
WEIGHTS_VERSION = 1

ModelWeights = dict  # name -> ndarray, insertion order is the canonical layout


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int = 0
    kernel_size: int = 0
    stride: int = 1
    units: int = 0
    activation: str = ""
    rate: float = 0.0

    @classmethod
    def conv1d(cls, filters, kernel_size, stride=1, activation="relu"):
        return cls("conv1d", filters=filters, kernel_size=kernel_size, stride=stride, activation=activation)

    @classmethod
    def lstm(cls, units):
        return cls("lstm", units=units)

    @classmethod
    def dense(cls, units, activation="relu"):
        return cls("dense", units=units, activation=activation)

    @classmethod
    def dropout(cls, rate):
        return cls("dropout", rate=rate)

    def to_dict(self) -> dict:
        keep = {
            "conv1d": ("filters", "kernel_size", "stride", "activation"),
            "lstm": ("units",),
            "dense": ("units", "activation"),
            "dropout": ("rate",),
        }[self.kind]
        return {"kind": self.kind, **{k: getattr(self, k) for k in keep}}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


def default_architecture(units: int = 64, dropout: float = 0.3, filters: int = 64,
                         kernel_size: int = 3) -> list[LayerSpec]:
    return [
        LayerSpec.conv1d(filters, kernel_size, 1, "relu"),
        LayerSpec.lstm(units),
        LayerSpec.dropout(dropout),
        LayerSpec.dense(1, "sigmoid"),
    ]


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 32
    max_epochs: int = 50
    l2_lambda: float = 0.0
    patience: int = 5
    validation_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.max_epochs < 0 or self.patience < 0 or self.l2_lambda < 0:
            raise ValueError("max_epochs, patience and l2_lambda must be non-negative")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in (0, 1)")


# ---------------------------------------------------------------------------
# Layout and initialisation
# ---------------------------------------------------------------------------

def _layer_shapes(specs, input_shape):
    """Yield (index, spec, in_shape, out_shape, param_shapes) along the chain."""
    _validate_specs(specs)
    shape = tuple(input_shape)
    if len(shape) != 2 or min(shape) < 1:
        raise SpecError(f"input_shape must be (window_len, channels), got {input_shape}")
    out = []
    for i, s in enumerate(specs):
        params = {}
        if s.kind == "conv1d":
            if len(shape) != 2:
                raise SpecError(f"layer {i}: conv1d needs a sequence input, got {shape}")
            steps, ch = shape
            if steps < s.kernel_size:
                raise SpecError(f"layer {i}: kernel {s.kernel_size} longer than sequence {steps}")
            params = {"W": (s.kernel_size, ch, s.filters), "b": (s.filters,)}
            new = ((steps - s.kernel_size) // s.stride + 1, s.filters)
        elif s.kind == "lstm":
            if len(shape) != 2:
                raise SpecError(f"layer {i}: lstm needs a sequence input, got {shape}")
            u = s.units
            params = {"Wx": (shape[1], 4 * u), "Wh": (u, 4 * u), "b": (4 * u,)}
            new = (u,)
        elif s.kind == "dense":
            if len(shape) != 1:
                raise SpecError(f"layer {i}: dense needs a vector input, got {shape}")
            params = {"W": (shape[0], s.units), "b": (s.units,)}
            new = (s.units,)
        else:
            new = shape
        out.append((i, s, shape, new, params))
        shape = new
    return out


def _validate_specs(specs):
    if not specs:
        raise SpecError("empty layer list")
    for i, s in enumerate(specs):
        if s.kind == "conv1d":
            if s.filters < 1 or s.kernel_size < 1 or s.stride < 1:
                raise SpecError(f"layer {i}: conv1d sizes must be positive")
            if s.activation not in ("relu", "linear"):
                raise SpecError(f"layer {i}: conv1d activation {s.activation!r}")
        elif s.kind == "lstm":
            if s.units < 1:
                raise SpecError(f"layer {i}: lstm units must be positive")
        elif s.kind == "dense":
            if s.units < 1:
                raise SpecError(f"layer {i}: dense units must be positive")
            if s.activation not in ("relu", "sigmoid"):
                raise SpecError(f"layer {i}: dense activation {s.activation!r}")
        elif s.kind == "dropout":
            if not 0.0 <= s.rate < 1.0:
                raise SpecError(f"layer {i}: dropout rate must lie in [0, 1)")
        else:
            raise SpecError(f"layer {i}: unknown kind {s.kind!r}")
    last = specs[-1]
    if last.kind != "dense" or last.units != 1 or last.activation != "sigmoid":
        raise SpecError("network must end with dense(1, sigmoid)")
    if any(s.kind == "dense" and s.activation == "sigmoid" for s in specs[:-1]):
        raise SpecError("sigmoid is only supported on the output layer")


def param_shapes(specs, input_shape) -> dict[str, tuple]:
    shapes = {}
    for i, s, _, _, params in _layer_shapes(specs, input_shape):
        for pname, shp in params.items():
            shapes[f"{i}.{s.kind}.{pname}"] = shp
    return shapes


def init_weights(specs, input_shape, seed: int = 0) -> ModelWeights:
    """Glorot-uniform matrices, zero biases, LSTM forget-gate bias 1."""
    rng = np.random.default_rng(seed)
    weights = {}
    for i, s, _, _, params in _layer_shapes(specs, input_shape):
        for pname, shp in params.items():
            name = f"{i}.{s.kind}.{pname}"
            if pname == "b":
                w = np.zeros(shp)
                if s.kind == "lstm":
                    w[s.units:2 * s.units] = 1.0
            else:
                if s.kind == "conv1d":
                    fan_in, fan_out = shp[0] * shp[1], shp[0] * shp[2]
                else:
                    fan_in, fan_out = shp
                limit = np.sqrt(6.0 / (fan_in + fan_out))
                w = rng.uniform(-limit, limit, size=shp)
            weights[name] = w
    return weights


def zeros_like(weights: ModelWeights) -> ModelWeights:
    return {k: np.zeros_like(v) for k, v in weights.items()}


def count_params(weights: ModelWeights) -> int:
    return int(sum(v.size for v in weights.values()))


def _is_matrix(value: np.ndarray) -> bool:
    # L2 applies to kernels and weight matrices, not biases
    return value.ndim >= 2


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _conv_patches(x, k, stride):
    n, steps, ch = x.shape
    t_out = (steps - k) // stride + 1
    idx = np.arange(t_out)[:, None] * stride + np.arange(k)[None, :]
    return x[:, idx, :].reshape(n, t_out, k * ch), idx


@dataclass
class ForwardCache:
    specs: list
    weights: ModelWeights
    inputs: np.ndarray
    layers: list = field(default_factory=list)
    logits: np.ndarray = None
    probs: np.ndarray = None


def forward(weights: ModelWeights, specs, batch, mode: str = "infer", dropout_seed: int = 0):
    """Run the network; returns (probs, cache).

    Dropout is inverted dropout and only active when ``mode == "train"``.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"batch must be (n, window_len, channels), got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite value in input batch")
    layout = _layer_shapes(specs, x.shape[1:])
    cache = ForwardCache(list(specs), weights, x)
    rng = np.random.default_rng(dropout_seed)
    a = x
    for i, s, _, _, _ in layout:
        p = f"{i}.{s.kind}."
        if s.kind == "conv1d":
            W, b = weights[p + "W"], weights[p + "b"]
            patches, _ = _conv_patches(a, s.kernel_size, s.stride)
            z = patches @ W.reshape(-1, W.shape[2]) + b
            out = np.maximum(z, 0.0) if s.activation == "relu" else z
            cache.layers.append({"patches": patches, "z": z, "in_shape": a.shape})
        elif s.kind == "lstm":
            out, lc = _lstm_forward(a, weights[p + "Wx"], weights[p + "Wh"], weights[p + "b"])
            cache.layers.append(lc)
        elif s.kind == "dropout":
            if mode == "train" and s.rate > 0:
                mask = (rng.random(a.shape) >= s.rate) / (1.0 - s.rate)
            else:
                mask = None
            out = a * mask if mask is not None else a
            cache.layers.append({"mask": mask})
        else:
            W, b = weights[p + "W"], weights[p + "b"]
            z = a @ W + b
            if i == len(specs) - 1:
                cache.logits = z[:, 0]
                out = np.clip(sigmoid(z), EPS, 1.0 - EPS)
            else:
                out = np.maximum(z, 0.0)
            cache.layers.append({"a": a, "z": z})
        a = out
    cache.probs = a[:, 0]
    return cache.probs, cache


def _lstm_forward(x, Wx, Wh, b):
    n, steps, _ = x.shape
    u = Wh.shape[0]
    h = np.zeros((n, u))
    c = np.zeros((n, u))
    hs, cs, gates = [h], [c], []
    xw = x @ Wx + b  # (n, steps, 4u), input projection for all steps at once
    for t in range(steps):
        z = xw[:, t] + h @ Wh
        i = sigmoid(z[:, :u])
        f = sigmoid(z[:, u:2 * u])
        g = np.tanh(z[:, 2 * u:3 * u])
        o = sigmoid(z[:, 3 * u:])
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        hs.append(h)
        cs.append(c)
        gates.append((i, f, g, o, tc))
    return h, {"x": x, "hs": hs, "cs": cs, "gates": gates}


def _lstm_backward(dh_last, lc, Wx, Wh):
    x, hs, cs, gates = lc["x"], lc["hs"], lc["cs"], lc["gates"]
    n, steps, _ = x.shape
    u = Wh.shape[0]
    dWx = np.zeros_like(Wx)
    dWh = np.zeros_like(Wh)
    db = np.zeros(4 * u)
    dx = np.zeros_like(x)
    dh = dh_last
    dc = np.zeros((n, u))
    for t in range(steps - 1, -1, -1):
        i, f, g, o, tc = gates[t]
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc ** 2)
        di = dc * g
        dg = dc * i
        df = dc * cs[t]
        dc = dc * f
        dz = np.concatenate([
            di * i * (1.0 - i),
            df * f * (1.0 - f),
            dg * (1.0 - g ** 2),
            do * o * (1.0 - o),
        ], axis=1)
        dWx += x[:, t].T @ dz
        dWh += hs[t].T @ dz
        db += dz.sum(axis=0)
        dx[:, t] = dz @ Wx.T
        dh = dz @ Wh.T
    return dx, dWx, dWh, db


def backward(cache: ForwardCache, labels, l2_lambda: float = 0.0) -> ModelWeights:
    """Exact gradient of :func:`loss_bce` w.r.t. every parameter."""
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    n = len(y)
    if n != len(cache.probs):
        raise ValueError("labels do not match the cached batch")
    weights, specs = cache.weights, cache.specs
    grads = zeros_like(weights)
    # sigmoid + mean BCE collapse to (p - y) / n at the logit
    unclipped = sigmoid(cache.logits)
    delta = ((unclipped - y) / n)[:, None]
    for i in range(len(specs) - 1, -1, -1):
        s, lc = specs[i], cache.layers[i]
        p = f"{i}.{s.kind}."
        if s.kind == "dense":
            if i != len(specs) - 1:
                delta = delta * (lc["z"] > 0)
            grads[p + "W"] = lc["a"].T @ delta
            grads[p + "b"] = delta.sum(axis=0)
            delta = delta @ weights[p + "W"].T
        elif s.kind == "dropout":
            if lc["mask"] is not None:
                delta = delta * lc["mask"]
        elif s.kind == "lstm":
            delta, dWx, dWh, db = _lstm_backward(delta, lc, weights[p + "Wx"], weights[p + "Wh"])
            grads[p + "Wx"], grads[p + "Wh"], grads[p + "b"] = dWx, dWh, db
        else:
            W = weights[p + "W"]
            if s.activation == "relu":
                delta = delta * (lc["z"] > 0)
            k, ch, nf = W.shape
            patches = lc["patches"]
            grads[p + "W"] = (patches.reshape(-1, k * ch).T @ delta.reshape(-1, nf)).reshape(W.shape)
            grads[p + "b"] = delta.sum(axis=(0, 1))
            if i > 0:
                dpatch = (delta @ W.reshape(-1, nf).T).reshape(delta.shape[0], delta.shape[1], k, ch)
                dx = np.zeros(lc["in_shape"])
                for j in range(k):
                    dx[:, j:j + s.stride * delta.shape[1]:s.stride] += dpatch[:, :, j]
                delta = dx
    if l2_lambda:
        for name, w in weights.items():
            if _is_matrix(w):
                grads[name] = grads[name] + 2.0 * l2_lambda * w
    return grads


def loss_bce(probs, labels, weights: ModelWeights | None = None, l2_lambda: float = 0.0) -> float:
    p = np.clip(np.asarray(probs, dtype=np.float64), EPS, 1.0 - EPS)
    y = np.asarray(labels, dtype=np.float64)
    loss = float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log1p(-p))))
    if l2_lambda and weights is not None:
        loss += l2_lambda * sum(float(np.sum(w * w)) for w in weights.values() if _is_matrix(w))
    return loss


# ---------------------------------------------------------------------------
# Optimiser and training loop
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: ModelWeights
    v: ModelWeights
    t: int = 0

    @classmethod
    def fresh(cls, weights: ModelWeights) -> "AdamState":
        return cls(zeros_like(weights), zeros_like(weights), 0)


def adam_step(weights: ModelWeights, gradients: ModelWeights, state: AdamState,
              learning_rate: float = 0.001, t: int | None = None,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One Adam update with bias correction; returns new (weights, state)."""
    t = state.t + 1 if t is None else t
    new_w, new_m, new_v = {}, {}, {}
    for name, w in weights.items():
        g = gradients[name]
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {w.shape}")
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_w[name] = w - learning_rate * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return new_w, AdamState(new_m, new_v, t)


class FitResult(NamedTuple):
    weights: ModelWeights
    epochs_run: int
    history: dict


def fit(train: WindowSet, config: TrainConfig, specs, initial_weights: ModelWeights | None = None) -> FitResult:
    """Mini-batch Adam training with early stopping on a held-out slice.

    Returns the weights with the lowest validation loss.  ``patience == 0``
    disables early stopping.
    """
    n0, n1 = train.class_counts()
    if n0 == 0 or n1 == 0:
        raise ValidationError("training set must contain both classes")
    specs = list(specs)
    weights = initial_weights if initial_weights is not None else init_weights(
        specs, train.windows.shape[1:], config.seed)
    weights = {k: np.array(v, dtype=np.float64, copy=True) for k, v in weights.items()}
    history = {"train_loss": [], "val_loss": []}
    if config.max_epochs == 0:
        return FitResult(weights, 0, history)

    split = SplitSpec(config.validation_fraction, config.seed, stratified=True)
    try:
        tr_idx, va_idx = split_indices(train.labels, split)
    except StratificationError:
        tr_idx, va_idx = split_indices(train.labels, SplitSpec(config.validation_fraction, config.seed, False))
    xt, yt = train.windows[tr_idx], train.labels[tr_idx]
    xv, yv = train.windows[va_idx], train.labels[va_idx]

    rng = np.random.default_rng(config.seed)
    state = AdamState.fresh(weights)
    best_loss, best_weights, since_best = np.inf, weights, 0
    epochs = 0
    for epoch in range(config.max_epochs):
        order = rng.permutation(len(yt))
        batch_losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            probs, cache = forward(weights, specs, xt[idx], "train", int(rng.integers(2 ** 32)))
            batch_losses.append(loss_bce(probs, yt[idx], weights, config.l2_lambda) * len(idx))
            grads = backward(cache, yt[idx], config.l2_lambda)
            weights, state = adam_step(weights, grads, state, config.learning_rate)
        epochs = epoch + 1
        history["train_loss"].append(float(np.sum(batch_losses) / len(yt)))
        val_loss = loss_bce(predict(weights, specs, xv), yv)
        history["val_loss"].append(val_loss)
        if not np.isfinite(val_loss):
            raise NumericError(f"validation loss became non-finite at epoch {epochs}")
        if val_loss < best_loss:
            best_loss, best_weights, since_best = val_loss, weights, 0
        else:
            since_best += 1
            if config.patience and since_best >= config.patience:
                break
    return FitResult(best_weights, epochs, history)


def predict(weights: ModelWeights, specs, batch) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    expected = param_shapes(specs, batch.shape[1:]) if batch.ndim == 3 else None
    if expected is None:
        raise ValueError(f"batch must be 3-D, got shape {batch.shape}")
    for name, shp in expected.items():
        if name not in weights or weights[name].shape != shp:
            raise ValueError(f"batch shape {batch.shape[1:]} does not fit parameter {name}")
    return forward(weights, specs, batch, "infer")[0]


def hard_labels(probs, threshold: float = 0.5) -> np.ndarray:
    # a probability of exactly 0.5 maps to the negative class
    return (np.asarray(probs) > threshold).astype(np.int64)


# ---------------------------------------------------------------------------
# Weight files
# ---------------------------------------------------------------------------

def weights_to_dict(weights: ModelWeights, specs) -> dict:
    return {
        "format": WEIGHTS_FORMAT,
        "version": WEIGHTS_VERSION,
        "specs": [s.to_dict() for s in specs],
        "params": [
            {"name": k, "shape": list(v.shape), "values": v.ravel(order="C").tolist()}
            for k, v in weights.items()
        ],
    }


def weights_from_dict(d: dict):
    if d.get("format") != WEIGHTS_FORMAT or d.get("version") != WEIGHTS_VERSION:
        raise ValueError(f"unsupported weight file: {d.get('format')} v{d.get('version')}")
    specs = [LayerSpec.from_dict(s) for s in d["specs"]]
    weights = {
        p["name"]: np.array(p["values"], dtype=np.float64).reshape(p["shape"])
        for p in d["params"]
    }
    return weights, specs


def save_weights(path, weights: ModelWeights, specs) -> None:
    # json writes floats with shortest round-trip repr, so reload is bit-exact
    Path(path).write_text(json.dumps(weights_to_dict(weights, specs)), encoding="utf-8")


def load_weights(path):
    return weights_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
