"""Dense feedforward multi-label classifier written directly on numpy.

Layers compute ``z = x @ W.T + b`` on row batches, ``W`` being (out, in).
The loss is element-wise binary cross-entropy in nats, averaged over every
output of every sample, and the output layer must be a sigmoid so the
output delta fuses to ``(pred - target) / numel``.

Model files
-----------
Little-endian binary::

    magic        6 bytes  b"UCMLP\\0"
    version      uint16   (1)
    n_layers     uint32
    input_size   uint32
    per layer    uint32 in, uint32 out, uint8 activation tag (0 linear, 1 relu, 2 sigmoid)
    payload      per layer: weights (out x in, row-major) then biases, float64
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "Activation",
    "LayerSpec",
    "MlpModel",
    "AdamState",
    "TrainConfig",
    "TrainingError",
    "build_network",
    "param_count",
    "op_count",
    "forward",
    "bce_loss",
    "backward",
    "adam_step",
    "train",
    "predict_proba",
    "predict_links",
    "FrozenPredictor",
    "save_model",
    "load_model",
    "centralized_layout",
    "distributed_layout",
]

log = logging.getLogger(__name__)

_MAGIC = b"UCMLP\0"
_VERSION = 1
_CLAMP = 1e-12


class Activation(str, Enum):
    LINEAR = "linear"
    RELU = "relu"
    SIGMOID = "sigmoid"


_TAGS = {Activation.LINEAR: 0, Activation.RELU: 1, Activation.SIGMOID: 2}
_FROM_TAG = {v: k for k, v in _TAGS.items()}


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    size: int
    activation: Activation

    def __post_init__(self):
        if int(self.size) < 1:
            raise ValueError(f"layer size must be >= 1, got {self.size}")
        object.__setattr__(self, "activation", Activation(self.activation))


@dataclass
class MlpModel:
    input_size: int
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[Activation]
    rng_seed: int = 0

    def __post_init__(self):
        fan_in = self.input_size
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape[1] != fan_in or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: weight {w.shape} / bias {b.shape} do not chain from {fan_in}")
            fan_in = w.shape[0]

    @property
    def output_size(self) -> int:
        return self.weights[-1].shape[0]

    def specs(self) -> list[LayerSpec]:
        return [LayerSpec(w.shape[0], act) for w, act in zip(self.weights, self.activations)]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self) -> "MlpModel":
        return MlpModel(self.input_size, [w.copy() for w in self.weights],
                        [b.copy() for b in self.biases], list(self.activations), self.rng_seed)


def centralized_layout(K: int, width_per_ue: int, M: int) -> tuple[int, list[LayerSpec]]:
    """Input size and layers of the network-wide classifier."""
    return K * width_per_ue, [
        LayerSpec(32, Activation.LINEAR),
        LayerSpec(64, Activation.RELU),
        LayerSpec(128, Activation.RELU),
        LayerSpec(K * M, Activation.SIGMOID),
    ]


def distributed_layout(width_per_ue: int, M: int) -> tuple[int, list[LayerSpec]]:
    """Input size and layers of the single-UE classifier."""
    return width_per_ue, [
        LayerSpec(32, Activation.LINEAR),
        LayerSpec(64, Activation.RELU),
        LayerSpec(128, Activation.RELU),
        LayerSpec(M, Activation.SIGMOID),
    ]


def build_network(input_size: int, layers: Sequence[LayerSpec], seed: int = 0) -> MlpModel:
    """Glorot-uniform weights, ``U(-a, a)`` with ``a = sqrt(6 / (fan_in + fan_out))``; zero biases."""
    if not layers:
        raise ValueError("need at least one layer")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    fan_in = int(input_size)
    for spec in layers:
        limit = np.sqrt(6.0 / (fan_in + spec.size))
        weights.append(rng.uniform(-limit, limit, size=(spec.size, fan_in)))
        biases.append(np.zeros(spec.size))
        fan_in = spec.size
    return MlpModel(int(input_size), weights, biases, [s.activation for s in layers], seed)


def param_count(input_size: int, layers: Sequence[LayerSpec]) -> int:
    """Trainable scalars: sum of ``(fan_in + 1) * fan_out`` over layers."""
    total, fan_in = 0, int(input_size)
    for spec in layers:
        total += (fan_in + 1) * spec.size
        fan_in = spec.size
    return total


def op_count(input_size: int, layers: Sequence[LayerSpec]) -> dict[str, int]:
    """Per-sample cost: multiplications, additions and activation evaluations.

    Layer i costs ``T_i * T_{i-1}`` real multiplications and as many
    additions (the bias add takes the place of the first product's
    accumulation), plus ``T_i`` activations.
    """
    macs, acts, fan_in = 0, 0, int(input_size)
    for spec in layers:
        macs += spec.size * fan_in
        acts += spec.size
        fan_in = spec.size
    return {"multiplications": macs, "additions": macs, "activations": acts}


def _activate(z: np.ndarray, act: Activation) -> np.ndarray:
    if act is Activation.LINEAR:
        return z
    if act is Activation.RELU:
        return np.maximum(z, 0.0)
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def forward(model: MlpModel, x: np.ndarray) -> list[np.ndarray]:
    """Activations of every layer, input first and prediction last."""
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[1] != model.input_size:
        raise ValueError(f"input width {x.shape[1]} != model input size {model.input_size}")
    outs = [x]
    for w, b, act in zip(model.weights, model.biases, model.activations):
        outs.append(_activate(outs[-1] @ w.T + b, act))
    if squeeze:
        outs = [o[0] for o in outs]
    return outs


def predict_proba(model: MlpModel, x: np.ndarray) -> np.ndarray:
    return forward(model, x)[-1]


def predict_links(model: MlpModel, x: np.ndarray, threshold: float = 0.5,
                  shape: tuple[int, int] | None = None) -> np.ndarray:
    """Strict ``> threshold`` decisions, optionally reshaped row-major per sample.

    A centralized output of length K*M with ``shape=(K, M)`` becomes a
    (n, K, M) stack; UE k occupies entries ``k*M .. k*M + M - 1``.
    """
    prob = predict_proba(model, x)
    links = (prob > threshold).astype(np.uint8)
    if shape is not None:
        links = links.reshape(links.shape[:-1] + tuple(shape))
    return links


def bce_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean binary cross-entropy in nats."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    p = np.clip(pred, _CLAMP, 1.0 - _CLAMP)
    return float(-np.mean(target * np.log(p) + (1.0 - target) * np.log1p(-p)))


def backward(model: MlpModel, activations: list[np.ndarray], target: np.ndarray):
    """Gradients of :func:`bce_loss` w.r.t. weights and biases."""
    if model.activations[-1] is not Activation.SIGMOID:
        raise ValueError("backward needs a sigmoid output layer")
    acts = [a if a.ndim == 2 else a[None, :] for a in activations]
    target = np.asarray(target, dtype=float).reshape(acts[-1].shape)
    delta = (acts[-1] - target) / target.size
    grad_w = [None] * len(model.weights)
    grad_b = [None] * len(model.weights)
    for i in range(len(model.weights) - 1, -1, -1):
        grad_w[i] = delta.T @ acts[i]
        grad_b[i] = delta.sum(axis=0)
        if i == 0:
            break
        delta = delta @ model.weights[i]
        if model.activations[i - 1] is Activation.RELU:
            delta = delta * (acts[i] > 0)
        elif model.activations[i - 1] is Activation.SIGMOID:
            delta = delta * acts[i] * (1.0 - acts[i])
    return grad_w, grad_b


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_model(cls, model: MlpModel, lr: float = 0.001, **kw) -> "AdamState":
        params = model.parameters()
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], lr=lr, **kw)


def adam_step(model: MlpModel, grads, state: AdamState) -> None:
    """One bias-corrected Adam update, applied in place to model and state."""
    grad_w, grad_b = grads
    flat = []
    for gw, gb in zip(grad_w, grad_b):
        flat += [gw, gb]
    params = model.parameters()
    if len(flat) != len(params):
        raise ValueError("gradient list does not match the model")
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    step = state.lr * np.sqrt(c2) / c1
    eps_hat = state.eps * np.sqrt(c2)
    for p, g, m, v in zip(params, flat, state.m, state.v):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        # lr * m_hat / (sqrt(v_hat) + eps), rearranged to skip two temporaries
        p -= step * m / (np.sqrt(v) + eps_hat)


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 100
    shuffle_seed: int = 0
    early_stop_patience: int = 10
    lr: float = 0.001
    val_fraction: float = 0.1
    input_noise: float = 0.0  # std of Gaussian noise added to training batches
    monitor: str = "loss"  # "loss" (minimize BCE) or "bacc" (maximize balanced accuracy)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.input_noise < 0:
            raise ValueError("input_noise must be >= 0")
        if self.monitor not in ("loss", "bacc"):
            raise ValueError(f"unknown monitor {self.monitor!r}")


@dataclass
class TrainResult:
    model: MlpModel
    history: list[tuple[float, float | None]] = field(default_factory=list)  # (train, validation)
    best_epoch: int = -1


def _validate(model: MlpModel, x: np.ndarray, y: np.ndarray, chunk: int = 4096) -> tuple[float, float]:
    """BCE and balanced accuracy at the 0.5 threshold."""
    loss, tp, pos, tn, neg = 0.0, 0, 0, 0, 0
    for s in range(0, len(x), chunk):
        prob = predict_proba(model, x[s:s + chunk])
        yc = y[s:s + chunk]
        loss += bce_loss(prob, yc) * len(yc)
        hit = (prob > 0.5) == (yc > 0.5)
        tp += int(np.sum(hit & (yc > 0.5)))
        tn += int(np.sum(hit & (yc <= 0.5)))
        pos += int(np.sum(yc > 0.5))
        neg += int(np.sum(yc <= 0.5))
    rates = [r for r in (tp / pos if pos else None, tn / neg if neg else None) if r is not None]
    return loss / len(x), float(np.mean(rates)) if rates else 0.0


def train(model: MlpModel, features: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
          validation: tuple[np.ndarray, np.ndarray] | None = None) -> TrainResult:
    """Mini-batch Adam with per-epoch reshuffling and optional early stopping.

    With ``early_stop_patience > 0`` and no explicit ``validation`` set, the
    last ``val_fraction`` of the rows is held out.  Training stops once the
    monitored validation score has not improved for ``early_stop_patience``
    epochs, and the weights of the best epoch are restored.  The input
    model is not modified.
    """
    x = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=float)
    if len(x) != len(y):
        raise ValueError(f"{len(x)} feature rows but {len(y)} label rows")
    if cfg.early_stop_patience > 0 and validation is None:
        n_val = int(round(len(x) * cfg.val_fraction))
        if n_val > 0:
            validation = (x[-n_val:], y[-n_val:])
            x, y = x[:-n_val], y[:-n_val]
    model = model.copy()
    state = AdamState.for_model(model, lr=cfg.lr)
    rng = np.random.default_rng(cfg.shuffle_seed)
    result = TrainResult(model)
    noise_rng = np.random.default_rng([cfg.shuffle_seed, 1])
    best, best_model, stale = np.inf, None, 0

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x))
        running = 0.0
        for s in range(0, len(x), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            xb = x[idx]
            if cfg.input_noise > 0:
                xb = xb + cfg.input_noise * noise_rng.standard_normal(xb.shape)
            acts = forward(model, xb)
            running += bce_loss(acts[-1], y[idx]) * len(idx)
            adam_step(model, backward(model, acts, y[idx]), state)
        train_loss = running / len(x)
        if not np.isfinite(train_loss):
            raise TrainingError(f"non-finite training loss at epoch {epoch}: {train_loss}")
        val_loss = None
        if validation is not None:
            val_loss, val_bacc = _validate(model, *validation)
            if not np.isfinite(val_loss):
                raise TrainingError(f"non-finite validation loss at epoch {epoch}: {val_loss}")
        result.history.append((train_loss, val_loss))
        log.debug("epoch %d train %.5f val %s", epoch, train_loss, val_loss)

        if val_loss is not None and cfg.early_stop_patience > 0:
            score = val_loss if cfg.monitor == "loss" else -val_bacc
            if score < best:
                best, best_model, stale = score, model.copy(), 0
                result.best_epoch = epoch
            else:
                stale += 1
                if stale >= cfg.early_stop_patience:
                    break
    if best_model is not None:
        model = best_model
    else:
        result.best_epoch = len(result.history) - 1
    result.model = model
    return result


class FrozenPredictor:
    """Read-only float32 copy of a model for low-latency link decisions.

    Skips the sigmoid: ``sigmoid(z) > 0.5`` exactly when ``z > 0``.  Given
    ``input_mean`` and ``input_std``, it takes raw features and applies
    ``(x - mean) / std`` through the first layer's weights and bias, which
    is exact because that layer is affine before its activation.
    """

    def __init__(self, model: MlpModel, dtype=np.float32,
                 input_mean: np.ndarray | None = None, input_std: np.ndarray | None = None):
        self.dtype = np.dtype(dtype)
        self.input_size = model.input_size
        weights, biases = list(model.weights), list(model.biases)
        if input_mean is not None or input_std is not None:
            mean = np.zeros(model.input_size) if input_mean is None else np.asarray(input_mean, float)
            std = np.ones(model.input_size) if input_std is None else np.asarray(input_std, float)
            weights[0] = weights[0] / std
            biases[0] = biases[0] - weights[0] @ mean
        self._layers = [
            (np.ascontiguousarray(w.T, dtype=self.dtype), b.astype(self.dtype), act is Activation.RELU)
            for w, b, act in zip(weights, biases, model.activations)
        ]
        if model.activations[-1] is not Activation.SIGMOID:
            raise ValueError("FrozenPredictor needs a sigmoid output layer")

    def logits(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=self.dtype)
        for wt, b, relu in self._layers:
            h = h @ wt
            h += b
            if relu:
                np.maximum(h, 0, out=h)
        return h

    def links(self, x: np.ndarray) -> np.ndarray:
        return self.logits(x) > 0


def save_model(path: str | Path, model: MlpModel) -> None:
    parts = [_MAGIC, struct.pack("<HII", _VERSION, len(model.weights), model.input_size)]
    for w, act in zip(model.weights, model.activations):
        parts.append(struct.pack("<IIB", w.shape[1], w.shape[0], _TAGS[act]))
    for w, b in zip(model.weights, model.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_model(path: str | Path) -> MlpModel:
    data = Path(path).read_bytes()
    if data[:6] != _MAGIC:
        raise ValueError(f"{path}: not a model file")
    version, n_layers, input_size = struct.unpack_from("<HII", data, 6)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported model format version {version}")
    off = 6 + struct.calcsize("<HII")
    shapes = []
    for _ in range(n_layers):
        fan_in, fan_out, tag = struct.unpack_from("<IIB", data, off)
        off += struct.calcsize("<IIB")
        shapes.append((fan_in, fan_out, _FROM_TAG[tag]))
    weights, biases, acts = [], [], []
    for fan_in, fan_out, act in shapes:
        w = np.frombuffer(data, dtype="<f8", count=fan_in * fan_out, offset=off).reshape(fan_out, fan_in)
        off += w.nbytes
        b = np.frombuffer(data, dtype="<f8", count=fan_out, offset=off)
        off += b.nbytes
        weights.append(w.astype(float))
        biases.append(b.astype(float))
        acts.append(act)
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    return MlpModel(input_size, weights, biases, acts)
