"""Bounded-output regression head over fixed feature vectors.

The head is a (possibly zero-hidden-layer) perceptron whose scalar
pre-activation ``z`` is squashed into the MOS range::

    score = low + (high - low) * sigmoid(z)        # default: 1 + 4 sigmoid(z)

Parameters are flattened layer by layer as ``W0, b0, W1, b1, ...`` with each
weight matrix stored row-major with shape ``(out, in)``. The final output
layer therefore occupies the last ``width + 1`` entries of the vector.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import LabelError, ShapeError

ACTIVATIONS = ("tanh", "relu", "identity")


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden_dims: tuple[int, ...] = ()
    activation: str = "tanh"
    bounded: bool = True
    low: float = 1.0
    high: float = 5.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden widths must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if not self.low < self.high:
            raise ValueError("output bounds need low < high")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, 1)

    def layout(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        out = []
        w = self.widths
        for i in range(len(w) - 1):
            out.append((f"W{i}", (w[i + 1], w[i])))
            out.append((f"b{i}", (w[i + 1],)))
        return tuple(out)

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.layout())

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "activation": self.activation,
            "bounded": self.bounded,
            "low": self.low,
            "high": self.high,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> ModelSpec:
        return cls(
            input_dim=int(obj["input_dim"]),
            hidden_dims=tuple(obj.get("hidden_dims", ())),
            activation=obj.get("activation", "tanh"),
            bounded=bool(obj.get("bounded", True)),
            low=float(obj.get("low", 1.0)),
            high=float(obj.get("high", 5.0)),
        )


@dataclass(frozen=True)
class ParamVector:
    values: np.ndarray
    layout: tuple[tuple[str, tuple[int, ...]], ...] = field(compare=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ShapeError("parameter values must be a flat vector")
        size = sum(int(np.prod(s)) for _, s in self.layout)
        if v.size != size:
            raise ShapeError(f"{v.size} values do not match layout size {size}")
        if not np.all(np.isfinite(v)):
            raise ShapeError("parameter vector has non-finite entries")
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.size

    def with_values(self, values: np.ndarray) -> ParamVector:
        return ParamVector(values, self.layout)

    def tensors(self) -> list[np.ndarray]:
        out, pos = [], 0
        for _, shape in self.layout:
            n = int(np.prod(shape))
            out.append(self.values[pos : pos + n].reshape(shape))
            pos += n
        return out

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        t = self.tensors()
        return list(zip(t[0::2], t[1::2]))


def zeros(spec: ModelSpec) -> ParamVector:
    return ParamVector(np.zeros(spec.n_params), spec.layout())


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases of each layer."""
    rng = np.random.default_rng(seed)
    parts = []
    w = spec.widths
    for fan_in, fan_out in zip(w[:-1], w[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        parts.append(rng.uniform(-bound, bound, size=fan_out * fan_in))
        parts.append(rng.uniform(-bound, bound, size=fan_out))
    return ParamVector(np.concatenate(parts), spec.layout())


def _check(spec: ModelSpec, params: ParamVector) -> None:
    if tuple(params.layout) != spec.layout():
        raise ShapeError(f"parameter layout {params.layout} does not match model {spec.layout()}")


def _act(name: str, h: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(h)
    if name == "relu":
        return np.maximum(h, 0.0)
    return h


def _act_deriv(name: str, h: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (h > 0).astype(np.float64)
    return np.ones_like(h)


def _as_batch(spec: ModelSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"inputs of shape {x.shape} do not match input_dim {spec.input_dim}")
    return x


def _hidden(spec: ModelSpec, layers, x: np.ndarray):
    """Forward through the hidden layers; returns (pre-activations, activations)."""
    hs, acts = [], [x]
    a = x
    for w, b in layers[:-1]:
        h = a @ w.T + b
        a = _act(spec.activation, h)
        hs.append(h)
        acts.append(a)
    return hs, acts


def output_map(spec: ModelSpec, z: np.ndarray):
    """Score and its first two derivatives with respect to the pre-activation."""
    if not spec.bounded:
        return z, np.ones_like(z), np.zeros_like(z)
    span = spec.high - spec.low
    sig = expit(z)
    d1 = sig * (1.0 - sig)
    return spec.low + span * sig, span * d1, span * d1 * (1.0 - 2.0 * sig)


def preactivation(spec: ModelSpec, params: ParamVector, x) -> np.ndarray:
    _check(spec, params)
    layers = params.layers()
    _, acts = _hidden(spec, layers, _as_batch(spec, x))
    w, b = layers[-1]
    return (acts[-1] @ w.T + b)[:, 0]


def predict(spec: ModelSpec, params: ParamVector, x) -> np.ndarray:
    """Scores for a batch of feature vectors (n, input_dim) -> (n,)."""
    return output_map(spec, preactivation(spec, params, x))[0]


def forward(spec: ModelSpec, params: ParamVector, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("forward takes a single feature vector; use predict for batches")
    return float(predict(spec, params, x)[0])


# --- losses --------------------------------------------------------------

@dataclass(frozen=True)
class Loss:
    """Per-point loss on the score: ``l1`` |r|, ``mse`` r^2, or ``huber`` with threshold delta."""

    kind: str = "l1"
    delta: float = 1.0

    def __post_init__(self):
        if self.kind not in ("l1", "mse", "huber"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.kind == "huber" and not self.delta > 0:
            raise ValueError("huber delta must be positive")

    @classmethod
    def parse(cls, text: str | Loss) -> Loss:
        if isinstance(text, Loss):
            return text
        name, _, arg = str(text).strip().lower().partition(":")
        if name == "huber":
            return cls("huber", float(arg) if arg else 1.0)
        return cls(name)

    def __str__(self) -> str:
        return f"huber:{self.delta!r}" if self.kind == "huber" else self.kind

    def value(self, pred, target) -> np.ndarray:
        r = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
        if self.kind == "l1":
            return np.abs(r)
        if self.kind == "mse":
            return r * r
        a = np.abs(r)
        return np.where(a <= self.delta, 0.5 * r * r, self.delta * (a - 0.5 * self.delta))

    def derivs(self, pred, target) -> tuple[np.ndarray, np.ndarray]:
        """First and second derivative with respect to ``pred``.

        The L1 subgradient at ``pred == target`` is 0.
        """
        r = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
        if self.kind == "l1":
            return np.sign(r), np.zeros_like(r)
        if self.kind == "mse":
            return 2.0 * r, np.full_like(r, 2.0)
        inside = np.abs(r) <= self.delta
        return np.where(inside, r, self.delta * np.sign(r)), inside.astype(np.float64)


def loss(kind: Loss | str, pred: float, target: float) -> float:
    return float(Loss.parse(kind).value(pred, target))


def _targets(y) -> np.ndarray:
    if y is None:
        raise LabelError("batch contains unlabeled records")
    y = np.asarray([np.nan if v is None else v for v in np.atleast_1d(y)], dtype=np.float64)
    if np.any(np.isnan(y)):
        raise LabelError("batch contains unlabeled records")
    return y


def value_and_grad(spec: ModelSpec, params: ParamVector, x, y, kind: Loss | str = "l1") -> tuple[float, ParamVector]:
    """Mean batch loss and its gradient, by backpropagation."""
    _check(spec, params)
    kind = Loss.parse(kind)
    x = _as_batch(spec, x)
    y = _targets(y)
    if len(x) == 0:
        raise ShapeError("empty batch")
    if len(y) != len(x):
        raise ShapeError(f"{len(x)} inputs but {len(y)} labels")
    layers = params.layers()
    hs, acts = _hidden(spec, layers, x)
    w_out, b_out = layers[-1]
    z = (acts[-1] @ w_out.T + b_out)[:, 0]
    s, ds, _ = output_map(spec, z)
    value = float(np.mean(kind.value(s, y)))
    dl, _ = kind.derivs(s, y)
    delta = (dl * ds / len(x))[:, None]  # (n, 1)

    grads: list[np.ndarray] = []
    for li in range(len(layers) - 1, -1, -1):
        w, _ = layers[li]
        grads.append(delta.sum(axis=0))
        grads.append(delta.T @ acts[li])
        if li > 0:
            da = delta @ w
            delta = da * _act_deriv(spec.activation, hs[li - 1], acts[li])
    grads.reverse()  # W0, b0, W1, b1, ...
    flat = np.concatenate([g.ravel() for g in grads])
    if not np.isfinite(value) or not np.all(np.isfinite(flat)):
        return value, flat
    return value, params.with_values(flat)


def grad(spec: ModelSpec, params: ParamVector, x, y, kind: Loss | str = "l1") -> ParamVector:
    """Gradient of the mean batch loss."""
    value, g = value_and_grad(spec, params, x, y, kind)
    if not isinstance(g, ParamVector):
        raise ShapeError(f"gradient is not finite (loss {value})")
    return g


def last_layer_inputs(spec: ModelSpec, params: ParamVector, x) -> tuple[np.ndarray, np.ndarray]:
    """Inputs to the output layer with a trailing bias column, and the pre-activations."""
    _check(spec, params)
    layers = params.layers()
    _, acts = _hidden(spec, layers, _as_batch(spec, x))
    phi = np.hstack([acts[-1], np.ones((len(acts[-1]), 1))])
    w, b = layers[-1]
    return phi, (acts[-1] @ w.T + b)[:, 0]


def last_layer_grads(spec: ModelSpec, params: ParamVector, x, y, kind: Loss | str) -> np.ndarray:
    """Per-point loss gradients restricted to the output layer, shape (n, width + 1)."""
    kind = Loss.parse(kind)
    phi, z = last_layer_inputs(spec, params, x)
    s, ds, _ = output_map(spec, z)
    dl, _ = kind.derivs(s, _targets(y))
    return (dl * ds)[:, None] * phi


def last_layer_size(params: ParamVector) -> int:
    (_, w_shape), (_, b_shape) = params.layout[-2:]
    return int(np.prod(w_shape)) + int(np.prod(b_shape))


def last_layer_split(params: ParamVector) -> tuple[np.ndarray, np.ndarray]:
    k = last_layer_size(params)
    cut = len(params) - k
    return params.values[:cut].copy(), params.values[cut:].copy()


def last_layer_join(params: ParamVector, frozen: np.ndarray, last: np.ndarray) -> ParamVector:
    return params.with_values(np.concatenate([frozen, last]))
