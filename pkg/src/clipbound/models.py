"""Per-sample loss/gradient providers with manual backpropagation.

Four model kinds share one flattened-parameter interface:

- mean: scalar mean estimator, per-sample loss 0.5 * (x - mu)^2
- logistic: binary logistic regression (single logit)
- softmax: multiclass logistic regression, cross-entropy
- mlp: one ReLU hidden layer + softmax cross-entropy

Gradients follow the descent convention (d loss / d theta); the optimizer
subtracts. per_sample_loss_grads returns the full (B, P) gradient matrix so
the training loop's clipping path sees one sample per row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .numkit import Rng

KINDS = ("mean", "logistic", "softmax", "mlp")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; parameter count is derived, never stored."""

    kind: str
    input_dim: int = 1
    num_classes: int = 2
    hidden: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1:
            raise ParameterError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.kind == "mean" and self.input_dim != 1:
            raise ParameterError("mean estimator takes 1-dimensional features")
        if self.kind == "logistic" and self.num_classes != 2:
            raise ParameterError("logistic kind is binary; use softmax for more classes")
        if self.kind in ("softmax", "mlp") and self.num_classes < 2:
            raise ParameterError(f"need >= 2 classes, got {self.num_classes}")
        if self.kind == "mlp" and self.hidden < 1:
            raise ParameterError("mlp requires hidden >= 1")

    def param_count(self) -> int:
        d, k, h = self.input_dim, self.num_classes, self.hidden
        if self.kind == "mean":
            return 1
        if self.kind == "logistic":
            return d + 1
        if self.kind == "softmax":
            return k * d + k
        return d * h + h + h * k + k  # mlp: W1, b1, W2, b2


@dataclass
class ModelState:
    """Flattened parameters theta plus their spec."""

    params: np.ndarray
    spec: ModelSpec

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.spec.param_count(),):
            raise ParameterError(
                f"params length {self.params.shape} != spec count {self.spec.param_count()}"
            )


def init_params(spec: ModelSpec, rng: Rng) -> ModelState:
    """Mean estimator starts at 0; linear weights uniform in +-1/sqrt(fan_in), biases 0."""
    d, k, h = spec.input_dim, spec.num_classes, spec.hidden
    if spec.kind == "mean":
        params = np.zeros(1)
    elif spec.kind == "logistic":
        bound = 1.0 / np.sqrt(d)
        params = np.concatenate([rng.uniform(-bound, bound, d), np.zeros(1)])
    elif spec.kind == "softmax":
        bound = 1.0 / np.sqrt(d)
        params = np.concatenate([rng.uniform(-bound, bound, k * d), np.zeros(k)])
    else:
        b1 = 1.0 / np.sqrt(d)
        b2 = 1.0 / np.sqrt(h)
        params = np.concatenate(
            [rng.uniform(-b1, b1, d * h), np.zeros(h), rng.uniform(-b2, b2, h * k), np.zeros(k)]
        )
    return ModelState(params, spec)


def _unpack_mlp(state: ModelState):
    d, k, h = state.spec.input_dim, state.spec.num_classes, state.spec.hidden
    p = state.params
    i0 = d * h
    w1 = p[:i0].reshape(d, h)
    b1 = p[i0 : i0 + h]
    i1 = i0 + h
    w2 = p[i1 : i1 + h * k].reshape(h, k)
    b2 = p[i1 + h * k :]
    return w1, b1, w2, b2


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_features(spec: ModelSpec, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != spec.input_dim:
        raise ParameterError(
            f"features shape {features.shape} incompatible with input_dim {spec.input_dim}"
        )
    return features


def per_sample_loss_grads(
    state: ModelState, features: np.ndarray, labels: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(losses (B,), gradients (B, P), gradient norms (B,)) for one batch."""
    spec = state.spec
    x = _check_features(spec, features)
    n = x.shape[0]
    y = np.asarray(labels)
    if y.shape != (n,):
        raise ParameterError(f"labels shape {y.shape} != ({n},)")
    if n == 0:
        empty = np.zeros((0, spec.param_count()))
        return np.zeros(0), empty, np.zeros(0)

    if spec.kind == "mean":
        resid = state.params[0] - x[:, 0]  # d/d mu of 0.5 (x - mu)^2
        losses = 0.5 * resid**2
        grads = resid[:, None]
    elif spec.kind == "logistic":
        d = spec.input_dim
        w, b = state.params[:d], state.params[d]
        z = x @ w + b
        yf = y.astype(np.float64)
        losses = np.logaddexp(0.0, z) - yf * z  # log(1 + e^z) - y z
        dz = 1.0 / (1.0 + np.exp(-z)) - yf
        grads = np.concatenate([dz[:, None] * x, dz[:, None]], axis=1)
    elif spec.kind == "softmax":
        d, k = spec.input_dim, spec.num_classes
        w = state.params[: k * d].reshape(k, d)
        b = state.params[k * d :]
        logp = _log_softmax(x @ w.T + b)
        losses = -logp[np.arange(n), y]
        dz = np.exp(logp)
        dz[np.arange(n), y] -= 1.0
        grads = np.concatenate([np.einsum("bk,bd->bkd", dz, x).reshape(n, k * d), dz], axis=1)
    else:
        w1, b1, w2, b2 = _unpack_mlp(state)
        z1 = x @ w1 + b1
        a = np.maximum(z1, 0.0)
        logp = _log_softmax(a @ w2 + b2)
        losses = -logp[np.arange(n), y]
        dz2 = np.exp(logp)
        dz2[np.arange(n), y] -= 1.0
        dz1 = (dz2 @ w2.T) * (z1 > 0)
        grads = np.concatenate(
            [
                np.einsum("bd,bh->bdh", x, dz1).reshape(n, -1),
                dz1,
                np.einsum("bh,bk->bhk", a, dz2).reshape(n, -1),
                dz2,
            ],
            axis=1,
        )
    norms = np.linalg.norm(grads, axis=1)
    return losses, grads, norms


def batch_loss(state: ModelState, features: np.ndarray, labels: np.ndarray) -> float:
    """Mean of the per-sample losses."""
    losses, _, _ = per_sample_loss_grads(state, features, labels)
    return float(losses.mean()) if losses.size else float("nan")


def predict(state: ModelState, features: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
    """(predicted labels, class probabilities).

    Classifiers break argmax ties toward the lowest class index; binary
    logistic maps p = 0.5 exactly to class 1. The mean model returns its
    estimate for every row (regression passthrough) with no probabilities.
    """
    spec = state.spec
    x = _check_features(spec, features)
    n = x.shape[0]
    if spec.kind == "mean":
        return np.full(n, state.params[0]), None
    if spec.kind == "logistic":
        d = spec.input_dim
        z = x @ state.params[:d] + state.params[d]
        p1 = 1.0 / (1.0 + np.exp(-z))
        probs = np.stack([1.0 - p1, p1], axis=1)
        return (p1 >= 0.5).astype(np.int64), probs
    if spec.kind == "softmax":
        d, k = spec.input_dim, spec.num_classes
        w = state.params[: k * d].reshape(k, d)
        b = state.params[k * d :]
        probs = np.exp(_log_softmax(x @ w.T + b))
    else:
        w1, b1, w2, b2 = _unpack_mlp(state)
        a = np.maximum(x @ w1 + b1, 0.0)
        probs = np.exp(_log_softmax(a @ w2 + b2))
    return np.argmax(probs, axis=1).astype(np.int64), probs
