"""Normalized private SGD with constant or adaptive gradient clipping.

One loop covers all three clipping strategies. Each step: Poisson subsample,
per-sample gradients, clip-normalize at the current bound, noisy mean over the
expected batch size B = qN, optimizer update; in adaptive mode the loop then
privatizes the count of gradients whose raw norm exceeded tau * C_t and moves
the bound. Raw per-sample gradients reach the update only through
clip_normalize_batch and count_exceeding; everything downstream of the noise
is post-processing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import clipping, models
from .clipping import ClippingConfig, ClippingState
from .datasets import Dataset
from .errors import ConfigError, ParameterError, TrainingDiverged
from .metrics import (
    confusion_counts,
    group_accuracy,
    macro_accuracy,
    micro_accuracy,
    worst_class_accuracy,
)
from .models import ModelSpec, ModelState
from .numkit import Rng, gaussian_vector, poisson_subsample
from .privacy import MechanismParams, epsilon_of

OPTIMIZER_KINDS = ("sgd", "momentum", "adam")
COUNT_NOISE_RATIO = 10.0
DIVERGENCE_LOSS = 1e6


@dataclass(frozen=True)
class OptimizerConfig:
    """Post-processing optimizer; it only ever sees the privatized gradient."""

    kind: str = "sgd"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ParameterError(f"unknown optimizer kind {self.kind!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise ParameterError(f"momentum must be in [0, 1), got {self.momentum}")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ParameterError("adam betas must be in [0, 1)")
        if self.eps <= 0:
            raise ParameterError(f"adam eps must be > 0, got {self.eps}")


class OptimizerState:
    """Mutable buffers (velocity or adam moments) for one training run."""

    def __init__(self, cfg: OptimizerConfig, dim: int):
        self.cfg = cfg
        self.velocity = np.zeros(dim)
        self.m = np.zeros(dim)
        self.v = np.zeros(dim)
        self.t = 0

    def update(self, params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        if params.shape != grad.shape:
            raise ParameterError(f"shape mismatch: {params.shape} vs {grad.shape}")
        cfg = self.cfg
        if cfg.kind == "sgd":
            return params - lr * grad
        if cfg.kind == "momentum":
            self.velocity = cfg.momentum * self.velocity + grad
            return params - lr * self.velocity
        self.t += 1
        self.m = cfg.beta1 * self.m + (1.0 - cfg.beta1) * grad
        self.v = cfg.beta2 * self.v + (1.0 - cfg.beta2) * grad**2
        m_hat = self.m / (1.0 - cfg.beta1**self.t)
        v_hat = self.v / (1.0 - cfg.beta2**self.t)
        return params - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


def optimizer_update(
    opt: OptimizerState, params: np.ndarray, grad: np.ndarray, lr: float
) -> np.ndarray:
    return opt.update(params, grad, lr)


@dataclass(frozen=True)
class TrainConfig:
    """One training run's knobs.

    Exactly one of epochs/steps and exactly one of sampling_rate/batch_size
    must be set. sigma_count None resolves to COUNT_NOISE_RATIO * sigma_grad
    in adaptive mode (0 when noiseless); constant mode runs no count query at
    all. The noiseless flag permits sigma_grad = 0 and marks the run
    non-private.
    """

    learning_rate: float
    clipping: ClippingConfig
    seed: int
    epochs: int | None = None
    steps: int | None = None
    sampling_rate: float | None = None
    batch_size: int | None = None
    sigma_grad: float = 0.0
    sigma_count: float | None = None
    delta: float = 1e-5
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    noiseless: bool = False
    record_norm_quantiles: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if (self.epochs is None) == (self.steps is None):
            raise ConfigError("set exactly one of epochs / steps")
        if self.epochs is not None and self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.steps is not None and self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if (self.sampling_rate is None) == (self.batch_size is None):
            raise ConfigError("set exactly one of sampling_rate / batch_size")
        if self.sampling_rate is not None and not 0.0 < self.sampling_rate <= 1.0:
            raise ConfigError(f"sampling_rate must be in (0, 1], got {self.sampling_rate}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.sigma_grad < 0:
            raise ConfigError(f"sigma_grad must be >= 0, got {self.sigma_grad}")
        if not self.noiseless and self.sigma_grad == 0:
            raise ConfigError("sigma_grad = 0 requires the noiseless flag")
        if self.sigma_count is not None and self.sigma_count < 0:
            raise ConfigError(f"sigma_count must be >= 0, got {self.sigma_count}")
        if (
            not self.noiseless
            and self.clipping.adaptive
            and self.sigma_count is not None
            and self.sigma_count == 0
        ):
            raise ConfigError("adaptive clipping needs sigma_count > 0 unless noiseless")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError(f"delta must be in (0, 1), got {self.delta}")

    def resolve_sampling_rate(self, n: int) -> float:
        if self.sampling_rate is not None:
            return self.sampling_rate
        if self.batch_size > n:
            raise ConfigError(f"batch_size {self.batch_size} exceeds dataset size {n}")
        return self.batch_size / n

    def resolve_steps(self, q: float) -> int:
        if self.steps is not None:
            return self.steps
        return self.epochs * math.ceil(1.0 / q)

    def resolve_sigma_count(self) -> float | None:
        """Count-query noise, or None when constant mode runs no count query."""
        if not self.clipping.adaptive:
            return None
        if self.sigma_count is not None:
            return self.sigma_count
        return 0.0 if self.noiseless else COUNT_NOISE_RATIO * self.sigma_grad


@dataclass(frozen=True)
class HistoryRow:
    """One training step's diagnostics; NaN marks fields without a value."""

    step: int
    loss: float
    clip_bound: float
    noisy_clip_fraction: float
    grad_norm_p50: float
    grad_norm_p90: float
    grad_norm_max: float

    FIELDS = (
        "step",
        "loss",
        "clip_bound",
        "noisy_clip_fraction",
        "grad_norm_p50",
        "grad_norm_p90",
        "grad_norm_max",
    )


@dataclass
class RunResult:
    """Trained parameters plus everything the manifest and plots need."""

    state: ModelState
    history: list[HistoryRow]
    metrics: dict
    epsilon: float | None
    steps: int
    sampling_rate: float
    sigma_grad: float
    sigma_count: float | None

    @property
    def final_clip_bound(self) -> float:
        return self.history[-1].clip_bound if self.history else float("nan")


def charged_epsilon(cfg: TrainConfig, q: float, steps: int) -> float | None:
    """Spend of the full run under the run's own accounting; None if noiseless."""
    if cfg.noiseless:
        return None
    sigma_count = cfg.resolve_sigma_count()
    params = MechanismParams(q, steps, cfg.sigma_grad, sigma_count, cfg.delta)
    eps, _ = epsilon_of(params)
    return eps


def evaluate(state: ModelState, ds: Dataset) -> dict:
    """Accuracy metrics on one dataset (classifiers only)."""
    preds, _ = models.predict(state, ds.features)
    counts = confusion_counts(preds, ds.labels, ds.num_classes)
    out = {
        "macro_acc": macro_accuracy(counts),
        "worst_acc": worst_class_accuracy(counts),
        "micro_acc": micro_accuracy(counts),
    }
    if ds.groups is not None:
        for g, acc in enumerate(group_accuracy(preds, ds.labels, ds.groups)):
            out[f"group{g}_acc"] = float(acc)
    return out


def train(
    cfg: TrainConfig,
    dataset: Dataset,
    spec: ModelSpec,
    rng: Rng,
    eval_dataset: Dataset | None = None,
) -> RunResult:
    """Run the full loop; returns the result or raises TrainingDiverged.

    The generator is split per role (init / batch / grad_noise / count_noise)
    so e.g. toggling quantile recording never shifts the batch stream.
    """
    if dataset.n == 0:
        raise ParameterError("dataset is empty")
    if dataset.dim != spec.input_dim:
        raise ParameterError(
            f"dataset dim {dataset.dim} != model input_dim {spec.input_dim}"
        )
    q = cfg.resolve_sampling_rate(dataset.n)
    steps = cfg.resolve_steps(q)
    expected_batch = q * dataset.n
    sigma_count = cfg.resolve_sigma_count()

    state = models.init_params(spec, rng.split("init"))
    opt = OptimizerState(cfg.optimizer, spec.param_count())
    clip_state = ClippingState.fresh(cfg.clipping)
    rng_batch = rng.split("batch")
    rng_grad_noise = rng.split("grad_noise")
    rng_count_noise = rng.split("count_noise")

    history: list[HistoryRow] = []
    nan = float("nan")
    for t in range(steps):
        idx = poisson_subsample(dataset.n, q, rng_batch)
        bound = clip_state.bound
        if idx.size:
            losses, grads, norms = models.per_sample_loss_grads(
                state, dataset.features[idx], dataset.labels[idx]
            )
            loss = float(losses.mean())
            summed = clipping.clip_normalize_batch(grads, norms, bound).sum(axis=0)
        else:
            loss = nan
            norms = np.zeros(0)
            summed = np.zeros(spec.param_count())
        if cfg.record_norm_quantiles and norms.size:
            p50, p90 = (float(v) for v in np.percentile(norms, [50.0, 90.0]))
            p_max = float(norms.max())
        else:
            p50 = p90 = p_max = nan

        noise = gaussian_vector(spec.param_count(), cfg.sigma_grad, rng_grad_noise)
        g_tilde = (summed + noise) / expected_batch
        state = ModelState(opt.update(state.params, g_tilde, cfg.learning_rate), spec)

        b_tilde = nan
        if cfg.clipping.adaptive:
            raw_count = clipping.count_exceeding(norms, cfg.clipping.tau, bound)
            b_tilde = clipping.privatize_count(
                raw_count, expected_batch, sigma_count, rng_count_noise
            )
            clipping.update_bound(clip_state, b_tilde, cfg.clipping)

        history.append(HistoryRow(t, loss, bound, b_tilde, p50, p90, p_max))
        if idx.size and (not math.isfinite(loss) or loss > DIVERGENCE_LOSS):
            raise TrainingDiverged(
                f"loss {loss} at step {t} crossed the divergence threshold", history=history
            )

    metrics = {"final_loss": _last_finite_loss(history)}
    if spec.kind == "mean":
        metrics["estimate"] = float(state.params[0])
    elif eval_dataset is not None:
        metrics.update(evaluate(state, eval_dataset))
    return RunResult(
        state=state,
        history=history,
        metrics=metrics,
        epsilon=charged_epsilon(cfg, q, steps),
        steps=steps,
        sampling_rate=q,
        sigma_grad=cfg.sigma_grad,
        sigma_count=sigma_count,
    )


def _last_finite_loss(history: list[HistoryRow]) -> float:
    for row in reversed(history):
        if math.isfinite(row.loss):
            return row.loss
    return float("nan")
