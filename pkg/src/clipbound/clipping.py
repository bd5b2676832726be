"""Gradient clipping strategies and the adaptive-bound update.

Per-sample gradients are rescaled by min(1/C, 1/||g||), so every clipped
gradient has norm <= 1 and the summed-gradient query has add/remove
sensitivity 1. Adaptive modes update C_t multiplicatively from a privatized
count of gradients whose raw norm exceeds tau * C_t; a positive lower bound
C_LB stops the bound from collapsing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .numkit import Rng, l2_norm

MODE_CONSTANT = "constant"
MODE_ADAPTIVE = "adaptive"


@dataclass(frozen=True)
class ClippingConfig:
    """Clipping strategy parameters.

    mode "constant" keeps the bound at c0 and ignores the adaptation fields;
    mode "adaptive" runs the count/update rule, with c_lb = 0 meaning the
    unbounded variant and c_lb > 0 the lower-bounded one.
    """

    mode: str = MODE_ADAPTIVE
    c0: float = 1.0
    c_lb: float = 0.0
    gamma: float = 0.5
    tau: float = 2.5
    eta_c: float = 0.2

    def __post_init__(self):
        if self.mode not in (MODE_CONSTANT, MODE_ADAPTIVE):
            raise ParameterError(f"unknown clipping mode {self.mode!r}")
        if self.c0 <= 0:
            raise ParameterError(f"initial bound must be > 0, got {self.c0}")
        if self.c_lb < 0:
            raise ParameterError(f"lower bound must be >= 0, got {self.c_lb}")
        if self.c_lb > self.c0:
            raise ParameterError(f"lower bound {self.c_lb} exceeds initial bound {self.c0}")
        if not 0.0 < self.gamma < 1.0:
            raise ParameterError(f"target quantile must be in (0, 1), got {self.gamma}")
        if self.tau <= 0:
            raise ParameterError(f"threshold multiplier must be > 0, got {self.tau}")
        if self.eta_c <= 0:
            raise ParameterError(f"bound learning rate must be > 0, got {self.eta_c}")

    @property
    def adaptive(self) -> bool:
        return self.mode == MODE_ADAPTIVE


@dataclass
class ClippingState:
    """Current bound plus the (step, C_t, b_tilde) trajectory."""

    bound: float
    step: int = 0
    history: list[tuple[int, float, float]] = field(default_factory=list)

    @classmethod
    def fresh(cls, cfg: ClippingConfig) -> "ClippingState":
        return cls(bound=cfg.c0)


def clip_normalize(g: np.ndarray, c: float) -> np.ndarray:
    """g * min(1/C, 1/||g||); output norm is min(||g||/C, 1) <= 1.

    The zero gradient takes the 1/C factor (continuous limit) and stays zero.
    """
    if c <= 0:
        raise ParameterError(f"clipping bound must be > 0, got {c}")
    g = np.asarray(g, dtype=np.float64)
    norm = l2_norm(g)
    # min(1/C, 1/norm) == 1/max(C, norm), and norm 0 falls back to 1/C.
    return g / max(norm, c)


def clip_normalize_batch(grads: np.ndarray, norms: np.ndarray, c: float) -> np.ndarray:
    """Row-wise clip_normalize for a (B, P) gradient matrix with known norms."""
    if c <= 0:
        raise ParameterError(f"clipping bound must be > 0, got {c}")
    if grads.shape[0] == 0:
        return grads.astype(np.float64, copy=False)
    # Divide (rather than multiply by a reciprocal) so each row is
    # bit-identical to clip_normalize on that row.
    divisors = np.maximum(np.asarray(norms, dtype=np.float64), c)
    return np.asarray(grads, dtype=np.float64) / divisors[:, None]


def count_exceeding(norms: np.ndarray, tau: float, c: float) -> int:
    """Number of norms strictly greater than tau * C."""
    if tau <= 0 or c <= 0:
        raise ParameterError("tau and C must be > 0")
    return int(np.count_nonzero(np.asarray(norms, dtype=np.float64) > tau * c))


def privatize_count(b: int, expected_batch: float, sigma_count: float, rng: Rng) -> float:
    """(b + N(0, sigma_count^2)) / B; deliberately not clamped to [0, 1]."""
    if expected_batch <= 0:
        raise ParameterError(f"expected batch size must be > 0, got {expected_batch}")
    if sigma_count < 0:
        raise ParameterError(f"sigma_count must be >= 0, got {sigma_count}")
    noise = float(rng.normal(0.0, sigma_count)) if sigma_count > 0 else 0.0
    return (b + noise) / expected_batch


def update_bound(state: ClippingState, b_tilde: float, cfg: ClippingConfig) -> float:
    """C_{t+1} = max(C_LB, C_t * exp(eta_C * (b_tilde - gamma))); appends history."""
    if not cfg.adaptive:
        raise ParameterError("update_bound requires adaptive mode")
    state.history.append((state.step, state.bound, float(b_tilde)))
    new_bound = max(cfg.c_lb, state.bound * float(np.exp(cfg.eta_c * (b_tilde - cfg.gamma))))
    state.bound = new_bound
    state.step += 1
    return new_bound
