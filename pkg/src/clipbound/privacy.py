"""Renyi-DP accounting for Poisson-subsampled Gaussian mechanisms.

The gradient query and (for adaptive clipping) the count query are two
Gaussian queries answered on the same subsampled batch; they compose into a
single Gaussian mechanism with combined noise multiplier
sigma = (sigma_grad^-2 + sigma_count^-2)^(-1/2). The accountant evaluates the
integer-order subsampled-Gaussian RDP bound at that combined sigma, composes
additively over steps, and converts to (epsilon, delta).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import CalibrationError, ParameterError

# Integer orders only: the subsampled bound below is the integer-order one.
ORDER_GRID: tuple[int, ...] = tuple(range(2, 65)) + (128, 256)

ACCOUNTANT_FAMILY = "rdp-int"


@dataclass(frozen=True)
class MechanismParams:
    """Mechanism description: sampling rate, steps, noise, target delta.

    sigma_count None (or 0) means there is no count query; then the
    mechanism is the plain gradient query at sigma_grad.
    """

    q: float
    steps: int
    sigma_grad: float
    sigma_count: float | None = None
    delta: float = 1e-5

    def __post_init__(self):
        if not 0.0 <= self.q <= 1.0:
            raise ParameterError(f"sampling rate must be in [0, 1], got {self.q}")
        if self.steps < 1:
            raise ParameterError(f"steps must be >= 1, got {self.steps}")
        if self.sigma_grad <= 0:
            raise ParameterError(f"sigma_grad must be > 0, got {self.sigma_grad}")
        if self.sigma_count is not None and self.sigma_count < 0:
            raise ParameterError(f"sigma_count must be >= 0, got {self.sigma_count}")
        if not 0.0 < self.delta < 1.0:
            raise ParameterError(f"delta must be in (0, 1), got {self.delta}")

    @property
    def effective_sigma_count(self) -> float | None:
        """The count-query noise, with 0 normalized to 'absent'."""
        if self.sigma_count is None or self.sigma_count == 0:
            return None
        return self.sigma_count


@dataclass(frozen=True)
class RdpCurve:
    """RDP values over a strictly increasing grid of orders."""

    orders: tuple[int, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.orders) == 0 or len(self.orders) != len(self.values):
            raise ParameterError("curve needs matching, non-empty orders and values")
        if any(b <= a for a, b in zip(self.orders, self.orders[1:])):
            raise ParameterError("orders must be strictly increasing")
        if any(not math.isfinite(v) or v < 0 for v in self.values):
            raise ParameterError("RDP values must be finite and non-negative")

    def scale(self, factor: float) -> "RdpCurve":
        return RdpCurve(self.orders, tuple(v * factor for v in self.values))


def combined_sigma(sigma_grad: float, sigma_count: float | None = None) -> float:
    """Noise multiplier of the composed two-query Gaussian mechanism.

    (sigma_grad^-2 + sigma_count^-2)^(-1/2); with no count query, sigma_grad.
    """
    if sigma_grad <= 0:
        raise ParameterError(f"sigma_grad must be > 0, got {sigma_grad}")
    if sigma_count is None:
        return float(sigma_grad)
    if sigma_count <= 0:
        raise ParameterError(f"sigma_count must be > 0 or absent, got {sigma_count}")
    return 1.0 / math.sqrt(1.0 / (sigma_grad * sigma_grad) + 1.0 / (sigma_count * sigma_count))


def gaussian_rdp(sigma: float, alpha: float) -> float:
    """RDP of the Gaussian mechanism at sensitivity 1: alpha / (2 sigma^2)."""
    if sigma <= 0:
        raise ParameterError(f"sigma must be > 0, got {sigma}")
    if alpha <= 1:
        raise ParameterError(f"order must be > 1, got {alpha}")
    return alpha / (2.0 * sigma * sigma)


def subsampled_gaussian_rdp(q: float, sigma: float, alpha: int) -> float:
    """Integer-order RDP bound for the Poisson-subsampled Gaussian mechanism.

    (1/(alpha-1)) * log sum_{k=0}^{alpha} C(alpha,k) (1-q)^(alpha-k) q^k
    * exp(k(k-1) / (2 sigma^2)), evaluated in log space.
    """
    if not 0.0 <= q <= 1.0:
        raise ParameterError(f"sampling rate must be in [0, 1], got {q}")
    if sigma <= 0:
        raise ParameterError(f"sigma must be > 0, got {sigma}")
    if int(alpha) != alpha or alpha < 2:
        raise ParameterError(f"order must be an integer >= 2, got {alpha}")
    alpha = int(alpha)
    if q == 0.0:
        return 0.0  # the sample is never touched
    if q == 1.0:
        return gaussian_rdp(sigma, alpha)  # exact reduction of the sum
    k = np.arange(alpha + 1)
    log_terms = (
        gammaln(alpha + 1)
        - gammaln(k + 1)
        - gammaln(alpha - k + 1)
        + k * math.log(q)
        + (alpha - k) * math.log1p(-q)
        + k * (k - 1) / (2.0 * sigma * sigma)
    )
    return float(logsumexp(log_terms)) / (alpha - 1)


def account(params: MechanismParams, orders: tuple[int, ...] = ORDER_GRID) -> RdpCurve:
    """Per-step RDP at the combined sigma, composed additively over steps."""
    sigma = combined_sigma(params.sigma_grad, params.effective_sigma_count)
    values = tuple(params.steps * subsampled_gaussian_rdp(params.q, sigma, a) for a in orders)
    return RdpCurve(tuple(orders), values)


def rdp_to_eps(curve: RdpCurve, delta: float) -> tuple[float, int]:
    """(epsilon, best order): min over orders of rdp(a) + log(1/delta)/(a-1)."""
    if not 0.0 < delta < 1.0:
        raise ParameterError(f"delta must be in (0, 1), got {delta}")
    log_inv_delta = math.log(1.0 / delta)
    candidates = [v + log_inv_delta / (a - 1) for a, v in zip(curve.orders, curve.values)]
    best = int(np.argmin(candidates))
    return float(candidates[best]), int(curve.orders[best])


def epsilon_of(params: MechanismParams, orders: tuple[int, ...] = ORDER_GRID) -> tuple[float, int]:
    """Convenience: account then convert at params.delta."""
    return rdp_to_eps(account(params, orders), params.delta)


def calibrate_sigma(
    target_eps: float,
    delta: float,
    q: float,
    steps: int,
    count_ratio: float = 10.0,
    rel_tol: float = 1e-3,
    sigma_max: float = 1e7,
) -> float:
    """Smallest sigma_grad (to rel_tol) whose accounted epsilon is <= target.

    count_ratio r >= 0 is sigma_count / sigma_grad; r = 0 means no count
    query. Binary search on the monotone map sigma -> epsilon.
    """
    if target_eps <= 0:
        raise ParameterError(f"target epsilon must be > 0, got {target_eps}")
    if count_ratio < 0:
        raise ParameterError(f"count ratio must be >= 0, got {count_ratio}")

    def eps_at(sigma_grad: float) -> float:
        sigma_count = count_ratio * sigma_grad if count_ratio > 0 else None
        params = MechanismParams(q, steps, sigma_grad, sigma_count, delta)
        return rdp_to_eps(account(params), delta)[0]

    hi = 1.0
    while eps_at(hi) > target_eps:
        hi *= 2.0
        if hi > sigma_max:
            raise CalibrationError(
                f"target epsilon {target_eps} unattainable with sigma_grad <= {sigma_max}"
            )
    lo = hi / 2.0
    while eps_at(lo) <= target_eps:
        lo /= 2.0
        if lo < 1e-10:
            break  # target is huge; hi is already far inside the feasible set

    for _ in range(200):
        eps_hi = eps_at(hi)
        if 0.0 <= (target_eps - eps_hi) / target_eps <= rel_tol:
            return hi
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            return hi  # float resolution exhausted; hi still satisfies eps <= target
        if eps_at(mid) > target_eps:
            lo = mid
        else:
            hi = mid
    return hi
