"""Hyperparameter search with conservative privacy charging.

Candidates live on a fixed categorical grid; randomized search draws the
trial count K from a truncated negative binomial (geometric at eta = 1) and
samples configs uniformly with replacement. The privacy charge for the whole
search composes the per-run RDP curve over the full grid size, a deliberately
conservative policy that is provable by plain composition.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ClipboundError, ParameterError
from .numkit import Rng
from .privacy import ORDER_GRID, MechanismParams, RdpCurve, account, rdp_to_eps

# Default search axes: 10 learning rates log-spaced over [1, 10] and 20
# clipping parameters log-spaced over [0.001, 50], all rounded to 4 decimals
# and treated as categorical values.
DEFAULT_LEARNING_RATES = (
    1.0, 1.2915, 1.6681, 2.1544, 2.7826, 3.5938, 4.6416, 5.9948, 7.7426, 10.0,
)
DEFAULT_CLIP_BOUNDS = (
    0.001, 0.0018, 0.0031, 0.0055, 0.0098, 0.0172, 0.0305, 0.0539, 0.0952,
    0.1682, 0.2973, 0.5254, 0.9285, 1.6409, 2.9, 5.1252, 9.0579, 16.0082,
    28.2915, 50.0,
)
DEFAULT_BATCH_SIZES = (1024, 2048, 4096, 8192, 16384, 32768)

POLICY_GRID = "grid-composition"
POLICY_SINGLE = "single-run"
POLICIES = (POLICY_GRID, POLICY_SINGLE)

_PMF_TAIL = 1e-12
_PMF_CHECK_TOL = 1e-9


@dataclass(frozen=True)
class GridSpec:
    """Ordered named axes of categorical values."""

    axes: tuple[tuple[str, tuple], ...]

    def __post_init__(self):
        if not self.axes:
            raise ParameterError("grid needs at least one axis")
        names = [name for name, _ in self.axes]
        if len(set(names)) != len(names):
            raise ParameterError(f"duplicate axis names in {names}")
        for name, values in self.axes:
            if len(values) == 0:
                raise ParameterError(f"axis {name!r} is empty")

    @property
    def size(self) -> int:
        return math.prod(len(values) for _, values in self.axes)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.axes)


def default_grid(include_batch_size: bool = False) -> GridSpec:
    axes = [
        ("learning_rate", DEFAULT_LEARNING_RATES),
        ("clip_param", DEFAULT_CLIP_BOUNDS),
    ]
    if include_batch_size:
        axes.insert(0, ("batch_size", DEFAULT_BATCH_SIZES))
    return GridSpec(tuple(axes))


def build_grid(spec: GridSpec) -> list[dict]:
    """Cartesian product in lexicographic order (first axis slowest)."""
    names = spec.names
    return [
        dict(zip(names, combo))
        for combo in itertools.product(*(values for _, values in spec.axes))
    ]


@dataclass(frozen=True)
class TnbParams:
    """Truncated negative binomial over k = 1, 2, ...

    eta = 1 reduces to the geometric distribution with success rate gamma,
    whose mean is 1/gamma.
    """

    eta: float = 1.0
    gamma: float = 0.5

    def __post_init__(self):
        if self.eta <= -1:
            raise ParameterError(f"eta must be > -1, got {self.eta}")
        if not 0.0 < self.gamma < 1.0:
            raise ParameterError(f"gamma must be in (0, 1), got {self.gamma}")
        total = float(self.pmf_table().sum())
        if abs(total - 1.0) > _PMF_CHECK_TOL:
            raise ParameterError(f"pmf does not normalize: sum {total}")

    def pmf_table(self) -> np.ndarray:
        """pmf values for k = 1.. until the remaining tail is negligible.

        Built from the ratio P[k+1]/P[k] = (1-gamma)(k+eta)/(k+1), which holds
        for every eta > -1 including eta = 0. eta = 1 takes a dedicated branch
        so the table is the geometric distribution exactly, not merely to
        rounding: the general first-term formula evaluates gamma^-1 - 1, which
        already loses bits for gamma like 0.1.
        """
        one_minus = 1.0 - self.gamma
        geometric = self.eta == 1
        if geometric:
            p = self.gamma
        elif self.eta == 0:
            p = one_minus / math.log(1.0 / self.gamma)
        else:
            p = one_minus * self.eta / (self.gamma**-self.eta - 1.0)
        out = [p]
        k = 1
        while k < 1_000_000:
            ratio = one_minus if geometric else one_minus * (k + self.eta) / (k + 1)
            # Future ratios are monotone toward 1 - gamma, so the geometric
            # tail bound below is valid once r_sup < 1.
            r_sup = max(ratio, one_minus)
            if r_sup < 1.0 and p * r_sup / (1.0 - r_sup) < _PMF_TAIL:
                break
            p *= ratio
            out.append(p)
            k += 1
        return np.asarray(out)

    def mean(self) -> float:
        table = self.pmf_table()
        return float((np.arange(1, table.size + 1) * table).sum())


def default_tnb_for_grid(grid_size: int) -> TnbParams:
    """Geometric trial count with expectation equal to the grid size."""
    if grid_size < 1:
        raise ParameterError(f"grid_size must be >= 1, got {grid_size}")
    if grid_size == 1:
        return TnbParams(eta=1.0, gamma=0.5)
    return TnbParams(eta=1.0, gamma=1.0 / grid_size)


def sample_tnb(params: TnbParams, rng: Rng) -> int:
    """Inverse-CDF draw of K >= 1."""
    cdf = np.cumsum(params.pmf_table())
    u = float(rng.random())
    return int(np.searchsorted(cdf, u, side="right")) + 1


@dataclass(frozen=True)
class Trial:
    index: int
    config: dict
    objective: float | None
    per_run_epsilon: float | None
    metrics: dict = field(default_factory=dict)
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


@dataclass
class HpoResult:
    trials: list[Trial]
    best: Trial
    grid_size: int
    k_drawn: int
    policy: str
    per_run_epsilon: float | None = None
    total_epsilon: float | None = None


def run_random_search(
    grid: list[dict],
    objective_fn,
    rng: Rng,
    tnb: TnbParams | None = None,
    fixed_k: int | None = None,
    policy: str = POLICY_GRID,
) -> HpoResult:
    """Evaluate K uniformly drawn grid configs and return the argmax trial.

    objective_fn(config) returns (objective, per_run_epsilon, metrics dict);
    an exception marks that trial failed and excludes it from the argmax.
    Ties go to the earliest trial. K comes from `fixed_k` or a draw from
    `tnb` (exactly one must be given).
    """
    if not grid:
        raise ParameterError("grid is empty")
    if (tnb is None) == (fixed_k is None):
        raise ParameterError("set exactly one of tnb / fixed_k")
    if policy not in POLICIES:
        raise ParameterError(f"unknown charging policy {policy!r}")
    if fixed_k is not None:
        if fixed_k < 1:
            raise ParameterError(f"fixed_k must be >= 1, got {fixed_k}")
        k = fixed_k
    else:
        k = sample_tnb(tnb, rng.split("trial_count"))
    picks = rng.split("trial_configs").integers(0, len(grid), size=k)

    trials: list[Trial] = []
    for i, pick in enumerate(picks):
        config = dict(grid[int(pick)])
        try:
            objective, per_run_eps, metrics = objective_fn(config)
            trials.append(Trial(i, config, float(objective), per_run_eps, metrics))
        except ClipboundError as exc:
            trials.append(Trial(i, config, None, None, error=str(exc)))

    best = None
    for trial in trials:
        if trial.failed:
            continue
        if best is None or trial.objective > best.objective:
            best = trial
    if best is None:
        raise ClipboundError(f"all {len(trials)} trials failed")
    return HpoResult(trials, best, len(grid), k, policy)


def worst_case_curve(curves: list[RdpCurve]) -> RdpCurve:
    """Pointwise maximum over RDP curves sharing one order grid."""
    if not curves:
        raise ParameterError("need at least one curve")
    orders = curves[0].orders
    for curve in curves[1:]:
        if curve.orders != orders:
            raise ParameterError("curves must share the same order grid")
    stacked = np.stack([np.asarray(c.values) for c in curves])
    return RdpCurve(orders, tuple(float(v) for v in stacked.max(axis=0)))


def dphpo_total_epsilon(
    per_run: MechanismParams | list[MechanismParams],
    grid_size: int,
    policy: str = POLICY_GRID,
    orders: tuple[int, ...] = ORDER_GRID,
) -> float:
    """Search-wide epsilon: per-run RDP composed over the full grid size.

    With heterogeneous per-run mechanisms (e.g. batch size on the grid) the
    composition uses the pointwise-worst curve. Policy "single-run" skips
    composition and reports the (worst) per-run epsilon alone.
    """
    if policy not in POLICIES:
        raise ParameterError(f"unknown charging policy {policy!r}")
    if grid_size < 1:
        raise ParameterError(f"grid_size must be >= 1, got {grid_size}")
    params_list = [per_run] if isinstance(per_run, MechanismParams) else list(per_run)
    if not params_list:
        raise ParameterError("need at least one per-run mechanism")
    delta = params_list[0].delta
    if any(p.delta != delta for p in params_list):
        raise ParameterError("per-run mechanisms must share delta")
    curve = worst_case_curve([account(p, orders) for p in params_list])
    if policy == POLICY_SINGLE:
        eps, _ = rdp_to_eps(curve, delta)
        return eps
    eps, _ = rdp_to_eps(curve.scale(grid_size), delta)
    return eps


def dphpo_report(
    per_run: MechanismParams | list[MechanismParams],
    grid_size: int,
    policy: str = POLICY_GRID,
) -> dict:
    """Per-run / search / search-plus-final-run epsilons in one dict."""
    return {
        "per_run_epsilon": dphpo_total_epsilon(per_run, 1, POLICY_SINGLE),
        "hpo_total_epsilon": dphpo_total_epsilon(per_run, grid_size, policy),
        "hpo_plus_final_epsilon": dphpo_total_epsilon(
            per_run, grid_size + 1 if policy == POLICY_GRID else grid_size, policy
        ),
    }
