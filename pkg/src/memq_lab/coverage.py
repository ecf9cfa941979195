"""Occupancy measures, coverage coefficients and interval bounds on log-coverage.

The coverage coefficient of a pair is ``C(s, a) = d(s, a) / v(s, a)`` where
``d`` is the action-selection distribution induced by a Q-table and ``v`` a
fixed exploration distribution.  The bound evaluators give intervals for the
mean and variance of ``ln C`` under a uniform error model on the learned
Q-values with half-width ``lambda``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mdp import DEFAULT_INIT_FLOOR

MODES = ("linear", "softmax")
NORMALIZATIONS = ("joint", "state")
THETA_INFLATION = 1e-6


def occupancy(q: np.ndarray, mode: str = "linear") -> np.ndarray:
    """Per-state action distribution induced by ``q``.

    linear: ``d(s, a) = Q(s, a) / sum_b Q(s, b)``; softmax: ``exp`` weights.
    Both are applied exactly as written, so under cost minimisation the
    larger Q-value gets the larger weight.
    """
    q = np.asarray(q, dtype=float)
    if mode == "linear":
        if np.any(q <= 0.0):
            raise ValueError("linear occupancy needs a strictly positive Q-table")
        totals = q.sum(axis=1, keepdims=True)
        return q / totals
    if mode == "softmax":
        if not np.all(np.isfinite(q)):
            raise ValueError("softmax occupancy needs a finite Q-table")
        z = np.exp(q - q.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)
    raise ValueError(f"mode must be one of {MODES}")


def _normalize(v: np.ndarray, normalization: str) -> np.ndarray:
    if normalization == "joint":
        return v / v.sum()
    if normalization == "state":
        return v / v.sum(axis=1, keepdims=True)
    raise ValueError(f"normalization must be one of {NORMALIZATIONS}")


@dataclass(eq=False)
class ExplorationDistribution:
    v: np.ndarray
    floor: float
    normalization: str = "joint"
    log_mean: np.ndarray | None = None  # per-pair E[ln v] across learners
    log_var: np.ndarray | None = None  # per-pair V[ln v] across learners

    def __post_init__(self):
        if self.log_mean is None:
            self.log_mean = np.log(self.v)
        if self.log_var is None:
            self.log_var = np.zeros_like(self.v)

    def moments(self, pairs=None) -> tuple:
        """``(E[ln v], V[ln v])`` under uniform weighting over ``pairs`` (all pairs if None)."""
        if pairs is None:
            return float(self.log_mean.mean()), float(self.log_var.mean())
        s, a = np.asarray(pairs).T
        return float(self.log_mean[s, a].mean()), float(self.log_var[s, a].mean())

    def pair_moments(self, s: int, a: int) -> tuple:
        return float(self.log_mean[s, a]), float(self.log_var[s, a])

    @classmethod
    def uniform(cls, num_states: int, num_actions: int, normalization: str = "joint"):
        size = num_states * num_actions if normalization == "joint" else num_actions
        v = np.full((num_states, num_actions), 1.0 / size)
        return cls(v, 0.0, normalization)


def exploration_from_tables(tables, mode: str = "linear", normalization: str = "joint",
                            floor: float | None = None) -> ExplorationDistribution:
    """Floored, renormalised average of the occupancies of independent learners."""
    tables = [np.asarray(t, dtype=float) for t in tables]
    if not tables:
        raise ValueError("need at least one learner table")
    n, m = tables[0].shape
    floor = 1e-6 / (n * m) if floor is None else floor

    def prepared(d):
        scaled = d / n if normalization == "joint" else d
        return _normalize(np.maximum(scaled, floor), normalization)

    each = np.stack([prepared(occupancy(t, mode)) for t in tables])
    v = _normalize(np.maximum(each.mean(axis=0), floor), normalization)
    logs = np.log(each)
    return ExplorationDistribution(v, floor, normalization, logs.mean(axis=0), logs.var(axis=0))


def build_exploration_dist(base_env, seeds, schedules, min_visits: int = 200,
                           trajectory_length: int = 10, mode: str = "linear",
                           normalization: str = "joint", floor: float | None = None,
                           init_floors=(DEFAULT_INIT_FLOOR,)) -> ExplorationDistribution:
    """Train independent learners on the real environment and average their occupancies.

    Learner ``i`` uses seed ``seeds[i]`` and initial value
    ``init_floors[i % len(init_floors)]``.
    """
    from .qlearning import run_single_env

    seeds = list(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    tables = [
        run_single_env(base_env, schedules, min_visits, trajectory_length, sd,
                       init_floor=init_floors[i % len(init_floors)])
        for i, sd in enumerate(seeds)
    ]
    return exploration_from_tables(tables, mode, normalization, floor)


# -- coverage ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CoverageRecord:
    local: np.ndarray
    log_local: np.ndarray
    global_value: float
    log_global: float


def coverage(occ: np.ndarray, v: ExplorationDistribution) -> CoverageRecord:
    local = np.asarray(occ) / v.v
    log_local = np.log(occ) - np.log(v.v)
    return CoverageRecord(local, log_local, float(local.max()), float(log_local.max()))


@dataclass(eq=False)
class CoverageTrace:
    pairs: list
    times: list = field(default_factory=list)
    log_local: list = field(default_factory=list)
    log_global: list = field(default_factory=list)

    def add(self, t: int, occ: np.ndarray, v: ExplorationDistribution) -> CoverageRecord:
        rec = coverage(occ, v)
        s, a = np.asarray(self.pairs).T
        self.times.append(int(t))
        self.log_local.append(rec.log_local[s, a])
        self.log_global.append(rec.log_global)
        return rec

    def series(self) -> np.ndarray:
        """``(T, P)`` array of ``ln C`` for the tracked pairs."""
        return np.array(self.log_local).reshape(len(self.times), len(self.pairs))

    def window(self, burn_in: float = 0.5) -> np.ndarray:
        x = self.series()
        return x[int(math.floor(burn_in * len(x))):]

    def mean(self, burn_in: float = 0.5) -> np.ndarray:
        return self.window(burn_in).mean(axis=0)

    def var(self, burn_in: float = 0.5) -> np.ndarray:
        return self.window(burn_in).var(axis=0)


def trace_from_tables(tables, times, pairs, v: ExplorationDistribution, mode: str = "linear"):
    tr = CoverageTrace([tuple(int(x) for x in p) for p in pairs])
    for t, q in zip(times, tables):
        tr.add(t, occupancy(q, mode), v)
    return tr


# -- moments and bounds ---------------------------------------------------------


def taylor_log_moments(mu: float, sigma2: float) -> tuple:
    """Second-order approximation of ``(E[ln X], V[ln X])`` from the mean and variance of X."""
    if mu <= 0.0:
        raise ValueError("mu must be positive")
    if sigma2 < 0.0:
        raise ValueError("sigma2 must be non-negative")
    return math.log(mu) - sigma2 / (2.0 * mu * mu), sigma2 / (mu * mu)


@dataclass(frozen=True)
class BoundSet:
    exp_lb: float
    exp_ub: float
    var_lb: float
    var_ub: float
    prop: int
    inputs: dict = field(default_factory=dict)

    @property
    def width(self) -> float:
        return self.exp_ub - self.exp_lb

    def contains_mean(self, x: float, slack: float = 0.0) -> bool:
        pad = slack * self.width
        return self.exp_lb - pad <= x <= self.exp_ub + pad


def softmax_epsilon_bound(theta: float) -> float:
    if theta <= 0.0:
        raise ValueError("theta must be positive")
    return 1.0 / (1.0 + math.exp(-1.0 / theta))


def _check(q_star_sa, theta, lam, u=None):
    if not q_star_sa > 0.0:
        raise ValueError("Q*(s, a) must be positive")
    if not theta > 1.0:
        raise ValueError("theta must exceed 1")
    if lam < 0.0:
        raise ValueError("lambda must be non-negative")
    if u is not None and not 0.0 < u < 1.0:
        raise ValueError("u must lie in (0, 1)")


# Endpoints are evaluated in extended precision and rounded once: the log term
# and -E[ln v] can cancel to a few parts in 1e5, which costs double precision
# several digits.
_X = np.longdouble
_ONE, _TWO, _HALF = _X(1), _X(2), _X(0.5)


def _out(*vals) -> tuple:
    return tuple(float(x) for x in vals)


def _two_action(k, theta: float, e: float, v: float, mode: str, tight_lower: bool):
    """Shared shape of the two-action bounds with error scale ``k = lambda^2 / (3 Q*^2)``."""
    th, e, v = _X(theta), _X(e), _X(v)
    if mode == "linear":
        p_hi = th / (_ONE + th)
        log_lo = np.log(_ONE / (_ONE + th))
    elif mode == "softmax":
        p_hi = _ONE / (_ONE + np.exp(-_ONE / th))
        log_lo = np.log(_ONE - p_hi)
    else:
        raise ValueError(f"mode must be one of {MODES}")
    exp_ub = np.log(p_hi) + k * (_TWO * p_hi ** 2 - _HALF) - e
    var_ub = k * (_ONE + _TWO * p_hi) ** 2 + v
    if tight_lower:
        exp_lb = log_lo - k / _TWO - e
        var_lb = max(k * (_ONE - 4 * p_hi) + v, _X(0))
    else:
        # ensemble bounds drop the error term from both lower endpoints
        exp_lb = log_lo - e
        var_lb = v
    return _out(exp_lb, exp_ub, var_lb, var_ub)


def prop1_bounds(q_star_sa: float, theta: float, lambda_n: float, v_moments, mode: str = "linear") -> BoundSet:
    """Single-environment bounds on the mean and variance of ``ln C``."""
    _check(q_star_sa, theta, lambda_n)
    e, v = v_moments
    k = _X(lambda_n) ** 2 / (3 * _X(q_star_sa) ** 2)
    out = _two_action(k, theta, e, v, mode, True)
    return BoundSet(*out, prop=1, inputs={"q_star": q_star_sa, "theta": theta, "lambda": lambda_n,
                                          "num_actions": 2, "mode": mode})


def ensemble_error_scale(lam: float, u: float) -> float:
    """``f(lambda, u) = (lambda^2 / 3)(1 - u)/(1 + u)``, the steady-state error variance of the ensemble."""
    return float(_ensemble_scale(lam, u))


def _ensemble_scale(lam, u):
    u = _X(u)
    return _X(lam) ** 2 / 3 * ((_ONE - u) / (_ONE + u))


def prop2_bounds(q_star_sa: float, theta: float, lambda_max: float, u: float, v_moments,
                 mode: str = "linear") -> BoundSet:
    """Ensemble bounds: error scale shrunk by ``(1 - u) / (1 + u)``."""
    _check(q_star_sa, theta, lambda_max, u)
    e, v = v_moments
    k = _ensemble_scale(lambda_max, u) / (1 * _X(q_star_sa) ** 2)
    out = _two_action(k, theta, e, v, mode, False)
    return BoundSet(*out, prop=2, inputs={"q_star": q_star_sa, "theta": theta, "lambda": lambda_max,
                                          "u": u, "num_actions": 2, "mode": mode})


def prop3_bounds(q_star_sa: float, theta: float, lambda_max: float, u: float, num_members: int,
                 v_moments, mode: str = "linear") -> BoundSet:
    """Ensemble bounds with ``K`` independent members: error scale ``f(lambda, u) / (K Q*^2)``."""
    _check(q_star_sa, theta, lambda_max, u)
    if num_members < 1:
        raise ValueError("K must be at least 1")
    e, v = v_moments
    k = _ensemble_scale(lambda_max, u) / (num_members * _X(q_star_sa) ** 2)
    out = _two_action(k, theta, e, v, mode, False)
    return BoundSet(*out, prop=3, inputs={"q_star": q_star_sa, "theta": theta, "lambda": lambda_max,
                                          "u": u, "K": num_members, "num_actions": 2, "mode": mode,
                                          "f": "lambda^2/3*(1-u)/(1+u)"})


def prop4_bounds(q_star_sa: float, theta: float, lambda_n: float, num_actions: int, v_moments) -> BoundSet:
    """Single-environment bounds for any number of actions; equals the two-action case at ``|A| = 2``."""
    _check(q_star_sa, theta, lambda_n)
    if num_actions < 2:
        raise ValueError("need at least two actions")
    if num_actions == 2:
        b = prop1_bounds(q_star_sa, theta, lambda_n, v_moments)
        return BoundSet(b.exp_lb, b.exp_ub, b.var_lb, b.var_ub, prop=4,
                        inputs={"q_star": q_star_sa, "theta": theta, "lambda": lambda_n, "num_actions": 2})
    e, v = _X(v_moments[0]), _X(v_moments[1])
    na, th = _X(num_actions), _X(theta)
    k = _X(lambda_n) ** 2 / (3 * _X(q_star_sa) ** 2)
    exp_lb = np.log(_ONE / (_ONE + (na - _ONE) * th)) - k / _TWO - e
    exp_ub = np.log(th / (th + (na - _ONE))) + k * ((na * na / _TWO) * th ** 2 / (th + (na - _ONE)) ** 2 - _HALF) - e
    var_lb = max(k * (_ONE - _TWO * na * th / (_ONE + th)) + v, _X(0))
    var_ub = k * (_ONE + na * th / (th + (na - _ONE))) ** 2 + v
    return BoundSet(*_out(exp_lb, exp_ub, var_lb, var_ub), prop=4,
                    inputs={"q_star": q_star_sa, "theta": theta, "lambda": lambda_n, "num_actions": num_actions})


def estimate_theta(q_star: np.ndarray, inflation: float = THETA_INFLATION) -> float:
    """Largest within-state ratio of optimal Q-values, nudged above 1 if all ratios are 1."""
    q_star = np.asarray(q_star, dtype=float)
    if np.any(q_star <= 0.0):
        raise ValueError("Q* must be strictly positive")
    theta = float(np.max(q_star.max(axis=1) / q_star.min(axis=1)))
    return theta if theta > 1.0 else 1.0 + inflation


def estimate_lambda(errors) -> tuple:
    """``(mu, lambda)`` from pooled Q-errors: mean and ``sqrt(3 * variance)``."""
    x = np.asarray(errors, dtype=float).ravel()
    return float(x.mean()), float(math.sqrt(3.0 * x.var()))


BOUND_COLUMNS = ("t", "s", "a", "ln_c", "exp_lb", "exp_ub", "var_lb", "var_ub", "prop_id")


def write_bound_csv(path, pair, times, ln_c, bounds: BoundSet) -> None:
    s, a = pair
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(BOUND_COLUMNS)
        for t, x in zip(times, ln_c):
            w.writerow([int(t), int(s), int(a), repr(float(x)), repr(bounds.exp_lb), repr(bounds.exp_ub),
                        repr(bounds.var_lb), repr(bounds.var_ub), bounds.prop])
