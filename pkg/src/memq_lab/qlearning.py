"""Tabular Q-learning, the ensemble combiner and the multi-member learner.

The ensemble table follows ``Q_hat <- u_t Q_hat + (1 - u_t) mean_n Q_n``.
Because this is linear in the member tables, ``Q_hat`` equals the mean over
members of per-member exponential averages ``E_n`` started from the same
initial table.  Each member therefore carries its own ``E_n`` and any
subset of members can be combined afterwards without re-running anything.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .mdp import DEFAULT_INIT_FLOOR, Mdp, average_policy_error, init_q, policy_from_q
from .seeding import make_rng

CHUNK = 1 << 15


class BudgetError(RuntimeError):
    """A learner hit its step cap before covering every state-action pair."""


@dataclass(frozen=True)
class Schedules:
    c1: float = 1000.0
    c2: float = 0.999
    c3: float = 0.05
    c4: float = 2000.0

    def __post_init__(self):
        if self.c1 <= 0 or self.c4 <= 0:
            raise ValueError("c1 and c4 must be positive")
        if not 0.0 < self.c2 < 1.0 or not 0.0 < self.c3 < 1.0:
            raise ValueError("c2 and c3 must lie in (0, 1)")

    def alpha(self, t):
        return 1.0 / (1.0 + np.asarray(t, dtype=float) / self.c1)

    def epsilon(self, t):
        return np.maximum(self.c2 ** np.asarray(t, dtype=float), self.c3)

    def update_ratio(self, t):
        return -np.expm1(-np.asarray(t, dtype=float) / self.c4)

    @classmethod
    def for_budget(cls, num_states: int, num_actions: int, steps: int,
                   freeze_fraction: float = 0.6, **overrides) -> "Schedules":
        """Constants scaled to a problem size and step budget.

        ``c1`` grows with the table size.  ``c4`` is chosen so that the
        ensemble average is centred at ``freeze_fraction * steps``: with
        ``u_t = 1 - exp(-t / c4)`` the averaging weight peaks at
        ``t = c4 ln c4``.
        """
        target = freeze_fraction * steps
        c4 = target / max(math.log(target), 1.0)
        for _ in range(50):
            c4 = target / max(math.log(c4), 1.0)
        values = {"c1": 10.0 * num_states * num_actions, "c4": c4}
        values.update(overrides)
        return cls(**values)


def q_step(q: np.ndarray, s: int, a: int, s_next: int, cost: float, alpha: float,
           gamma_eff: float) -> np.ndarray:
    """One Q-learning update; returns a new table."""
    out = np.array(q, dtype=float, copy=True)
    out[s, a] = (1.0 - alpha) * q[s, a] + alpha * (cost + gamma_eff * np.min(q[s_next]))
    return out


def _run_until_covered(chunk_fn, num_states, num_actions, min_visits, max_steps, rng, width,
                       steps=None):
    """Drive ``chunk_fn`` until every pair has ``min_visits`` updates, or for exactly ``steps`` steps."""
    visits = np.zeros((num_states, num_actions), dtype=np.int64)
    cursor = np.zeros(3, dtype=np.int64)
    if steps is not None:
        while cursor[2] < steps:
            chunk_fn(rng.random((min(CHUNK, steps - int(cursor[2])), width)), cursor, visits)
        return int(cursor[2])
    while visits.min() < min_visits:
        if cursor[2] >= max_steps:
            raise BudgetError(
                f"{int((visits < min_visits).sum())} pairs below {min_visits} visits after {max_steps} steps"
            )
        u = rng.random((min(CHUNK, max_steps - int(cursor[2])), width))
        chunk_fn(u, cursor, visits)
    return int(cursor[2])


def run_single_env(env: Mdp, schedules: Schedules, min_visits: int, trajectory_length: int,
                   seed: int, init_floor: float = DEFAULT_INIT_FLOOR,
                   max_steps: int | None = None, steps: int | None = None) -> np.ndarray:
    """Epsilon-greedy episodic Q-learning until every pair has ``min_visits`` updates.

    With ``steps`` set the learner instead runs for exactly that many steps.
    """
    n, m = env.num_states, env.num_actions
    max_steps = max_steps or 2000 * n * m * max(min_visits, 1)
    q = init_q(n, m, init_floor)
    cdf = _kernels.cumulative(env.transitions)
    dummy = np.zeros((1, 1))
    since = np.ones((1, 1), dtype=np.int64)
    log_cum = np.zeros(1)
    err = np.zeros(2)

    def chunk(u, cursor, visits):
        _kernels.member_chunk(q, cdf, env.costs, env.gamma, u, schedules.c1, schedules.c2,
                              schedules.c3, trajectory_length, cursor, visits, 1, False,
                              dummy, since, dummy, log_cum, 0, err)

    _run_until_covered(chunk, n, m, min_visits, max_steps, make_rng(seed, "single"), 4, steps)
    return q


# -- ensemble combiner --------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EnsembleState:
    members: tuple
    q_hat: np.ndarray
    u: float | None = None  # fixed ratio, or None for the scheduled ratio
    t: int = 0


def ensemble_update(state: EnsembleState, schedules: Schedules | None = None,
                    num_members: int | None = None) -> EnsembleState:
    """``Q_hat <- u Q_hat + (1 - u) mean(Q_n)`` and advance the step counter."""
    if num_members is not None and len(state.members) != num_members:
        raise ValueError(f"expected {num_members} member tables, got {len(state.members)}")
    if not state.members:
        raise ValueError("ensemble has no members")
    t = state.t + 1
    if state.u is not None:
        u = state.u
    else:
        u = float((schedules or Schedules()).update_ratio(t))
    mean = np.mean(np.stack(state.members), axis=0)
    if mean.shape != state.q_hat.shape:
        raise ValueError("member and ensemble tables differ in shape")
    return replace(state, q_hat=u * state.q_hat + (1.0 - u) * mean, t=t)


def log_ratio_cumsum(steps: int, schedules: Schedules, fixed_u: float | None = None) -> np.ndarray:
    """``L[t] = sum_{tau <= t} ln u_tau`` with ``L[0] = 0``."""
    t = np.arange(1, steps + 1, dtype=float)
    if fixed_u is None:
        logs = np.log(-np.expm1(-t / schedules.c4))
    else:
        logs = np.full(steps, math.log(max(fixed_u, 1e-300)))
    return np.concatenate(([0.0], np.cumsum(logs)))


# -- member learners ------------------------------------------------------------


@dataclass(eq=False)
class MemberRun:
    order: int
    q: np.ndarray
    ema: np.ndarray
    times: np.ndarray
    q_snapshots: np.ndarray
    ema_snapshots: np.ndarray
    error_mean: float
    error_var: float
    visits: np.ndarray
    seconds: float = 0.0

    @property
    def lam(self) -> float:
        """Half-width of the uniform error law with this variance."""
        return math.sqrt(3.0 * max(self.error_var, 0.0))


def run_member(env: Mdp, order: int, steps: int, schedules: Schedules, rng: np.random.Generator,
               qstar: np.ndarray, trajectory_length: int = 10, log_cum: np.ndarray | None = None,
               fixed_u: float | None = None, init_floor: float = DEFAULT_INIT_FLOOR,
               checkpoints=(), window_fraction: float = 0.5) -> MemberRun:
    """Run member ``order`` in lockstep time: it updates on every ``order``-th global step.

    Error statistics of ``Q_n - qstar`` are duration-weighted over the last
    ``window_fraction`` of the ``steps`` global steps and pooled over all pairs.
    """
    start = time.perf_counter()
    n, m = env.num_states, env.num_actions
    if log_cum is None:
        log_cum = log_ratio_cumsum(steps, schedules, fixed_u)
    q = init_q(n, m, init_floor)
    ema = q.copy()
    since = np.ones((n, m), dtype=np.int64)
    cdf = _kernels.cumulative(env.transitions)
    visits = np.zeros((n, m), dtype=np.int64)
    cursor = np.zeros(3, dtype=np.int64)
    err = np.zeros(2)
    win_start = int(steps - math.floor(window_fraction * steps)) + 1
    times = sorted({int(c) for c in checkpoints if 0 < c <= steps})
    q_snaps, e_snaps = [], []
    for t_stop in times + [steps]:
        todo = t_stop // order - int(cursor[2])
        while todo > 0:
            u = rng.random((min(CHUNK, todo), 4))
            _kernels.member_chunk(q, cdf, env.costs, env.gamma, u, schedules.c1, schedules.c2,
                                  schedules.c3, trajectory_length, cursor, visits, order, True,
                                  ema, since, qstar, log_cum, win_start, err)
            todo -= u.shape[0]
        if len(q_snaps) < len(times):
            q_snaps.append(q.copy())
            e_snaps.append(_kernels.ema_snapshot(ema, since, q, t_stop, log_cum))
    _kernels.finalize(ema, since, q, qstar, steps, log_cum, win_start, err)
    weight = n * m * (steps - win_start + 1)
    mean = err[0] / weight
    var = err[1] / weight - mean * mean
    shape = (0, n, m)
    return MemberRun(order, q, ema, np.array(times, dtype=np.int64),
                     np.array(q_snaps) if q_snaps else np.empty(shape),
                     np.array(e_snaps) if e_snaps else np.empty(shape),
                     float(mean), float(max(var, 0.0)), visits, time.perf_counter() - start)


@dataclass
class LearnerConfig:
    steps: int = 200_000
    trajectory_length: int = 10
    schedules: Schedules = field(default_factory=Schedules)
    fixed_u: float | None = None
    init_floor: float = DEFAULT_INIT_FLOOR
    num_checkpoints: int = 0
    window_fraction: float = 0.5
    true_base: bool = True  # member 1 samples the real environment

    def checkpoint_times(self) -> list:
        if self.num_checkpoints <= 0:
            return []
        return [int(round(self.steps * (i + 1) / self.num_checkpoints)) for i in range(self.num_checkpoints)]


class MemberPool:
    """Lazily runs and caches member learners keyed by ``(order, repeat)``.

    Member ``n`` in repeat ``r`` always draws from the stream
    ``(seed, "member", r, n)``, so its run is the same whichever subset it
    ends up in and every selection method sees identical learners.
    """

    def __init__(self, family, true_env: Mdp | None, qstar: np.ndarray, config: LearnerConfig, seed: int):
        self.family = family
        self.true_env = true_env
        self.qstar = qstar
        self.config = config
        self.seed = seed
        self._log_cum = log_ratio_cumsum(config.steps, config.schedules, config.fixed_u)
        self._runs = {}
        self.invocations = 0

    def env(self, order: int) -> Mdp:
        if order == 1 and self.config.true_base and self.true_env is not None:
            return self.true_env.with_gamma(self.family.member(1).gamma)
        return self.family.member(order)

    def run(self, order: int, repeat: int = 0) -> MemberRun:
        key = (order, repeat)
        if key not in self._runs:
            cfg = self.config
            self._runs[key] = run_member(
                self.env(order), order, cfg.steps, cfg.schedules,
                make_rng(self.seed, "member", repeat, order), self.qstar,
                cfg.trajectory_length, self._log_cum, cfg.fixed_u, cfg.init_floor,
                cfg.checkpoint_times(), cfg.window_fraction,
            )
        return self._runs[key]

    def ensemble(self, orders, repeat: int = 0) -> np.ndarray:
        """Final ensemble table of the given member subset."""
        self.invocations += 1
        return np.mean([self.run(n, repeat).ema for n in orders], axis=0)

    def ensemble_trace(self, orders, repeat: int = 0) -> np.ndarray:
        return np.mean([self.run(n, repeat).ema_snapshots for n in orders], axis=0)


@dataclass(eq=False)
class NeqlResult:
    q_hat: np.ndarray
    policy: np.ndarray
    orders: list
    members: list
    trace: list


def run_neql(pool: MemberPool, orders, repeat: int = 0, optimal_policy=None) -> NeqlResult:
    """Ensemble learner over the given orders, with one trace record per checkpoint."""
    orders = sorted(orders)
    runs = [pool.run(n, repeat) for n in orders]
    q_hat = pool.ensemble(orders, repeat)
    sched = pool.config.schedules
    trace = []
    if runs and runs[0].times.size:
        hats = pool.ensemble_trace(orders, repeat)
        for i, t in enumerate(runs[0].times):
            gaps = [float(np.max(np.abs(pool.env(r.order).bellman(r.q_snapshots[i]) - r.q_snapshots[i])))
                    for r in runs]
            rec = {
                "t": int(t),
                "member_bellman_gaps": gaps,
                "ensemble_ape": None if optimal_policy is None
                else average_policy_error(optimal_policy, policy_from_q(hats[i])),
                "u_t": float(pool.config.fixed_u if pool.config.fixed_u is not None else sched.update_ratio(t)),
                "eps_t": float(sched.epsilon(t)),
                "alpha_t": float(sched.alpha(t)),
            }
            trace.append(rec)
    return NeqlResult(q_hat, policy_from_q(q_hat), orders, runs, trace)


def write_trace(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
