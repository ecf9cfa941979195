"""Double Q-learning and MaxMin Q-learning under the cost-minimisation convention."""

from __future__ import annotations

import numpy as np

from . import _kernels
from .mdp import DEFAULT_INIT_FLOOR, Mdp, init_q
from .qlearning import Schedules, _run_until_covered
from .seeding import make_rng


def _budget(env: Mdp, min_visits: int, max_steps):
    return max_steps or 2000 * env.num_states * env.num_actions * max(min_visits, 1)


def double_q(env: Mdp, schedules: Schedules, min_visits: int, trajectory_length: int, seed: int,
             init_floor: float = DEFAULT_INIT_FLOOR, max_steps: int | None = None,
             steps: int | None = None) -> np.ndarray:
    """Two tables with cross-table bootstrapping; returns their average."""
    n, m = env.num_states, env.num_actions
    qa, qb = init_q(n, m, init_floor), init_q(n, m, init_floor)
    cdf = _kernels.cumulative(env.transitions)

    def chunk(u, cursor, visits):
        _kernels.double_q_chunk(qa, qb, cdf, env.costs, env.gamma, u, schedules.c1, schedules.c2,
                                schedules.c3, trajectory_length, cursor, visits)

    _run_until_covered(chunk, n, m, min_visits, _budget(env, min_visits, max_steps),
                       make_rng(seed, "double_q"), 5, steps)
    return 0.5 * (qa + qb)


def maxmin_q(env: Mdp, schedules: Schedules, min_visits: int, trajectory_length: int, seed: int,
             num_tables: int = 2, init_floor: float = DEFAULT_INIT_FLOOR,
             max_steps: int | None = None, steps: int | None = None) -> np.ndarray:
    """``num_tables`` tables, one updated per step, bootstrapped from their elementwise max."""
    if num_tables < 1:
        raise ValueError("num_tables must be positive")
    n, m = env.num_states, env.num_actions
    tables = np.stack([init_q(n, m, init_floor) for _ in range(num_tables)])
    cdf = _kernels.cumulative(env.transitions)

    def chunk(u, cursor, visits):
        _kernels.maxmin_chunk(tables, cdf, env.costs, env.gamma, u, schedules.c1, schedules.c2,
                              schedules.c3, trajectory_length, cursor, visits)

    _run_until_covered(chunk, n, m, min_visits, _budget(env, min_visits, max_steps),
                       make_rng(seed, "maxmin_q"), 5, steps)
    return tables.max(axis=0)
