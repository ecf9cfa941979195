"""Numba inner loops.

Every kernel consumes pre-drawn uniforms ``u`` (one row per step) so the
random stream is owned by numpy and results do not depend on chunking.
Transition sampling uses per-row cumulative distributions ``cdf`` of shape
``(A, S, S)``.
"""

from __future__ import annotations

import numpy as np
from numba import njit


def cumulative(transitions: np.ndarray) -> np.ndarray:
    """Row CDFs with the last positive entry of each row pinned to infinity.

    The pin makes rounding in the cumulative sum unable to select a
    zero-probability trailing state.
    """
    cdf = np.cumsum(transitions, axis=2)
    n = transitions.shape[2]
    last = n - 1 - np.argmax(transitions[:, :, ::-1] > 0.0, axis=2)
    cdf[np.arange(n) >= last[..., None]] = np.inf
    return cdf


@njit(cache=True)
def _next_state(cdf_row, r):
    return np.searchsorted(cdf_row, r, side="right")


@njit(cache=True)
def _argmin_row(q, s):
    best = 0
    val = q[s, 0]
    for a in range(1, q.shape[1]):
        if q[s, a] < val:
            val = q[s, a]
            best = a
    return best


@njit(cache=True)
def _min_row(q, s):
    val = q[s, 0]
    for a in range(1, q.shape[1]):
        if q[s, a] < val:
            val = q[s, a]
    return val


@njit(cache=True)
def estimate_chunk(cdf, costs, noise, u, min_visits, traj_len, eps,
                   counts, cost_sum, visits, cursor):
    """Collect coverage-seeking trajectories.

    ``cursor`` holds ``[state, steps_left, trajectories, deficient_pairs]``.
    Returns the number of rows of ``u`` consumed.
    """
    num_states, num_actions = costs.shape
    i = 0
    while i < u.shape[0] and cursor[3] > 0:
        if cursor[1] == 0:
            best = 0
            best_v = np.iinfo(np.int64).max
            for s in range(num_states):
                for a in range(num_actions):
                    if visits[s, a] < best_v:
                        best_v = visits[s, a]
                        best = s
            cursor[0] = best
            cursor[1] = traj_len
            cursor[2] += 1
        s = cursor[0]
        if u[i, 0] < eps:
            a = min(int(u[i, 1] * num_actions), num_actions - 1)
        else:
            a = 0
            for b in range(1, num_actions):
                if visits[s, b] < visits[s, a]:
                    a = b
        s2 = _next_state(cdf[a, s], u[i, 2])
        c = costs[s, a] * (1.0 + noise * (2.0 * u[i, 3] - 1.0))
        counts[s, a, s2] += 1
        cost_sum[s, a] += c
        visits[s, a] += 1
        if visits[s, a] == min_visits:
            cursor[3] -= 1
        cursor[0] = s2
        cursor[1] -= 1
        i += 1
    return i


@njit(cache=True)
def _flush(ema, since, q, qstar, s, a, t_end, log_cum, win_start, err):
    """Fold the value held by ``q[s, a]`` over steps ``since..t_end`` into the EMA and error sums."""
    t0 = since[s, a]
    if t_end < t0:
        return
    x = q[s, a]
    p = np.exp(log_cum[t_end] - log_cum[t0 - 1])
    ema[s, a] = p * ema[s, a] + (1.0 - p) * x
    lo = max(t0, win_start)
    if t_end >= lo:
        d = t_end - lo + 1
        e = x - qstar[s, a]
        err[0] += d * e
        err[1] += d * e * e


@njit(cache=True)
def member_chunk(q, cdf, costs, gamma_eff, u, c1, c2, c3, traj_len, cursor, visits,
                 stride, track, ema, since, qstar, log_cum, win_start, err):
    """Run ``u.shape[0]`` epsilon-greedy Q-learning updates of one learner.

    ``cursor`` holds ``[state, steps_left, local_step]``; the k-th update
    happens at global step ``k * stride``.  When ``track`` is set the
    per-entry EMA and post-window error sums are maintained lazily.
    """
    num_states, num_actions = costs.shape
    for i in range(u.shape[0]):
        k = cursor[2] + 1
        cursor[2] = k
        if cursor[1] == 0:
            cursor[0] = min(int(u[i, 3] * num_states), num_states - 1)
            cursor[1] = traj_len
        s = cursor[0]
        alpha = 1.0 / (1.0 + k / c1)
        eps = max(c2 ** k, c3)
        if u[i, 0] < eps:
            a = min(int(u[i, 1] * num_actions), num_actions - 1)
        else:
            a = _argmin_row(q, s)
        s2 = _next_state(cdf[a, s], u[i, 2])
        target = costs[s, a] + gamma_eff * _min_row(q, s2)
        new = (1.0 - alpha) * q[s, a] + alpha * target
        if track:
            t = k * stride
            _flush(ema, since, q, qstar, s, a, t - 1, log_cum, win_start, err)
            since[s, a] = t
        q[s, a] = new
        visits[s, a] += 1
        cursor[0] = s2
        cursor[1] -= 1


@njit(cache=True)
def ema_snapshot(ema, since, q, t, log_cum):
    """EMA of every entry at step ``t`` without mutating the accumulators."""
    out = np.empty_like(ema)
    for s in range(q.shape[0]):
        for a in range(q.shape[1]):
            t0 = since[s, a]
            if t < t0:
                out[s, a] = ema[s, a]
            else:
                p = np.exp(log_cum[t] - log_cum[t0 - 1])
                out[s, a] = p * ema[s, a] + (1.0 - p) * q[s, a]
    return out


@njit(cache=True)
def finalize(ema, since, q, qstar, t_end, log_cum, win_start, err):
    for s in range(q.shape[0]):
        for a in range(q.shape[1]):
            _flush(ema, since, q, qstar, s, a, t_end, log_cum, win_start, err)
            since[s, a] = t_end + 1


@njit(cache=True)
def double_q_chunk(qa, qb, cdf, costs, gamma, u, c1, c2, c3, traj_len, cursor, visits):
    """Two-table Double Q-learning; behaviour is greedy on the table sum."""
    num_states, num_actions = costs.shape
    for i in range(u.shape[0]):
        k = cursor[2] + 1
        cursor[2] = k
        if cursor[1] == 0:
            cursor[0] = min(int(u[i, 3] * num_states), num_states - 1)
            cursor[1] = traj_len
        s = cursor[0]
        alpha = 1.0 / (1.0 + k / c1)
        eps = max(c2 ** k, c3)
        if u[i, 0] < eps:
            a = min(int(u[i, 1] * num_actions), num_actions - 1)
        else:
            a = 0
            for b in range(1, num_actions):
                if qa[s, b] + qb[s, b] < qa[s, a] + qb[s, a]:
                    a = b
        s2 = _next_state(cdf[a, s], u[i, 2])
        if u[i, 4] < 0.5:
            target = costs[s, a] + gamma * qb[s2, _argmin_row(qa, s2)]
            qa[s, a] += alpha * (target - qa[s, a])
        else:
            target = costs[s, a] + gamma * qa[s2, _argmin_row(qb, s2)]
            qb[s, a] += alpha * (target - qb[s, a])
        visits[s, a] += 1
        cursor[0] = s2
        cursor[1] -= 1


@njit(cache=True)
def maxmin_chunk(tables, cdf, costs, gamma, u, c1, c2, c3, traj_len, cursor, visits):
    """MaxMin Q-learning under cost minimisation: bootstrap from the elementwise max."""
    n_tables = tables.shape[0]
    num_states, num_actions = costs.shape
    for i in range(u.shape[0]):
        k = cursor[2] + 1
        cursor[2] = k
        if cursor[1] == 0:
            cursor[0] = min(int(u[i, 3] * num_states), num_states - 1)
            cursor[1] = traj_len
        s = cursor[0]
        alpha = 1.0 / (1.0 + k / c1)
        eps = max(c2 ** k, c3)
        if u[i, 0] < eps:
            a = min(int(u[i, 1] * num_actions), num_actions - 1)
        else:
            a = 0
            best = np.inf
            for b in range(num_actions):
                m = tables[0, s, b]
                for j in range(1, n_tables):
                    m = max(m, tables[j, s, b])
                if m < best:
                    best = m
                    a = b
        s2 = _next_state(cdf[a, s], u[i, 2])
        boot = np.inf
        for b in range(num_actions):
            m = tables[0, s2, b]
            for j in range(1, n_tables):
                m = max(m, tables[j, s2, b])
            boot = min(boot, m)
        j = min(int(u[i, 4] * n_tables), n_tables - 1)
        tables[j, s, a] += alpha * (costs[s, a] + gamma * boot - tables[j, s, a])
        visits[s, a] += 1
        cursor[0] = s2
        cursor[1] -= 1
