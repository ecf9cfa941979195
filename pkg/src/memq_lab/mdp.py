"""Finite discounted-cost MDPs, exact Bellman machinery and the policy-error metric.

Conventions used throughout the package:

* ``transitions`` has shape ``(A, S, S)``; ``transitions[a, s, s2]`` is the
  probability of moving from ``s`` to ``s2`` under action ``a``.
* ``costs`` has shape ``(S, A)`` and holds the average one-step cost
  ``c_a(s)``.  Costs are minimised.
* A Q-table is a plain ``(S, A)`` float array; a deterministic policy is an
  integer array of length ``S``; a stochastic policy is an ``(S, A)`` array of
  row distributions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ROW_TOL = 1e-9
DEFAULT_INIT_FLOOR = 1e-3


class ConvergenceError(RuntimeError):
    """Value iteration ran out of iterations before reaching its tolerance."""

    def __init__(self, gap: float, iterations: int):
        super().__init__(f"value iteration did not converge after {iterations} iterations (last gap {gap:.3e})")
        self.gap = gap
        self.iterations = iterations


@dataclass(frozen=True, eq=False)
class Mdp:
    transitions: np.ndarray
    costs: np.ndarray
    gamma: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        p = np.ascontiguousarray(self.transitions, dtype=np.float64)
        c = np.ascontiguousarray(self.costs, dtype=np.float64)
        object.__setattr__(self, "transitions", p)
        object.__setattr__(self, "costs", c)
        if p.ndim != 3 or p.shape[1] != p.shape[2]:
            raise ValueError(f"transitions must have shape (A, S, S), got {p.shape}")
        num_actions, num_states = p.shape[0], p.shape[1]
        if num_states < 1 or num_actions < 1:
            raise ValueError("need at least one state and one action")
        if c.shape != (num_states, num_actions):
            raise ValueError(f"costs must have shape {(num_states, num_actions)}, got {c.shape}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie strictly inside (0, 1), got {self.gamma}")
        if np.any(p < 0.0) or np.any(p > 1.0) or not np.all(np.isfinite(p)):
            raise ValueError("transition probabilities must lie in [0, 1]")
        row_err = np.max(np.abs(p.sum(axis=2) - 1.0))
        if row_err > ROW_TOL:
            raise ValueError(f"transition rows must sum to 1 (max deviation {row_err:.2e})")
        if not np.all(np.isfinite(c)) or np.any(c <= 0.0):
            raise ValueError("costs must be finite and strictly positive")

    @property
    def num_states(self) -> int:
        return self.transitions.shape[1]

    @property
    def num_actions(self) -> int:
        return self.transitions.shape[0]

    @property
    def c_min(self) -> float:
        return float(self.costs.min())

    @property
    def c_max(self) -> float:
        return float(self.costs.max())

    def with_gamma(self, gamma: float) -> "Mdp":
        return Mdp(self.transitions, self.costs, gamma, dict(self.meta))

    def bellman(self, q: np.ndarray) -> np.ndarray:
        """One application of the Bellman optimality operator to ``q``."""
        v = q.min(axis=1)
        return self.costs + self.gamma * (self.transitions @ v).T

    # -- serialization -------------------------------------------------

    def to_dict(self) -> dict:
        a_idx, s_idx, s2_idx = np.nonzero(self.transitions)
        trans = [
            [int(s), int(a), int(s2), float(self.transitions[a, s, s2])]
            for a, s, s2 in sorted(zip(a_idx, s_idx, s2_idx), key=lambda t: (t[1], t[0], t[2]))
        ]
        costs = [
            [s, a, float(self.costs[s, a])]
            for s in range(self.num_states)
            for a in range(self.num_actions)
        ]
        out = {
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "gamma": float(self.gamma),
            "transitions": trans,
            "costs": costs,
        }
        if self.meta:
            out["meta"] = self.meta
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "Mdp":
        try:
            n, m = int(data["num_states"]), int(data["num_actions"])
            p = np.zeros((m, n, n))
            for s, a, s2, prob in data["transitions"]:
                p[int(a), int(s), int(s2)] = float(prob)
            c = np.zeros((n, m))
            for s, a, cost in data["costs"]:
                c[int(s), int(a)] = float(cost)
            gamma = float(data["gamma"])
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise ValueError(f"malformed MDP document: {exc}") from exc
        return cls(p, c, gamma, dict(data.get("meta", {})))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Mdp":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def init_q(num_states: int, num_actions: int, floor: float = DEFAULT_INIT_FLOOR) -> np.ndarray:
    if floor <= 0.0:
        raise ValueError("Q initialisation floor must be strictly positive")
    return np.full((num_states, num_actions), float(floor))


def value_iteration(mdp: Mdp, tol: float = 1e-8, max_iters: int = 100_000):
    """Solve the Bellman optimality equation by successive approximation.

    Returns ``(q_star, policy, v_star)``.  Iteration stops once the L-infinity
    gap between successive Q-tables is at most ``tol``.
    """
    if tol <= 0.0:
        raise ValueError("tol must be positive")
    q = np.zeros((mdp.num_states, mdp.num_actions))
    gap = np.inf
    for it in range(1, max_iters + 1):
        q_next = mdp.bellman(q)
        gap = float(np.max(np.abs(q_next - q)))
        q = q_next
        if gap <= tol:
            policy = policy_from_q(q)
            return q, policy, q.min(axis=1)
    raise ConvergenceError(gap, max_iters)


def policy_from_q(q: np.ndarray) -> np.ndarray:
    """Greedy (cost-minimising) policy; ties go to the lowest action index."""
    return np.argmin(np.asarray(q), axis=1)


def evaluate_policy(mdp: Mdp, policy: np.ndarray) -> np.ndarray:
    """Exact Q-function of a deterministic policy via one linear solve."""
    policy = np.asarray(policy)
    states = np.arange(mdp.num_states)
    p_pi = mdp.transitions[policy, states, :]
    c_pi = mdp.costs[states, policy]
    v = np.linalg.solve(np.eye(mdp.num_states) - mdp.gamma * p_pi, c_pi)
    return mdp.costs + mdp.gamma * (mdp.transitions @ v).T


def average_policy_error(optimal, estimated) -> float:
    """Fraction of states on which two deterministic policies disagree."""
    optimal = np.asarray(optimal)
    estimated = np.asarray(estimated)
    if optimal.ndim != 1 or optimal.shape != estimated.shape:
        raise ValueError(f"policy shapes differ: {optimal.shape} vs {estimated.shape}")
    return float(np.mean(optimal != estimated))


def check_stochastic_policy(probs: np.ndarray, num_actions: int | None = None) -> None:
    probs = np.asarray(probs, dtype=float)
    if probs.ndim != 2 or (num_actions is not None and probs.shape[1] != num_actions):
        raise ValueError("stochastic policy must be an (S, A) array")
    if np.any(probs < 0.0) or np.max(np.abs(probs.sum(axis=1) - 1.0)) > ROW_TOL:
        raise ValueError("stochastic policy rows must be distributions")
