"""Model estimation from sampled trajectories and the n-hop environment family."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .mdp import Mdp
from .seeding import make_rng

CHUNK = 1 << 15


class CoverageError(RuntimeError):
    """Some state-action pairs were never sampled enough within the episode cap."""

    def __init__(self, uncovered):
        self.uncovered = [tuple(int(x) for x in p) for p in uncovered]
        shown = ", ".join(f"({s},{a})" for s, a in self.uncovered[:10])
        more = "" if len(self.uncovered) <= 10 else f" and {len(self.uncovered) - 10} more"
        super().__init__(f"{len(self.uncovered)} state-action pairs under-sampled: {shown}{more}")


@dataclass(eq=False)
class EstimatedModel:
    transition_counts: np.ndarray  # (S, A, S)
    cost_sums: np.ndarray  # (S, A)
    visit_counts: np.ndarray  # (S, A)
    gamma: float
    min_visits: int
    trajectory_length: int
    trajectories: int = 0
    cost_range: tuple = (0.0, 0.0)

    @property
    def num_states(self) -> int:
        return self.visit_counts.shape[0]

    @property
    def num_actions(self) -> int:
        return self.visit_counts.shape[1]

    @property
    def transitions(self) -> np.ndarray:
        """Empirical frequencies as an ``(A, S, S)`` tensor; unvisited rows stay in place."""
        counts = self.transition_counts.astype(float)
        totals = counts.sum(axis=2, keepdims=True)
        p = np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)
        unseen = totals[..., 0] == 0
        s_idx, a_idx = np.nonzero(unseen)
        p[s_idx, a_idx, s_idx] = 1.0
        return p.transpose(1, 0, 2).copy()

    @property
    def costs(self) -> np.ndarray:
        v = self.visit_counts
        mean = np.divide(self.cost_sums, v, out=np.zeros_like(self.cost_sums), where=v > 0)
        fill = mean[v > 0].mean() if np.any(v > 0) else 1.0
        return np.where(v > 0, mean, fill)

    def to_mdp(self) -> Mdp:
        return Mdp(self.transitions, self.costs, self.gamma,
                   {"estimated": True, "min_visits": self.min_visits,
                    "trajectory_length": self.trajectory_length})


def sample_and_estimate(mdp: Mdp, min_visits: int = 40, trajectory_length: int = 10, seed: int = 0,
                        epsilon: float = 0.3, cost_noise: float = 0.0,
                        episode_cap: int | None = None) -> EstimatedModel:
    """Sample trajectories until every pair has ``min_visits`` observations.

    Trajectories start in the state holding the least-visited pair and pick
    the least-visited action with probability ``1 - epsilon``.  Observed
    costs are ``c * (1 + cost_noise * U(-1, 1))``.
    """
    if min_visits < 1:
        raise ValueError("min_visits must be at least 1")
    if trajectory_length < 2:
        raise ValueError("trajectory_length must be at least 2")
    if not 0.0 <= cost_noise < 1.0:
        raise ValueError("cost_noise must lie in [0, 1)")
    n, m = mdp.num_states, mdp.num_actions
    if episode_cap is None:
        episode_cap = 1000 * n * m * min_visits // trajectory_length + 100
    rng = make_rng(seed, "estimate")
    cdf = _kernels.cumulative(mdp.transitions)
    counts = np.zeros((n, m, n), dtype=np.int64)
    cost_sums = np.zeros((n, m))
    visits = np.zeros((n, m), dtype=np.int64)
    cursor = np.array([0, 0, 0, n * m], dtype=np.int64)
    while cursor[3] > 0:
        if cursor[2] >= episode_cap:
            raise CoverageError(np.argwhere(visits < min_visits))
        u = rng.random((CHUNK, 4))
        _kernels.estimate_chunk(cdf, mdp.costs, cost_noise, u, min_visits, trajectory_length,
                                epsilon, counts, cost_sums, visits, cursor)
    lo = mdp.c_min * (1.0 - cost_noise)
    hi = mdp.c_max * (1.0 + cost_noise)
    return EstimatedModel(counts, cost_sums, visits, mdp.gamma, min_visits, trajectory_length,
                          int(cursor[2]), (lo, hi))


def hop_transitions(transitions: np.ndarray, order: int) -> np.ndarray:
    """Per-action matrix power ``P_a ** order``."""
    if order < 1:
        raise ValueError("order must be at least 1")
    return np.stack([np.linalg.matrix_power(p, order) for p in transitions])


@dataclass(eq=False)
class EnvironmentFamily:
    base: Mdp
    members: list = field(default_factory=list)  # Mdp per order 1..k_total

    @property
    def k_total(self) -> int:
        return len(self.members)

    @property
    def orders(self) -> list:
        return list(range(1, self.k_total + 1))

    def member(self, order: int) -> Mdp:
        return self.members[order - 1]

    def manifest(self) -> dict:
        return {"k_total": self.k_total, "orders": self.orders,
                "gammas": [m.gamma for m in self.members]}

    def save(self, directory) -> None:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        for n, member in zip(self.orders, self.members):
            member.save(out / f"member_{n:02d}.json")
        (out / "manifest.json").write_text(json.dumps(self.manifest(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, directory) -> "EnvironmentFamily":
        src = Path(directory)
        manifest = json.loads((src / "manifest.json").read_text(encoding="utf-8"))
        members = [Mdp.load(src / f"member_{n:02d}.json") for n in manifest["orders"]]
        return cls(members[0], members)


def build_family(model, k_total: int, gamma: float | None = None) -> EnvironmentFamily:
    """n-hop members: transitions ``P_a ** n``, single-step costs, discount ``gamma ** n``.

    The powers are built incrementally, one multiplication per order.
    """
    if k_total < 1:
        raise ValueError("k_total must be at least 1")
    base = model.to_mdp() if isinstance(model, EstimatedModel) else model
    gamma = base.gamma if gamma is None else gamma
    base = base.with_gamma(gamma)
    members = [base]
    power = base.transitions
    for n in range(2, k_total + 1):
        power = power @ base.transitions
        # rows drift from 1 by rounding only; rescale to keep them exact
        power = power / power.sum(axis=2, keepdims=True)
        members.append(Mdp(power, base.costs, gamma ** n, {"order": n}))
    return EnvironmentFamily(base, members)
