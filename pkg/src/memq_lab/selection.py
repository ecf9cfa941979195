"""Choosing K of K_total n-hop environments, and the coverage-ranked ensemble learner.

Three selectors are provided: exhaustive search over all K-subsets, a fixed
partial-ordering heuristic, and a ranking by estimated error spread that only
needs the discount factor and the cost range.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .envs import EstimatedModel, build_family
from .mdp import Mdp, average_policy_error, policy_from_q
from .qlearning import LearnerConfig, MemberPool
from .seeding import make_rng

METHODS = ("exhaustive", "partial", "coverage")


class SelectionBudgetError(RuntimeError):
    """Exhaustive search would need more learner runs than allowed."""

    def __init__(self, required: int, budget: int):
        super().__init__(f"exhaustive search needs {required} learner runs, budget is {budget}")
        self.required = required
        self.budget = budget


@dataclass
class SelectionResult:
    method: str
    chosen: list
    comparisons_made: int = 0
    neql_invocations: int = 0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.chosen = sorted(int(n) for n in self.chosen)
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if len(set(self.chosen)) != len(self.chosen) or min(self.chosen, default=1) < 1:
            raise ValueError(f"invalid chosen set {self.chosen}")
        if self.method != "exhaustive" and 1 not in self.chosen:
            raise ValueError("the base environment must be selected")

    def to_dict(self) -> dict:
        return {"method": self.method, "chosen": self.chosen, "comparisons_made": self.comparisons_made,
                "nEQL_invocations": self.neql_invocations, "metadata": self.metadata}


def compute_f(gamma: float, n: int, m: int) -> float:
    """Ratio of the closed-form error spreads of orders ``n`` and ``m``."""
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    if n < 2 or m < 2:
        raise ValueError("f is undefined at order 1; the base environment is always ranked first")
    return ((1.0 - gamma ** n) * (1.0 - gamma ** (m - 1))) / ((1.0 - gamma ** m) * (1.0 - gamma ** (n - 1)))


def decision_threshold(c_min: float, c_max: float, zeta: float) -> float:
    return zeta * c_max / c_min + (1.0 - zeta) * c_min / c_max


def decide_pair(gamma: float, n: int, m: int, c_min: float, c_max: float, zeta: float) -> int:
    """-1 if order ``n`` is judged to have the smaller error spread than ``m``, else +1.

    The threshold rule is applied with the larger order in the first slot and
    the reversed query returns the negated verdict.  Applied literally in both
    orientations, the rule answers +1 twice whenever ``f`` falls inside the
    inconclusive band, so this keeps the comparator antisymmetric.
    """
    if not 0.0 < c_min <= c_max < math.inf:
        raise ValueError("need 0 < c_min <= c_max < inf")
    if not 0.0 < zeta < 1.0:
        raise ValueError("zeta must lie in (0, 1)")
    if n == m:
        raise ValueError("decide_pair needs two distinct orders")
    if n < m:
        return -decide_pair(gamma, m, n, c_min, c_max, zeta)
    return -1 if compute_f(gamma, n, m) > decision_threshold(c_min, c_max, zeta) else 1


def theoretical_lambda(gamma: float, n: int, cost: float) -> float:
    """Error half-width of order ``n`` under constant cost: ``sqrt(3) c g(1 - g^(n-1)) / ((1 - g^n)(1 - g))``."""
    if n < 1:
        raise ValueError("order must be at least 1")
    if cost <= 0.0:
        raise ValueError("cost must be positive")
    return math.sqrt(3.0) * cost * gamma * (1.0 - gamma ** (n - 1)) / ((1.0 - gamma ** n) * (1.0 - gamma))


def _zeta_source(zeta_mode, rng):
    if zeta_mode in ("uniform", None):
        rng = rng if rng is not None else make_rng(0, "zeta")

        def draw():
            z = rng.random()
            while z == 0.0:
                z = rng.random()
            return float(z)
        return draw
    z = float(zeta_mode)
    if not 0.0 < z < 1.0:
        raise ValueError("zeta must lie in (0, 1)")
    return lambda: z


def coverage_order(gamma: float, k_total: int, c_min: float, c_max: float, zeta_mode="uniform",
                   rng: np.random.Generator | None = None):
    """Rank orders by predicted error spread; order 1 first, the rest by insertion sort.

    Returns ``(ranking, comparisons, metadata)``.  Each candidate walks left
    past incumbents it beats, so at most ``C(k_total - 1, 2)`` comparisons are
    made.  Every recorded outcome is checked against the final ranking; any
    disagreement triggers a Borda re-ranking and is flagged.
    """
    if k_total < 1:
        raise ValueError("k_total must be at least 1")
    draw = _zeta_source(zeta_mode, rng)
    ranking = [2] if k_total >= 2 else []
    log = []
    for cand in range(3, k_total + 1):
        pos = len(ranking)
        while pos > 0:
            inc = ranking[pos - 1]
            zeta = draw()
            outcome = decide_pair(gamma, cand, inc, c_min, c_max, zeta)
            log.append({"n": cand, "m": inc, "zeta": zeta, "f": compute_f(gamma, cand, inc),
                        "threshold": decision_threshold(c_min, c_max, zeta), "outcome": outcome})
            if outcome > 0:
                break
            pos -= 1
        ranking.insert(pos, cand)
    rank_of = {n: i for i, n in enumerate(ranking)}
    inconsistent = [r for r in log if (rank_of[r["n"]] < rank_of[r["m"]]) != (r["outcome"] < 0)]
    flagged = bool(inconsistent)
    if flagged:
        wins = {n: 0 for n in ranking}
        for r in log:
            wins[r["n"] if r["outcome"] < 0 else r["m"]] += 1
        ranking = sorted(ranking, key=lambda n: (-wins[n], n))
    meta = {"comparisons": log, "borda_fallback": flagged, "zeta_mode": str(zeta_mode)}
    return [1] + ranking, len(log), meta


def coverage_select(k: int, k_total: int, gamma: float, c_min: float, c_max: float, zeta_mode="uniform",
                    rng=None) -> SelectionResult:
    if not 1 <= k <= k_total:
        raise ValueError("need 1 <= k <= k_total")
    ranking, comparisons, meta = coverage_order(gamma, k_total, c_min, c_max, zeta_mode, rng)
    meta["ranking"] = ranking
    return SelectionResult("coverage", ranking[:k], comparisons, 0, meta)


def partial_order_select(k: int, k_total: int) -> SelectionResult:
    """Orders 1, 2, 3, then odd orders 5, 7, ... and finally the smallest unused orders."""
    if not 1 <= k <= k_total:
        raise ValueError("need 1 <= k <= k_total")
    picks = [n for n in (1, 2, 3) if n <= k_total]
    picks += list(range(5, k_total + 1, 2))
    picks += [n for n in range(1, k_total + 1) if n not in picks]
    return SelectionResult("partial", picks[:k], 0, 0, {"rule": "1,2,3 then odd orders"})


def exhaustive_select(k: int, k_total: int, evaluate, repeats: int = 5, budget: int | None = None) -> SelectionResult:
    """Evaluate every K-subset ``repeats`` times; keep the lowest mean APE.

    ``evaluate(subset, repeat)`` returns ``(ape, q_error)``.  Ties on APE are
    broken by mean Q-error, then by the subset itself.
    """
    if not 1 <= k <= k_total:
        raise ValueError("need 1 <= k <= k_total")
    if k == k_total:
        return SelectionResult("exhaustive", list(range(1, k_total + 1)), 0, 0, {"evaluations": []})
    subsets = list(combinations(range(1, k_total + 1), k))
    required = len(subsets) * repeats
    if budget is not None and required > budget:
        raise SelectionBudgetError(required, budget)
    log = []
    for subset in subsets:
        scores = np.array([evaluate(list(subset), r) for r in range(repeats)], dtype=float)
        log.append({"subset": list(subset), "ape": float(scores[:, 0].mean()), "q_error": float(scores[:, 1].mean())})
    best = min(log, key=lambda e: (e["ape"], e["q_error"], e["subset"]))
    return SelectionResult("exhaustive", best["subset"], 0, required,
                           {"evaluations": log, "repeats": repeats, "best_ape": best["ape"]})


def subset_evaluator(pool: MemberPool, optimal_policy: np.ndarray, q_star: np.ndarray):
    def evaluate(subset, repeat):
        q_hat = pool.ensemble(subset, repeat)
        return (average_policy_error(optimal_policy, policy_from_q(q_hat)),
                float(np.mean(np.abs(q_hat - q_star))))
    return evaluate


@dataclass(eq=False)
class CcqResult:
    q_hat: np.ndarray
    policy: np.ndarray
    selection: SelectionResult
    runtime: float
    pool: MemberPool


def ccq(model, k: int, k_total: int, gamma: float, zeta_mode="uniform", learner: LearnerConfig | None = None,
        seed: int = 0, true_env: Mdp | None = None, q_star: np.ndarray | None = None,
        pool: MemberPool | None = None, repeat: int = 0) -> CcqResult:
    """Rank the n-hop family by predicted error spread and run the ensemble on the top K.

    The cost range comes from the estimated costs.  Passing an existing
    ``pool`` reuses its cached member runs.
    """
    start = time.perf_counter()
    base = model.to_mdp() if isinstance(model, EstimatedModel) else model
    c_min, c_max = float(base.costs.min()), float(base.costs.max())
    if pool is None:
        family = build_family(base, k_total, gamma)
        q_star = np.zeros_like(base.costs) if q_star is None else q_star
        pool = MemberPool(family, true_env, q_star, learner or LearnerConfig(), seed)
    sel = coverage_select(k, k_total, gamma, c_min, c_max, zeta_mode, make_rng(seed, "zeta", repeat))
    sel.metadata.update({"c_min": c_min, "c_max": c_max, "gamma": gamma})
    q_hat = pool.ensemble(sel.chosen, repeat)
    sel.neql_invocations = 1
    return CcqResult(q_hat, policy_from_q(q_hat), sel, time.perf_counter() - start, pool)
