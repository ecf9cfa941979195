"""Experiment protocols: network-model sweep, selector comparison, algorithm comparison,
selected-set tables and bound-validation traces.

Every experiment is a pure function of ``(BenchConfig, seed list)``.  Seeds fan
out to an optional process pool and results are reduced in seed order, so the
numbers do not depend on the worker count.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import coverage as cov
from .baselines import double_q, maxmin_q
from .envs import build_family, sample_and_estimate
from .graphs import SENSITIVITY_DELTAS, GraphSpec, generate, perturb
from .mdp import average_policy_error, policy_from_q, value_iteration
from .qlearning import LearnerConfig, MemberPool, Schedules
from .seeding import make_rng
from .selection import (coverage_select, exhaustive_select, partial_order_select,
                        subset_evaluator)

KNOBS = {
    "S": ("structure", "structured"), "U": ("structure", "unstructured"),
}

# knob under test -> the other three knobs held fixed while it flips
SWEEP = (
    ("structure", ("structured", "unstructured"), {"sparsity": "dense", "direction": "directed", "regularity": "irregular"}),
    ("sparsity", ("sparse", "dense"), {"structure": "unstructured", "direction": "directed", "regularity": "irregular"}),
    ("direction", ("directed", "undirected"), {"structure": "unstructured", "sparsity": "dense", "regularity": "irregular"}),
    ("regularity", ("regular", "irregular"), {"structure": "unstructured", "sparsity": "dense", "direction": "directed"}),
)

SCALES = {
    "desk": {"num_states": 100, "num_actions": 4},
    "paper": {"num_states": 10_000, "num_actions": 4},
}


def spec_from_label(label: str, **kwargs) -> GraphSpec:
    """``'S-S-U-R'`` style label (structure, sparsity, direction, regularity) to a spec."""
    parts = label.replace("-", "").upper()
    if len(parts) != 4:
        raise ValueError(f"bad network label {label!r}")
    table = (
        {"S": "structured", "U": "unstructured"},
        {"S": "sparse", "D": "dense"},
        {"D": "directed", "U": "undirected"},
        {"R": "regular", "I": "irregular"},
    )
    names = ("structure", "sparsity", "direction", "regularity")
    try:
        knobs = {n: t[c] for n, t, c in zip(names, table, parts)}
    except KeyError as exc:
        raise ValueError(f"bad network label {label!r}") from exc
    kwargs.update(knobs)
    return GraphSpec(**kwargs)


@dataclass
class BenchConfig:
    num_states: int = 100
    num_actions: int = 4
    gamma: float = 0.9
    min_visits: int = 40
    trajectory_length: int = 10
    k: int = 5
    k_total: int = 10
    steps_per_state: int = 4000
    seeds: int = 20
    exhaustive_repeats: int = 5
    zeta_mode: str = "uniform"
    freeze_fraction: float = 0.6
    root_seed: int = 0
    sensitivity: bool = True
    workers: int = 1

    @property
    def steps(self) -> int:
        return self.steps_per_state * self.num_states

    def learner(self, num_states=None, num_actions=None, **kw) -> LearnerConfig:
        n = num_states or self.num_states
        m = num_actions or self.num_actions
        steps = self.steps_per_state * n
        return LearnerConfig(steps=steps, trajectory_length=self.trajectory_length,
                             schedules=Schedules.for_budget(n, m, steps, self.freeze_fraction), **kw)

    def seed_list(self) -> list:
        return [self.root_seed + i for i in range(self.seeds)]


def worker_count(requested: int | None = None) -> int:
    cap = int(os.environ.get("MEMQ_LAB_THREADS", "0") or 0)
    n = requested or 1
    return max(1, min(n, cap) if cap > 0 else n)


def fan_out(fn, items, workers: int = 1) -> list:
    items = list(items)
    workers = worker_count(workers)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


# -- one trial ------------------------------------------------------------------


@dataclass(eq=False)
class Trial:
    spec: GraphSpec
    env: object
    q_star: np.ndarray
    pi_star: np.ndarray
    model: object
    pool: MemberPool
    seed: int

    @property
    def c_range(self) -> tuple:
        c = self.model.costs
        return float(c.min()), float(c.max())


def prepare_trial(spec: GraphSpec, cfg: BenchConfig, seed: int, learner: LearnerConfig | None = None,
                  k_total: int | None = None) -> Trial:
    env = generate(replace(spec, seed=seed, gamma=cfg.gamma))
    q_star, pi_star, _ = value_iteration(env)
    model = sample_and_estimate(env, cfg.min_visits, cfg.trajectory_length, seed)
    family = build_family(model, k_total or cfg.k_total, cfg.gamma)
    learner = learner or cfg.learner(spec.num_states, spec.num_actions)
    return Trial(spec, env, q_star, pi_star, model, MemberPool(family, env, q_star, learner, seed), seed)


def _member_seconds(trial: Trial, orders, repeat: int) -> float:
    return sum(trial.pool.run(n, repeat).seconds for n in orders)


def run_selector(trial: Trial, method: str, k: int, cfg: BenchConfig, repeat: int = 0) -> dict:
    """APE and cost of one selector on one trial.

    ``runtime`` is the selection time plus the learner seconds of every
    ensemble run the method requests, counted as if each run were fresh.
    """
    evaluate = subset_evaluator(trial.pool, trial.pi_star, trial.q_star)
    c_min, c_max = trial.c_range
    k_total = trial.pool.family.k_total
    start = time.perf_counter()
    if method == "exhaustive":
        sel = exhaustive_select(k, k_total, evaluate, cfg.exhaustive_repeats)
        select_s = time.perf_counter() - start
        learner_s = sum(_member_seconds(trial, e["subset"], r)
                        for e in sel.metadata["evaluations"] for r in range(cfg.exhaustive_repeats))
        # evaluated on the same repeats it optimised over
        ape = sel.metadata.get("best_ape")
        if ape is None:
            ape = float(np.mean([evaluate(sel.chosen, r)[0] for r in range(cfg.exhaustive_repeats)]))
    else:
        if method == "coverage":
            sel = coverage_select(k, k_total, cfg.gamma, c_min, c_max, cfg.zeta_mode,
                                  make_rng(trial.seed, "zeta", repeat))
        elif method == "partial":
            sel = partial_order_select(k, k_total)
        else:
            raise ValueError(f"unknown method {method!r}")
        select_s = time.perf_counter() - start
        ape = evaluate(sel.chosen, repeat)[0]
        sel.neql_invocations = 1
        learner_s = _member_seconds(trial, sel.chosen, repeat)
    return {"method": method, "k": k, "chosen": sel.chosen, "ape": float(ape),
            "runtime": select_s + learner_s, "comparisons": sel.comparisons_made,
            "invocations": sel.neql_invocations}


def _method_ape_over_repeats(trial, method, k, cfg):
    """Mean APE over the exhaustive repeats, so all methods see the same learners."""
    if method == "exhaustive":
        return run_selector(trial, method, k, cfg)
    rows = [run_selector(trial, method, k, cfg, r) for r in range(cfg.exhaustive_repeats)]
    out = dict(rows[0])
    out["ape"] = float(np.mean([r["ape"] for r in rows]))
    out["runtime"] = float(np.mean([r["runtime"] for r in rows]))
    out["chosen_per_repeat"] = [r["chosen"] for r in rows]
    return out


def sensitivity(base_ape: float, perturbed_apes, num_states: int) -> float:
    """Mean relative APE change; the denominator is floored at one state's worth of error."""
    perturbed = np.asarray(list(perturbed_apes), dtype=float)
    if perturbed.size == 0:
        return 0.0
    return float(np.mean(np.abs(perturbed - base_ape)) / max(base_ape, 1.0 / num_states))


def _perturbed_specs(spec: GraphSpec, deltas=SENSITIVITY_DELTAS) -> list:
    out = []
    for d in deltas:
        try:
            out.append(perturb(spec, d))
        except ValueError:
            continue
    return out


# -- report ---------------------------------------------------------------------


@dataclass
class ExperimentReport:
    name: str
    rows: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seeds: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "config": self.config, "seeds": self.seeds, "rows": self.rows,
                "extra": self.extra}

    def write(self, directory, stem: str | None = None) -> tuple:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        stem = stem or self.name
        json_path = out / f"{stem}.json"
        json_path.write_text(json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True), encoding="utf-8")
        csv_path = out / f"{stem}.csv"
        write_rows_csv(csv_path, self.rows)
        return csv_path, json_path


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    return x


def write_rows_csv(path, rows) -> None:
    keys = []
    for r in rows:
        for k in r:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: json.dumps(_jsonable(v)) if isinstance(v, (list, dict)) else v for k, v in r.items()})


def _summary(values) -> dict:
    x = np.asarray(values, dtype=float)
    return {"mean": float(x.mean()), "std": float(x.std(ddof=1)) if x.size > 1 else 0.0, "n": int(x.size)}


# -- model sweep ----------------------------------------------------------------


def _ccq_trial(args):
    spec, cfg, seed = args
    trial = prepare_trial(spec, cfg, seed)
    res = run_selector(trial, "coverage", cfg.k, cfg)
    return res["ape"], res["runtime"]


def run_model_sweep(cfg: BenchConfig, sweep=SWEEP, labels_only=None) -> ExperimentReport:
    """CCQ on each side of each knob flip, plus the perturbation sensitivity."""
    rows = []
    for knob, values, fixed in sweep:
        for value in values:
            if labels_only and value not in labels_only:
                continue
            spec = GraphSpec(cfg.num_states, cfg.num_actions, **fixed, **{knob: value}, gamma=cfg.gamma)
            results = fan_out(_ccq_trial, [(spec, cfg, s) for s in cfg.seed_list()], cfg.workers)
            apes = [a for a, _ in results]
            row = {"knob": knob, "setting": value, "label": spec.label,
                   "ape_mean": _summary(apes)["mean"], "ape_std": _summary(apes)["std"],
                   "runtime_mean": float(np.mean([t for _, t in results])), "repeats": len(apes)}
            if cfg.sensitivity:
                sens = []
                for s, base in zip(cfg.seed_list(), apes):
                    perturbed = [_ccq_trial((p, cfg, s))[0] for p in _perturbed_specs(spec)]
                    sens.append(sensitivity(base, perturbed, cfg.num_states))
                row["sensitivity_pct"] = 100.0 * float(np.mean(sens))
            rows.append(row)
    return ExperimentReport("table1", rows, asdict(cfg), cfg.seed_list(),
                            {"perturbations": [dict(d) for d in SENSITIVITY_DELTAS]})


# -- method comparison ------------------------------------------------------------


METHOD_ORDER = ("exhaustive", "partial", "coverage")


def _method_trial(args):
    spec, cfg, seed, detection_ks = args
    trial = prepare_trial(spec, cfg, seed)
    out = {"seed": seed, "methods": {}, "detection": {}}
    for method in METHOD_ORDER:
        out["methods"][method] = _method_ape_over_repeats(trial, method, cfg.k, cfg)
    for k in detection_ks:
        best = set(exhaustive_select(k, cfg.k_total, subset_evaluator(trial.pool, trial.pi_star, trial.q_star),
                                     cfg.exhaustive_repeats).chosen)
        rates = {}
        for method in ("partial", "coverage"):
            chosen = [run_selector(trial, method, k, cfg, r)["chosen"] for r in range(cfg.exhaustive_repeats)]
            rates[method] = float(np.mean([len(best & set(c)) / k for c in chosen]))
        out["detection"][k] = rates
    return out


def run_method_comparison(cfg: BenchConfig, label: str = "S-S-U-R", detection_ks=None) -> ExperimentReport:
    spec = spec_from_label(label, num_states=cfg.num_states, num_actions=cfg.num_actions, gamma=cfg.gamma)
    detection_ks = list(detection_ks) if detection_ks is not None else list(range(1, cfg.k_total + 1))
    trials = fan_out(_method_trial, [(spec, cfg, s, detection_ks) for s in cfg.seed_list()], cfg.workers)
    rows = []
    for method in METHOD_ORDER:
        per = [t["methods"][method] for t in trials]
        row = {"network": label, "method": method, "k": cfg.k, "k_total": cfg.k_total,
               "ape_mean": _summary([p["ape"] for p in per])["mean"],
               "ape_std": _summary([p["ape"] for p in per])["std"],
               "runtime_mean": float(np.mean([p["runtime"] for p in per])),
               "comparisons": per[0]["comparisons"], "invocations_per_repeat":
                   per[0]["invocations"] // (cfg.exhaustive_repeats if method == "exhaustive" else 1),
               "repeats": len(per)}
        rows.append(row)
    detection = [{"k": k, **{m: float(np.mean([t["detection"][k][m] for t in trials])) for m in ("partial", "coverage")}}
                 for k in detection_ks]
    return ExperimentReport("table2", rows, asdict(cfg), cfg.seed_list(),
                            {"detection": detection, "per_seed": trials})


def run_selected_sets(cfg: BenchConfig, label: str = "S-S-U-R", k_total: int = 15, ks=range(2, 10),
                      seed: int | None = None) -> ExperimentReport:
    """Chosen environment sets per K for each selector on one desk graph."""
    spec = spec_from_label(label, num_states=cfg.num_states, num_actions=cfg.num_actions, gamma=cfg.gamma)
    seed = cfg.root_seed if seed is None else seed
    trial = prepare_trial(spec, cfg, seed, k_total=k_total)
    ccfg = replace(cfg, k_total=k_total)
    rows = []
    for k in ks:
        row = {"k": k}
        for method in METHOD_ORDER:
            row[method] = run_selector(trial, method, k, ccfg)["chosen"]
        rows.append(row)
    return ExperimentReport("table3", rows, asdict(cfg), [seed])


# -- algorithm comparison ---------------------------------------------------------


def _algorithm_trial(args):
    n, m, cfg, seed = args
    spec = spec_from_label("S-S-U-R", num_states=n, num_actions=m, gamma=cfg.gamma)
    trial = prepare_trial(spec, cfg, seed)
    lc = trial.pool.config
    pi = trial.pi_star
    out = {"ccq": run_selector(trial, "coverage", cfg.k, cfg)["ape"]}
    q_naive = trial.pool.ensemble(list(range(1, cfg.k + 1)))
    out["neql"] = average_policy_error(pi, policy_from_q(q_naive))
    out["double_q"] = average_policy_error(pi, policy_from_q(
        double_q(trial.env, lc.schedules, 0, cfg.trajectory_length, seed, steps=lc.steps)))
    out["maxmin_q"] = average_policy_error(pi, policy_from_q(
        maxmin_q(trial.env, lc.schedules, 0, cfg.trajectory_length, seed, steps=lc.steps)))
    return out


ALGORITHMS = ("ccq", "neql", "double_q", "maxmin_q")


def run_algorithm_comparison(cfg: BenchConfig, sizes=((40, 2), (100, 3), (200, 4))) -> ExperimentReport:
    rows = []
    for n, m in sizes:
        trials = fan_out(_algorithm_trial, [(n, m, cfg, s) for s in cfg.seed_list()], cfg.workers)
        row = {"num_states": n, "num_actions": m, "size": n * m}
        for alg in ALGORITHMS:
            row[f"{alg}_ape"] = float(np.mean([t[alg] for t in trials]))
        row["repeats"] = len(trials)
        rows.append(row)
    return ExperimentReport("figure1b", rows, asdict(cfg), cfg.seed_list())


# -- bound validation --------------------------------------------------------------


@dataclass(eq=False)
class BoundValidation:
    pairs: list
    times: np.ndarray
    series: np.ndarray  # (T, P) ln C
    bounds: list  # BoundSet per pair
    means: np.ndarray
    contained: np.ndarray
    params: dict


def validate_bounds(trial: Trial, pairs, prop: int = 1, order: int = 1, orders=None,
                    normalization: str = "state", v_repeats: int = 5, burn_in: float = 0.5,
                    slack: float = 0.05, num_actions_grid=(2, 4, 8)) -> BoundValidation:
    """Trace ``ln C`` for tracked pairs in repeat 0 and compare with the bound intervals.

    The exploration distribution is built from the final tables of the same
    learner in repeats ``1..v_repeats`` (single member for props 1 and 4,
    the ensemble of ``orders`` for props 2 and 3), which makes it consistent
    with the tracked policy while staying independent of the traced run.
    """
    pool = trial.pool
    lc = pool.config
    if lc.num_checkpoints <= 0:
        raise ValueError("bound validation needs a learner config with checkpoints")
    pairs = [tuple(int(x) for x in p) for p in pairs]
    theta = cov.estimate_theta(trial.q_star)
    ensemble = prop in (2, 3)
    orders = sorted(orders or list(range(1, trial.pool.family.k_total + 1))[:5])
    if ensemble:
        tables = [pool.ensemble(orders, r) for r in range(1, v_repeats + 1)]
        snaps = pool.ensemble_trace(orders, 0)
        lams = {n: pool.run(n, 0).lam for n in orders}
        lam = max(lams.values())
        u = lc.fixed_u if lc.fixed_u is not None else float(lc.schedules.update_ratio(lc.steps))
    else:
        tables = [pool.run(order, r).ema if lc.fixed_u is None else pool.run(order, r).q
                  for r in range(1, v_repeats + 1)]
        snaps = pool.run(order, 0).q_snapshots
        lam = pool.run(order, 0).lam
    v = cov.exploration_from_tables(tables, normalization=normalization)
    times = pool.run(orders[0] if ensemble else order, 0).times
    trace = cov.trace_from_tables(snaps, times, pairs, v)
    means = trace.mean(burn_in)
    bounds, inside = [], []
    for (s, a), mu in zip(pairs, means):
        q = float(trial.q_star[s, a])
        mom = v.pair_moments(s, a)
        if prop == 1:
            b = cov.prop1_bounds(q, theta, lam, mom)
        elif prop == 2:
            b = cov.prop2_bounds(q, theta, lam, u, mom)
        elif prop == 3:
            b = cov.prop3_bounds(q, theta, lam, u, len(orders), mom)
        elif prop == 4:
            b = cov.prop4_bounds(q, theta, lam, trial.env.num_actions, mom)
        else:
            raise ValueError("prop must be 1, 2, 3 or 4")
        bounds.append(b)
        inside.append(b.contains_mean(float(mu), slack))
    params = {"theta": theta, "lambda": lam, "prop": prop, "order": order, "orders": orders,
              "normalization": normalization, "lambdas": [pool.run(n, 0).lam for n in range(1, pool.family.k_total + 1)],
              "mus": [pool.run(n, 0).error_mean for n in range(1, pool.family.k_total + 1)]}
    if prop == 4:
        params["exp_ub_by_actions"] = {na: cov.prop4_bounds(1.0, theta, lam, na, (0.0, 0.0)).exp_ub
                                       for na in num_actions_grid}
    return BoundValidation(pairs, times, trace.series(), bounds, means, np.array(inside), params)


def bound_learner(cfg: BenchConfig, num_states: int, num_actions: int, fixed_u: float | None = 0.5,
                  checkpoints: int = 200) -> LearnerConfig:
    return cfg.learner(num_states, num_actions, fixed_u=fixed_u, num_checkpoints=checkpoints)


def run_bound_figures(cfg: BenchConfig, figure: str, pairs=None, out_dir=None) -> ExperimentReport:
    """Figure data for the bound-validation plots on an S-S-U-R desk graph with two actions."""
    n = cfg.num_states
    spec = spec_from_label("S-S-U-R", num_states=n, num_actions=2, gamma=cfg.gamma)
    trial = prepare_trial(spec, cfg, cfg.root_seed, learner=bound_learner(cfg, n, 2))
    if pairs is None:
        rng = make_rng(cfg.root_seed, "tracked_pairs")
        pairs = [(int(s), int(rng.integers(2))) for s in rng.choice(n, size=min(10, n), replace=False)]
    prop, order = {"2a": (1, 1), "2b": (1, 2), "2c": (2, 1), "2d": (3, 1), "2e": (4, 1)}[figure]
    val = validate_bounds(trial, pairs, prop=prop, order=order)
    rows = []
    for j, (s, a) in enumerate(val.pairs):
        b = val.bounds[j]
        for t, x in zip(val.times, val.series[:, j]):
            rows.append({"t": int(t), "s": s, "a": a, "ln_c": float(x), "exp_lb": b.exp_lb, "exp_ub": b.exp_ub,
                         "var_lb": b.var_lb, "var_ub": b.var_ub, "prop_id": b.prop})
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            cov.write_bound_csv(Path(out_dir) / f"fig{figure}_pair_{s}_{a}.csv", (s, a), val.times,
                                val.series[:, j], b)
    extra = {"params": val.params, "contained": val.contained.tolist(), "means": val.means.tolist()}
    return ExperimentReport(f"figure{figure}", rows, asdict(cfg), [cfg.root_seed], extra)


def run_detection_figure(cfg: BenchConfig, label: str = "S-S-U-R") -> ExperimentReport:
    rep = run_method_comparison(cfg, label)
    return ExperimentReport("figure1a", rep.extra["detection"], asdict(cfg), cfg.seed_list())


def run_table(cfg: BenchConfig, table: int) -> ExperimentReport:
    if table == 1:
        return run_model_sweep(cfg)
    if table == 2:
        return run_method_comparison(cfg)
    if table == 3:
        return run_selected_sets(cfg)
    raise ValueError("table must be 1, 2 or 3")


def run_figure(cfg: BenchConfig, figure: str, out_dir=None) -> ExperimentReport:
    if figure == "1a":
        return run_detection_figure(cfg)
    if figure == "1b":
        return run_algorithm_comparison(cfg)
    if figure in ("2a", "2b", "2c", "2d", "2e"):
        return run_bound_figures(cfg, figure, out_dir=out_dir)
    raise ValueError(f"unknown figure {figure!r}")
