"""Command-line entry point: ``memq-lab {graph,run,select,validate,bench}``.

Exit codes: 0 success, 1 unexpected error, 2 configuration or usage error,
3 file I/O error, 4 infeasible or out-of-domain input, 5 budget or
convergence failure.
"""

from __future__ import annotations

import argparse
import json
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .bench import SCALES, BenchConfig, _jsonable, prepare_trial, run_figure, run_table, spec_from_label, validate_bounds
from .config import ConfigError, RunConfig
from .coverage import write_bound_csv
from .envs import CoverageError, build_family, sample_and_estimate
from .graphs import GraphSpec, InfeasibleSpecError, generate
from .mdp import ConvergenceError, Mdp, average_policy_error, value_iteration
from .qlearning import BudgetError, LearnerConfig, MemberPool, Schedules, run_neql, write_trace
from .selection import (SelectionBudgetError, ccq, coverage_select, exhaustive_select,
                        partial_order_select, subset_evaluator)
from .seeding import make_rng

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_IO, EXIT_DOMAIN, EXIT_BUDGET = 0, 1, 2, 3, 4, 5


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _metadata(command: str, seconds: float, **extra) -> dict:
    return {"command": command, "runtime_seconds": seconds, "finished_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            "python": platform.python_version(), "version": __version__, **extra}


def _load_mdp(path) -> Mdp:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"graph file not found: {path}")
    return Mdp.load(path)


def _zeta(text: str):
    if text == "uniform":
        return "uniform"
    try:
        return float(text)
    except ValueError as exc:
        raise ConfigError("zeta", f"expected 'uniform' or a number, got {text!r}") from exc


def _parse_pairs(text: str) -> list:
    pairs = []
    for item in filter(None, (p.strip() for p in text.split(","))):
        try:
            s, a = item.split(":")
            pairs.append((int(s), int(a)))
        except ValueError as exc:
            raise ConfigError("pairs", f"expected 's:a,...', got {item!r}") from exc
    if not pairs:
        raise ConfigError("pairs", "no pairs given")
    return pairs


# -- graph ----------------------------------------------------------------------


def cmd_graph_gen(args) -> int:
    if args.spec:
        path = Path(args.spec)
        if not path.exists():
            raise FileNotFoundError(f"spec file not found: {path}")
        spec = GraphSpec.from_dict(json.loads(path.read_text(encoding="utf-8")))
    else:
        spec = spec_from_label(args.label, num_states=args.states, num_actions=args.actions,
                               seed=args.seed, gamma=args.gamma)
    mdp = generate(spec)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    mdp.save(out)
    print(f"wrote {out} ({spec.label}, {spec.num_states} states, {mdp.meta.get('attempts')} attempt(s))")
    return EXIT_OK


# -- run ccq --------------------------------------------------------------------


def cmd_run_ccq(args) -> int:
    start = time.perf_counter()
    cfg_path = Path(args.config)
    cfg = RunConfig.load(cfg_path)
    out = Path(args.output or cfg.output_dir or "out")
    if isinstance(cfg.graph, str):
        gpath = Path(cfg.graph)
        env = _load_mdp(gpath if gpath.is_absolute() else cfg_path.parent / gpath).with_gamma(cfg.gamma)
    else:
        env = generate(cfg.graph_spec())
    for i, (s, a) in enumerate(cfg.tracked_pairs):
        if not (s < env.num_states and a < env.num_actions):
            raise ConfigError(f"tracked_pairs[{i}]", f"pair {s}:{a} is outside the graph")
    q_star, pi_star, _ = value_iteration(env)
    model = sample_and_estimate(env, cfg.min_visits, cfg.trajectory_length, cfg.seed, episode_cap=cfg.episode_cap)
    learner = cfg.learner(env.num_states, env.num_actions)
    zeta = cfg.zeta if cfg.zeta == "uniform" else float(cfg.zeta)
    result = ccq(model, cfg.k, cfg.k_total, cfg.gamma, zeta, learner, cfg.seed, env, q_star)
    neql = run_neql(result.pool, result.selection.chosen, 0, pi_star)
    ape = average_policy_error(pi_star, result.policy)
    sel = result.selection.to_dict()
    report = {
        "ape": ape,
        "chosen": result.selection.chosen,
        "comparisons_made": sel["comparisons_made"],
        "nEQL_invocations": sel["nEQL_invocations"],
        "q_error_linf": float(np.max(np.abs(result.q_hat - q_star))),
        "member_lambda": {n: result.pool.run(n).lam for n in result.selection.chosen},
        "steps": learner.steps,
        "num_states": env.num_states,
        "num_actions": env.num_actions,
        "seed": cfg.seed,
        "selection": sel,
        "runtime_seconds": "see metadata.json",
    }
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "selection.json", sel)
    _write_json(out / "report.json", report)
    (out / "config.resolved.json").write_text(cfg.dumps() + "\n", encoding="utf-8")
    if neql.trace:
        write_trace(neql.trace, out / "trace.jsonl")
    _write_json(out / "metadata.json", _metadata("run ccq", time.perf_counter() - start,
                                                 learner_seconds=sum(r.seconds for r in neql.members)))
    print(f"APE {ape:.4f} with environments {result.selection.chosen}; outputs in {out}")
    return EXIT_OK


# -- select ---------------------------------------------------------------------


def cmd_select(args) -> int:
    start = time.perf_counter()
    env = _load_mdp(args.graph).with_gamma(args.gamma)
    zeta = _zeta(args.zeta)
    if args.method == "partial":
        sel = partial_order_select(args.k, args.ktotal)
    elif args.method == "coverage":
        sel = coverage_select(args.k, args.ktotal, args.gamma, env.c_min, env.c_max, zeta,
                              make_rng(args.seed, "zeta", 0))
    else:
        q_star, pi_star, _ = value_iteration(env)
        model = sample_and_estimate(env, args.min_visits, args.trajectory_length, args.seed)
        steps = args.steps or 4000 * env.num_states
        learner = LearnerConfig(steps=steps, trajectory_length=args.trajectory_length,
                                schedules=Schedules.for_budget(env.num_states, env.num_actions, steps))
        pool = MemberPool(build_family(model, args.ktotal, args.gamma), env, q_star, learner, args.seed)
        sel = exhaustive_select(args.k, args.ktotal, subset_evaluator(pool, pi_star, q_star), args.repeats,
                                args.budget)
    out = Path(args.output)
    _write_json(out, sel.to_dict())
    _write_json(out.with_name(out.stem + ".metadata.json"), _metadata("select", time.perf_counter() - start))
    print(f"{args.method}: {sel.chosen} ({sel.comparisons_made} comparisons, {sel.neql_invocations} learner runs)")
    return EXIT_OK


# -- validate bounds ------------------------------------------------------------


def cmd_validate_bounds(args) -> int:
    start = time.perf_counter()
    pairs = _parse_pairs(args.pairs)
    cfg = BenchConfig(num_states=args.states, seeds=1, root_seed=args.seed)
    if args.steps:
        cfg = replace(cfg, steps_per_state=max(1, args.steps // args.states))
    fixed_u = None if args.u == "schedule" else float(args.u)
    learner = cfg.learner(args.states, args.actions, fixed_u=fixed_u, num_checkpoints=args.checkpoints)
    spec = spec_from_label(args.label, num_states=args.states, num_actions=args.actions, gamma=cfg.gamma)
    trial = prepare_trial(spec, cfg, args.seed, learner=learner, k_total=args.ktotal)
    for s, a in pairs:
        if not (0 <= s < args.states and 0 <= a < args.actions):
            raise ConfigError("pairs", f"pair {s}:{a} is outside the graph")
    val = validate_bounds(trial, pairs, prop=args.prop, order=args.order,
                          orders=list(range(1, args.k + 1)), normalization=args.normalization)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    for j, (s, a) in enumerate(val.pairs):
        write_bound_csv(out / f"bounds_prop{args.prop}_{s}_{a}.csv", (s, a), val.times, val.series[:, j], val.bounds[j])
    summary = {
        "prop": args.prop,
        "pairs": [list(p) for p in val.pairs],
        "post_burn_in_mean": val.means.tolist(),
        "contained": val.contained.tolist(),
        "containment_rate": float(val.contained.mean()),
        "bounds": [{"exp_lb": b.exp_lb, "exp_ub": b.exp_ub, "var_lb": b.var_lb, "var_ub": b.var_ub}
                   for b in val.bounds],
        "params": val.params,
    }
    _write_json(out / "bounds_summary.json", summary)
    _write_json(out / "metadata.json", _metadata("validate bounds", time.perf_counter() - start))
    print(f"prop {args.prop}: {int(val.contained.sum())}/{len(val.pairs)} pairs inside the widened interval")
    return EXIT_OK


# -- bench ----------------------------------------------------------------------


def cmd_bench(args) -> int:
    start = time.perf_counter()
    cfg = BenchConfig(**SCALES[args.scale], seeds=args.seeds, root_seed=args.seed, workers=args.workers)
    if args.states:
        cfg = replace(cfg, num_states=args.states)
    if args.steps_per_state:
        cfg = replace(cfg, steps_per_state=args.steps_per_state)
    if args.repeats:
        cfg = replace(cfg, exhaustive_repeats=args.repeats)
    out = Path(args.output)
    if args.table is not None:
        report = run_table(cfg, args.table)
    else:
        report = run_figure(cfg, args.figure, out_dir=out)
    csv_path, json_path = report.write(out)
    _write_json(out / f"{report.name}.metadata.json", _metadata("bench", time.perf_counter() - start))
    print(f"wrote {csv_path} and {json_path}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="memq-lab", description="Coverage-ranked multi-environment Q-learning lab")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("graph", help="graph tools")
    gsub = g.add_subparsers(dest="graph_command", required=True)
    gg = gsub.add_parser("gen", help="generate a graph MDP")
    gg.add_argument("--spec", help="JSON graph spec file")
    gg.add_argument("--label", default="S-S-U-R", help="structure-sparsity-direction-regularity, e.g. U-D-D-I")
    gg.add_argument("--states", type=int, default=100)
    gg.add_argument("--actions", type=int, default=4)
    gg.add_argument("--gamma", type=float, default=0.9)
    gg.add_argument("--seed", type=int, default=0)
    gg.add_argument("-o", "--output", required=True)
    gg.set_defaults(func=cmd_graph_gen)

    r = sub.add_parser("run", help="run a pipeline")
    rsub = r.add_subparsers(dest="run_command", required=True)
    rc = rsub.add_parser("ccq", help="coverage-ranked ensemble Q-learning")
    rc.add_argument("--config", required=True)
    rc.add_argument("-o", "--output")
    rc.set_defaults(func=cmd_run_ccq)

    s = sub.add_parser("select", help="choose K of K_total environments")
    s.add_argument("--method", choices=("exhaustive", "partial", "coverage"), required=True)
    s.add_argument("--k", type=int, required=True)
    s.add_argument("--ktotal", type=int, required=True)
    s.add_argument("--gamma", type=float, default=0.9)
    s.add_argument("--zeta", default="uniform")
    s.add_argument("--graph", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--budget", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--min-visits", type=int, default=40)
    s.add_argument("--trajectory-length", type=int, default=10)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_select)

    v = sub.add_parser("validate", help="validation tools")
    vsub = v.add_subparsers(dest="validate_command", required=True)
    vb = vsub.add_parser("bounds", help="trace ln C against the coverage bounds")
    vb.add_argument("--prop", type=int, choices=(1, 2, 3, 4), required=True)
    vb.add_argument("--pairs", required=True, help="comma-separated s:a pairs")
    vb.add_argument("--label", default="S-S-U-R")
    vb.add_argument("--states", type=int, default=200)
    vb.add_argument("--actions", type=int, default=2)
    vb.add_argument("--order", type=int, default=1)
    vb.add_argument("--k", type=int, default=5)
    vb.add_argument("--ktotal", type=int, default=10)
    vb.add_argument("--u", default="0.5", help="fixed update ratio or 'schedule'")
    vb.add_argument("--steps", type=int)
    vb.add_argument("--checkpoints", type=int, default=200)
    vb.add_argument("--normalization", choices=("state", "joint"), default="state")
    vb.add_argument("--seed", type=int, default=0)
    vb.add_argument("-o", "--output", required=True)
    vb.set_defaults(func=cmd_validate_bounds)

    b = sub.add_parser("bench", help="experiment tables and figure data")
    what = b.add_mutually_exclusive_group(required=True)
    what.add_argument("--table", type=int, choices=(1, 2, 3))
    what.add_argument("--figure", choices=("1a", "1b", "2a", "2b", "2c", "2d", "2e"))
    b.add_argument("--scale", choices=tuple(SCALES), default="desk")
    b.add_argument("--seeds", type=int, default=20)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--states", type=int)
    b.add_argument("--steps-per-state", type=int)
    b.add_argument("--repeats", type=int)
    b.add_argument("--workers", type=int, default=1)
    b.add_argument("-o", "--output", default="bench_out")
    b.set_defaults(func=cmd_bench)
    return p


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (BudgetError, ConvergenceError, CoverageError, SelectionBudgetError)):
        return EXIT_BUDGET
    if isinstance(exc, (FileNotFoundError, PermissionError, IsADirectoryError, OSError)):
        return EXIT_IO
    if isinstance(exc, (InfeasibleSpecError, ValueError)):
        return EXIT_DOMAIN
    return EXIT_OTHER


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes
        code = exit_code_for(exc)
        print(f"memq-lab: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
