import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from memq_lab.envs import build_family, sample_and_estimate
from memq_lab.graphs import GraphSpec, generate, random_mdp
from memq_lab.mdp import DEFAULT_INIT_FLOOR, Mdp, average_policy_error, value_iteration
from memq_lab.qlearning import (BudgetError, EnsembleState, LearnerConfig, MemberPool, Schedules,
                                ensemble_update, log_ratio_cumsum, q_step, run_member, run_neql,
                                run_single_env, write_trace)
from memq_lab.seeding import make_rng


def test_q_step_cases():
    q = np.array([[1.0, 2.0], [3.0, 0.5]])
    assert np.array_equal(q_step(q, 0, 1, 1, 0.7, 0.0, 0.9), q)
    out = q_step(q, 0, 1, 1, 0.7, 1.0, 0.0)
    assert out[0, 1] == 0.7 and out[1, 1] == 0.5
    out = q_step(q, 1, 0, 0, 1.0, 0.5, 0.9)
    assert out[1, 0] == pytest.approx(0.5 * 3.0 + 0.5 * (1.0 + 0.9 * 1.0))
    assert q[1, 0] == 3.0  # input untouched


def test_q_step_fixed_point_matches_value_iteration():
    q = np.zeros((1, 1))
    for _ in range(2000):
        q = q_step(q, 0, 0, 0, 1.0, 0.5, 0.9)
    assert q[0, 0] == pytest.approx(10.0, abs=1e-9)
    q_star, _, _ = value_iteration(Mdp(np.ones((1, 1, 1)), np.ones((1, 1)), 0.9), tol=1e-12)
    assert q[0, 0] == pytest.approx(q_star[0, 0], abs=1e-9)


def test_schedules():
    s = Schedules(c1=100, c2=0.9, c3=0.1, c4=50)
    assert s.alpha(0) == 1.0 and s.alpha(100) == pytest.approx(0.5)
    assert s.epsilon(0) == 1.0 and s.epsilon(10_000) == pytest.approx(0.1)
    assert s.update_ratio(0) == 0.0 and s.update_ratio(1e6) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        Schedules(c2=1.5)


def test_budget_scaled_schedule_centres_averaging():
    s = Schedules.for_budget(100, 4, 400_000)
    assert s.c1 == 4000
    assert s.c4 * math.log(s.c4) == pytest.approx(0.6 * 400_000, rel=1e-6)
    assert Schedules.for_budget(10, 2, 1000, c3=0.2).c3 == 0.2


def test_log_ratio_cumsum():
    s = Schedules(c4=10.0)
    lc = log_ratio_cumsum(20, s)
    assert lc[0] == 0.0
    assert lc[5] == pytest.approx(sum(math.log(1 - math.exp(-t / 10.0)) for t in range(1, 6)))
    assert log_ratio_cumsum(4, s, fixed_u=0.5)[4] == pytest.approx(4 * math.log(0.5))


def test_single_env_one_state_fixed_point():
    env = Mdp(np.ones((1, 1, 1)), np.array([[0.5]]), 0.9)
    q = run_single_env(env, Schedules(c1=50_000), 20_000, 10, 0)
    assert q[0, 0] == pytest.approx(5.0, abs=0.02)


def test_single_env_matches_member_oracle():
    env = random_mdp(5, 2, 0.9, 1, branching=3)
    member = build_family(env, 2).member(2)
    q_star, pi, _ = value_iteration(member, tol=1e-12)
    q = run_single_env(member, Schedules(c1=300, c3=0.3), 20_000, 10, 0)
    assert np.max(np.abs(q - q_star)) <= 0.05
    assert average_policy_error(pi, q.argmin(axis=1)) == 0.0


def test_single_env_deterministic_and_budgeted():
    env = random_mdp(4, 2, 0.9, 0)
    a = run_single_env(env, Schedules(), 50, 10, 3)
    b = run_single_env(env, Schedules(), 50, 10, 3)
    assert np.array_equal(a, b)
    with pytest.raises(BudgetError):
        run_single_env(env, Schedules(), 10_000, 10, 3, max_steps=100)
    assert run_single_env(env, Schedules(), 0, 10, 3, steps=123).shape == (4, 2)


def test_exploration_floor_respected():
    s = Schedules(c2=0.99, c3=0.1)
    assert np.all(s.epsilon(np.arange(1000, 5000)) >= 0.1)


# -- ensemble combiner ------------------------------------------------------------


def test_ensemble_update_limits():
    members = (np.full((2, 2), 1.0), np.full((2, 2), 3.0))
    st0 = EnsembleState(members, np.full((2, 2), 10.0), u=0.0)
    assert np.array_equal(ensemble_update(st0).q_hat, np.full((2, 2), 2.0))
    frozen = EnsembleState(members, np.full((2, 2), 10.0), u=1.0 - 1e-15)
    for _ in range(100):
        frozen = ensemble_update(frozen)
    np.testing.assert_allclose(frozen.q_hat, 10.0, atol=1e-10)
    with pytest.raises(ValueError):
        ensemble_update(st0, num_members=3)


@pytest.mark.parametrize("u,k", [(0.5, 1), (0.5, 5), (0.9, 1), (0.9, 5)])
def test_ema_steady_state_variance(u, k):
    rng = np.random.default_rng(1)
    steps = 100_000
    noise = rng.standard_normal((steps, k)).mean(axis=1)
    x, out = 0.0, np.empty(steps)
    for t in range(steps):
        x = u * x + (1 - u) * noise[t]
        out[t] = x
    assert out[1000:].var() == pytest.approx((1 - u) / (1 + u) / k, rel=0.1)


def test_scheduled_ratio_shrinks_trailing_variance():
    rng = np.random.default_rng(0)
    s = Schedules(c4=200.0)
    state = EnsembleState((np.zeros(1),), np.zeros(1))
    trace = []
    for t in range(20_000):
        state = ensemble_update(EnsembleState((rng.standard_normal(1),), state.q_hat, None, state.t), s)
        trace.append(state.q_hat[0])
    windows = np.array(trace[4000:]).reshape(4, -1).var(axis=1)
    assert np.all(np.diff(windows) <= 1e-12 + 0.2 * windows[:-1])  # nonincreasing up to sampling noise
    assert windows[-1] < windows[0]


@pytest.mark.parametrize("order,fixed_u", [(1, None), (2, None), (3, 0.7)])
def test_lazy_ema_matches_explicit_loop(order, fixed_u):
    env = random_mdp(3, 2, 0.9, 2)
    steps = 300
    s = Schedules(c1=50, c4=30)
    q_star, _, _ = value_iteration(env)
    run = run_member(env, order, steps, s, make_rng(0, "m"), q_star, 5, fixed_u=fixed_u,
                     checkpoints=range(1, steps + 1))
    e = np.full((3, 2), DEFAULT_INIT_FLOOR)
    for t in range(1, steps + 1):
        u = fixed_u if fixed_u is not None else 1.0 - math.exp(-t / s.c4)
        e = u * e + (1 - u) * run.q_snapshots[t - 1]
        np.testing.assert_allclose(run.ema_snapshots[t - 1], e, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(run.ema, e, rtol=1e-10)


def test_member_error_statistics_match_snapshots():
    env = random_mdp(3, 2, 0.9, 4)
    steps = 400
    q_star, _, _ = value_iteration(env)
    run = run_member(env, 1, steps, Schedules(c1=50, c4=30), make_rng(1, "m"), q_star, 5,
                     checkpoints=range(1, steps + 1), window_fraction=0.5)
    errs = run.q_snapshots[steps // 2:] - q_star
    assert run.error_mean == pytest.approx(errs.mean(), rel=1e-9)
    assert run.error_var == pytest.approx(errs.var(), rel=1e-9)
    assert run.lam == pytest.approx(math.sqrt(3 * errs.var()))


# -- pool -------------------------------------------------------------------------


@pytest.fixture(scope="module")
def pool():
    env = generate(GraphSpec(24, 2, "structured", "dense", seed=0))
    q_star, pi, _ = value_iteration(env)
    model = sample_and_estimate(env, 40, 10, 0)
    cfg = LearnerConfig(steps=40_000, schedules=Schedules.for_budget(24, 2, 40_000), num_checkpoints=10)
    return MemberPool(build_family(model, 5, 0.9), env, q_star, cfg, 0), pi


def test_pool_caches_and_combines(pool):
    p, _ = pool
    assert p.run(2, 0) is p.run(2, 0)
    before = p.invocations
    q = p.ensemble([1, 3], 0)
    assert p.invocations == before + 1
    np.testing.assert_allclose(q, (p.run(1).ema + p.run(3).ema) / 2)
    assert not np.array_equal(p.run(2, 0).q, p.run(2, 1).q)


def test_member_one_uses_true_environment(pool):
    p, _ = pool
    assert np.array_equal(p.env(1).transitions, p.true_env.transitions)
    assert np.array_equal(p.env(2).transitions, p.family.member(2).transitions)


def test_neql_trace_records(pool, tmp_path):
    p, pi = pool
    res = run_neql(p, [3, 1], 0, pi)
    assert res.orders == [1, 3] and len(res.trace) == 10
    rec = res.trace[-1]
    assert set(rec) == {"t", "member_bellman_gaps", "ensemble_ape", "u_t", "eps_t", "alpha_t"}
    assert rec["t"] == 40_000 and 0.0 <= rec["ensemble_ape"] <= 1.0
    path = tmp_path / "trace.jsonl"
    write_trace(res.trace, path)
    assert len(path.read_text().splitlines()) == 10


def test_ensemble_converges_on_small_graph(pool):
    p, pi = pool
    res = run_neql(p, [1, 2], 0, pi)
    assert average_policy_error(pi, res.policy) <= 0.25


@settings(max_examples=20, deadline=None)
@given(st.floats(0.0, 0.99), st.integers(1, 6), st.integers(0, 1000))
def test_ensemble_update_is_convex_combination(u, k, seed):
    rng = np.random.default_rng(seed)
    members = tuple(rng.random((3, 2)) for _ in range(k))
    prior = rng.random((3, 2))
    new = ensemble_update(EnsembleState(members, prior, u=u)).q_hat
    lo = np.minimum(prior, np.min(members, axis=0))
    hi = np.maximum(prior, np.max(members, axis=0))
    assert np.all(new >= lo - 1e-12) and np.all(new <= hi + 1e-12)
