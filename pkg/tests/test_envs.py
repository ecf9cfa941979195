import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from memq_lab.envs import (CoverageError, EnvironmentFamily, EstimatedModel, build_family, hop_transitions,
                           sample_and_estimate)
from memq_lab.graphs import GraphSpec, generate, random_mdp
from memq_lab.mdp import Mdp, value_iteration
from memq_lab.selection import theoretical_lambda


def chain():
    # state 0 -> 1 and 1 -> 0 under action 0; both stay under action 1
    p = np.zeros((2, 2, 2))
    p[0, 0, 1] = p[0, 1, 0] = 1.0
    p[1, 0, 0] = p[1, 1, 1] = 1.0
    return Mdp(p, np.array([[0.6, 0.7], [0.8, 0.9]]), 0.9)


def test_deterministic_chain_recovered_exactly():
    env = chain()
    model = sample_and_estimate(env, min_visits=40, trajectory_length=10, seed=0)
    assert np.array_equal(model.transitions, env.transitions)
    np.testing.assert_allclose(model.costs, env.costs)
    assert model.visit_counts.min() >= 40
    assert (model.min_visits, model.trajectory_length) == (40, 10)


def test_l1_concentration_over_seeds():
    env = random_mdp(3, 2, 0.9, 0)
    ok = 0
    for seed in range(100):
        model = sample_and_estimate(env, min_visits=5000, trajectory_length=10, seed=seed)
        l1 = np.abs(model.transitions - env.transitions).sum(axis=2)
        ok += bool(l1.max() <= 0.05)
    assert ok >= 95


def test_cost_noise_stays_in_range():
    env = random_mdp(4, 2, 0.9, 1)
    model = sample_and_estimate(env, 50, 10, 0, cost_noise=0.2)
    lo, hi = model.cost_range
    assert np.all(model.costs >= lo) and np.all(model.costs <= hi)


def test_unreachable_pair_reported():
    p = np.zeros((1, 3, 3))
    p[0, 0, 0] = p[0, 1, 1] = p[0, 2, 2] = 1.0  # absorbing states; starts are chosen so all get visited
    env = Mdp(p, np.ones((3, 1)), 0.9)
    model = sample_and_estimate(env, 5, 2, 0)
    assert model.visit_counts.min() >= 5
    with pytest.raises(CoverageError) as exc:
        sample_and_estimate(random_mdp(6, 2, 0.9, 0), 100_000, 10, 0, episode_cap=3)
    assert len(exc.value.uncovered) == 12
    assert "(0,0)" in str(exc.value)


def test_estimation_deterministic():
    env = random_mdp(5, 2, 0.9, 3)
    a, b = sample_and_estimate(env, 30, 10, 7), sample_and_estimate(env, 30, 10, 7)
    assert np.array_equal(a.transition_counts, b.transition_counts)


def test_order_one_member_is_base():
    env = random_mdp(5, 2, 0.8, 2)
    fam = build_family(env, 4)
    assert np.array_equal(fam.member(1).transitions, env.transitions)
    assert fam.member(1).gamma == env.gamma
    assert [m.gamma for m in fam.members] == pytest.approx([0.8 ** n for n in range(1, 5)])


def test_permutation_cube():
    perm = np.array([2, 0, 3, 1, 4])
    p = np.eye(5)[perm][None]
    env = Mdp(p, np.ones((5, 1)), 0.9)
    third = build_family(env, 3).member(3).transitions[0]
    # oracle: follow the permutation three times
    expected = np.zeros((5, 5))
    for s in range(5):
        expected[s, perm[perm[perm[s]]]] = 1.0
    assert np.array_equal(third, expected)


def test_incremental_powers_match_direct_power():
    env = random_mdp(8, 3, 0.9, 4)
    fam = build_family(env, 6)
    for n in range(1, 7):
        np.testing.assert_allclose(fam.member(n).transitions, hop_transitions(env.transitions, n), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 8), st.integers(1, 3), st.integers(1, 10), st.integers(0, 10_000))
def test_member_rows_stochastic(n, m, k, seed):
    fam = build_family(random_mdp(n, m, 0.9, seed, branching=2), k)
    for mem in fam.members:
        np.testing.assert_allclose(mem.transitions.sum(axis=2), 1.0, atol=1e-9)


@pytest.mark.parametrize("gamma", [0.5, 0.9])
def test_constant_cost_member_error_equals_closed_form(gamma):
    """With a constant cost c the n-hop optimum is c / (1 - gamma^n), so its gap to Q* is closed form."""
    env = generate(GraphSpec(24, 2, sparsity="dense", seed=0, gamma=gamma))
    env = Mdp(env.transitions, np.full_like(env.costs, 0.7), gamma)
    q_star, _, _ = value_iteration(env, tol=1e-12)
    fam = build_family(env, 6)
    for n in range(1, 7):
        qn, _, _ = value_iteration(fam.member(n), tol=1e-12)
        gap = np.abs(qn - q_star)
        np.testing.assert_allclose(gap, theoretical_lambda(gamma, n, 0.7) / np.sqrt(3.0), atol=1e-9)


def test_family_round_trip(tmp_path):
    fam = build_family(random_mdp(4, 2, 0.9, 0), 3)
    fam.save(tmp_path)
    back = EnvironmentFamily.load(tmp_path)
    assert back.k_total == 3
    for a, b in zip(fam.members, back.members):
        assert np.array_equal(a.transitions, b.transitions) and a.gamma == b.gamma
    assert (tmp_path / "manifest.json").exists()


def test_family_from_estimated_model():
    env = random_mdp(4, 2, 0.9, 5)
    model = sample_and_estimate(env, 20, 10, 0)
    assert isinstance(model, EstimatedModel)
    fam = build_family(model, 3, 0.9)
    assert fam.member(2).gamma == pytest.approx(0.81)


def test_bad_orders():
    with pytest.raises(ValueError):
        hop_transitions(np.eye(2)[None], 0)
    with pytest.raises(ValueError):
        build_family(random_mdp(3, 1, 0.9, 0), 0)
