import itertools

import numpy as np
import pytest

from memq_lab.graphs import (SENSITIVITY_DELTAS, GraphSpec, InfeasibleSpecError, check_knobs, generate,
                             graph_adjacency, is_block_circulant, perturb)

KNOBS = list(itertools.product(("structured", "unstructured"), ("sparse", "dense"),
                               ("directed", "undirected"), ("regular", "irregular")))


def circulant_oracle(matrix, m):
    """Independent check: block (i, j) equals block (0, j - i mod m) via explicit index arithmetic."""
    n = matrix.shape[0]
    b = n // m
    for r in range(n):
        for c in range(n):
            i, j = divmod(r, b)[0], divmod(c, b)[0]
            ref = matrix[r % b, ((j - i) % m) * b + c % b]
            if matrix[r, c] != ref:
                return False
    return True


@pytest.mark.parametrize("knobs", KNOBS, ids=["-".join(k[0].upper() for k in kk) for kk in KNOBS])
def test_every_knob_combination_meets_its_predicates(knobs):
    spec = GraphSpec(200, 4, *knobs, seed=3)
    mdp = generate(spec)
    # degree knobs refer to the edge skeleton recorded by the generator
    assert check_knobs(spec, mdp.meta) == []
    # sparsity and symmetry are re-measured on the tensor itself
    support = mdp.transitions > 0
    if spec.sparsity == "sparse":
        assert np.mean(~support) >= 0.8
    else:
        assert np.mean(support) >= 0.8
    if spec.direction == "undirected":
        adj = graph_adjacency(mdp)
        assert np.array_equal(adj, adj.T)
    np.testing.assert_allclose(mdp.transitions.sum(axis=2), 1.0, atol=1e-12)


def test_sparse_threshold_over_many_seeds():
    for seed in range(100):
        mdp = generate(GraphSpec(100, 4, "unstructured", "sparse", seed=seed))
        assert np.mean(mdp.transitions == 0.0) >= 0.8


@pytest.mark.parametrize("regularity", ["regular", "irregular"])
def test_undirected_adjacency_symmetric(regularity):
    for seed in range(10):
        mdp = generate(GraphSpec(40, 2, "unstructured", "sparse", "undirected", regularity, seed=seed))
        adj = graph_adjacency(mdp)
        assert np.array_equal(adj, adj.T)


@pytest.mark.parametrize("knobs", [k for k in KNOBS if k[0] == "structured"])
def test_structured_is_block_circulant_small(knobs):
    spec = GraphSpec(12, 3, *knobs, degree_range=(0, 3) if knobs[1] == "sparse" else (0, 5),
                     sparsity_threshold=0.7 if knobs[1] == "sparse" else 0.8, seed=1)
    try:
        mdp = generate(spec)
    except InfeasibleSpecError:
        pytest.skip("knob combination infeasible at 12 states")
    for a in range(mdp.num_actions):
        assert is_block_circulant(mdp.transitions[a], 4)
        assert circulant_oracle(mdp.transitions[a], 4)


def test_block_circulant_predicate_rejects_perturbation():
    mdp = generate(GraphSpec(12, 1, "structured", "dense", seed=0))
    p = mdp.transitions[0].copy()
    assert is_block_circulant(p, 4)
    p[5, 7] += 1e-3
    assert not is_block_circulant(p, 4)
    assert not circulant_oracle(p, 4)


def test_same_seed_bit_identical():
    spec = GraphSpec(60, 3, "structured", "sparse", "undirected", "regular", seed=11)
    a, b = generate(spec), generate(spec)
    assert np.array_equal(a.transitions, b.transitions) and np.array_equal(a.costs, b.costs)
    c = generate(GraphSpec(60, 3, "structured", "sparse", "undirected", "regular", seed=12))
    assert not np.array_equal(a.transitions, c.transitions)


def test_costs_within_range():
    mdp = generate(GraphSpec(40, 4, seed=2))
    assert mdp.costs.min() >= 0.5 and mdp.costs.max() <= 1.0


def test_perturb_examples():
    spec = GraphSpec(100)
    assert perturb(spec, {"sparsity_threshold": -0.1}).sparsity_threshold == pytest.approx(0.7)
    assert perturb(spec, {"sparsity_threshold": -0.2}).sparsity_threshold == pytest.approx(0.6)
    assert perturb(spec, {"degree_range": (0, -2)}).degree_range == (0, 3)
    assert perturb(spec, {}) == spec
    assert perturb(spec, {"sparsity_threshold": 0.0}) == spec
    assert len(SENSITIVITY_DELTAS) == 3
    with pytest.raises(ValueError):
        perturb(spec, {"degree_range": (-1, 0)})
    with pytest.raises(ValueError):
        perturb(spec, {"num_states": 3})


@pytest.mark.parametrize("kwargs", [
    dict(num_states=10, regularity="regular", degree_range=(20, 20)),
    dict(num_states=10, structure="structured"),  # 10 states do not split into 4 blocks
    dict(num_states=9, direction="undirected", regularity="regular", degree_range=(3, 3), sparsity_threshold=0.5),
])
def test_infeasible_specs_fail_explicitly(kwargs):
    with pytest.raises(InfeasibleSpecError):
        generate(GraphSpec(**kwargs))


def test_invalid_spec_values():
    with pytest.raises(ValueError):
        GraphSpec(10, structure="lattice")
    with pytest.raises(ValueError):
        GraphSpec(10, degree_range=(4, 2))


def test_spec_round_trip():
    spec = GraphSpec(40, 2, "structured", "dense", "undirected", "regular", seed=5)
    assert GraphSpec.from_dict(spec.to_dict()) == spec
    assert spec.label == "S-D-U-R"
