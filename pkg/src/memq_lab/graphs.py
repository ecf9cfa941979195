"""Random network-graph MDPs with four structural knobs.

The generator works on the *first block row* ``R`` of a block-circulant
matrix: states are split into ``m`` blocks of ``b = S / m`` states and the
full matrix is obtained by cyclically shifting ``R`` by ``b`` columns per
block row.  Unstructured graphs use a single block (``m = 1``), so both cases
share one code path.

The network graph (degree, directionality, regularity) lives in a boolean
adjacency without self loops.  The transition tensor puts weight on the graph
edges and, for dense specs, on an additional background support that fills at
least ``sparsity_threshold`` of every row.  Isolated states get a self loop.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import networkx as nx
import numpy as np

from .mdp import Mdp
from .seeding import derive_int, make_rng

STRUCTURES = ("structured", "unstructured")
SPARSITIES = ("sparse", "dense")
DIRECTIONS = ("directed", "undirected")
REGULARITIES = ("regular", "irregular")

MAX_ATTEMPTS = 64

# Perturbation protocol used for the sensitivity metric.
SENSITIVITY_DELTAS = (
    {"sparsity_threshold": -0.1},
    {"sparsity_threshold": -0.2},
    {"degree_range": (0, -2)},
)


class InfeasibleSpecError(ValueError):
    """The requested knob combination cannot be realised."""


@dataclass(frozen=True)
class GraphSpec:
    num_states: int
    num_actions: int = 4
    structure: str = "unstructured"
    sparsity: str = "sparse"
    direction: str = "directed"
    regularity: str = "irregular"
    degree_range: tuple = (0, 5)
    sparsity_threshold: float = 0.8
    direction_ratio: float = 0.5
    cost_low: float = 0.5
    cost_high: float = 1.0
    seed: int = 0
    gamma: float = 0.9
    num_blocks: int = 4
    background_mass: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "degree_range", tuple(int(d) for d in self.degree_range))
        if self.num_states < 2 or self.num_actions < 1:
            raise ValueError("need at least two states and one action")
        for name, value, allowed in (
            ("structure", self.structure, STRUCTURES),
            ("sparsity", self.sparsity, SPARSITIES),
            ("direction", self.direction, DIRECTIONS),
            ("regularity", self.regularity, REGULARITIES),
        ):
            if value not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {value!r}")
        lo, hi = self.degree_range
        if len(self.degree_range) != 2 or lo < 0 or lo > hi:
            raise ValueError(f"degree_range must be an ordered non-negative pair, got {self.degree_range}")
        if not 0.0 < self.sparsity_threshold < 1.0:
            raise ValueError("sparsity_threshold must lie in (0, 1)")
        if not 0.0 < self.direction_ratio < 1.0:
            raise ValueError("direction_ratio must lie in (0, 1)")
        if not 0.0 < self.cost_low < self.cost_high < math.inf:
            raise ValueError("need 0 < cost_low < cost_high < inf")
        if not 0.0 < self.background_mass < 1.0:
            raise ValueError("background_mass must lie in (0, 1)")
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be positive")

    @property
    def blocks(self) -> int:
        return self.num_blocks if self.structure == "structured" else 1

    @property
    def regular_degree(self) -> int:
        lo, hi = self.degree_range
        return math.ceil((lo + hi) / 2)

    @property
    def label(self) -> str:
        return "-".join(k[0].upper() for k in (self.structure, self.sparsity, self.direction, self.regularity))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["degree_range"] = list(self.degree_range)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "GraphSpec":
        return cls(**data)


def perturb(spec: GraphSpec, deltas: dict) -> GraphSpec:
    """Shift numeric knobs of ``spec`` additively; the result must stay valid."""
    changes = {}
    for key, delta in deltas.items():
        if key == "degree_range":
            lo, hi = spec.degree_range
            changes[key] = (lo + int(delta[0]), hi + int(delta[1]))
        elif key in ("sparsity_threshold", "direction_ratio", "background_mass", "cost_low", "cost_high"):
            changes[key] = getattr(spec, key) + float(delta)
        else:
            raise ValueError(f"cannot perturb {key!r}")
    try:
        return replace(spec, **changes)
    except ValueError as exc:
        raise ValueError(f"perturbation {deltas} leaves the valid range: {exc}") from exc


# -- adjacency construction --------------------------------------------------


def _partner(b: int, m: int, r: np.ndarray, col: np.ndarray):
    """Entry of the first block row that mirrors ``(r, col)`` under transposition."""
    c = col % b
    k = col // b
    return c, ((-k) % m) * b + r


def tile_block_row(first: np.ndarray, m: int) -> np.ndarray:
    b = first.shape[-2]
    return np.concatenate([np.roll(first, i * b, axis=-1) for i in range(m)], axis=-2)


def _target_degrees(spec: GraphSpec, b: int, rng: np.random.Generator) -> np.ndarray:
    if spec.regularity == "regular":
        return np.full(b, spec.regular_degree, dtype=np.int64)
    lo, hi = spec.degree_range
    return rng.integers(lo, hi + 1, size=b)


def _directed_rows(spec: GraphSpec, b: int, rng) -> np.ndarray:
    n = spec.num_states
    first = np.zeros((b, n), dtype=bool)
    for r, d in enumerate(_target_degrees(spec, b, rng)):
        others = np.delete(np.arange(n), r)
        first[r, rng.choice(others, size=int(d), replace=False)] = True
    return first


def _undirected_rows(spec: GraphSpec, b: int, m: int, rng) -> np.ndarray:
    """Random symmetric pairing of first-row entries with degree caps."""
    n = spec.num_states
    first = np.zeros((b, n), dtype=bool)
    target = _target_degrees(spec, b, rng)
    deg = np.zeros(b, dtype=np.int64)
    misses = 0
    while misses < 50 * b + 50:
        open_rows = np.flatnonzero(deg < target)
        if open_rows.size == 0:
            break
        r, c = rng.choice(open_rows, size=2)
        k = int(rng.integers(m))
        col = k * b + c
        pr, pcol = _partner(b, m, np.int64(r), np.int64(col))
        if col == r or first[r, col]:
            misses += 1
            continue
        if pr == r and pcol == col:
            first[r, col] = True
            deg[r] += 1
        elif r != pr or deg[r] + 2 <= target[r]:
            first[r, col] = first[pr, pcol] = True
            deg[r] += 1
            deg[pr] += 1
        else:
            misses += 1
    return first


def _regular_undirected_rows(spec: GraphSpec, b: int, rng) -> np.ndarray:
    n, d = spec.num_states, spec.regular_degree
    if spec.structure == "structured":
        # a symmetric circulant is block circulant and regular
        if d % 2 and n % 2:
            raise InfeasibleSpecError(f"odd degree {d} needs an even state count for a symmetric circulant")
        half = rng.choice(np.arange(1, (n - 1) // 2 + 1), size=d // 2, replace=False)
        offsets = list(half) + [n - h for h in half] + ([n // 2] if d % 2 else [])
        first = np.zeros((b, n), dtype=bool)
        for r in range(b):
            first[r, [(r + o) % n for o in offsets]] = True
        return first
    if (d * n) % 2:
        raise InfeasibleSpecError(f"no {d}-regular undirected graph on {n} states")
    g = nx.random_regular_graph(d, n, seed=int(rng.integers(2**31)))
    return nx.to_numpy_array(g, nodelist=range(n), dtype=bool)


def _background_rows(spec: GraphSpec, b: int, m: int, rng) -> np.ndarray:
    n = spec.num_states
    fill = 0.5 * (1.0 + spec.sparsity_threshold)
    raw = rng.random((b, n)) < fill
    if spec.direction == "undirected":
        r, col = np.meshgrid(np.arange(b), np.arange(n), indexing="ij")
        pr, pcol = _partner(b, m, r, col)
        flat, pflat = r * n + col, pr * n + pcol
        raw = raw.ravel()[np.minimum(flat, pflat)].reshape(b, n)
    return raw


def knob_stats(graph: np.ndarray, support: np.ndarray) -> dict:
    """Measured knob statistics of a graph adjacency and a tensor support."""
    n = graph.shape[0]
    off = graph & ~np.eye(n, dtype=bool)
    either = np.triu(off | off.T, 1)
    one_way = np.triu(off ^ off.T, 1)
    connected = int(either.sum())
    degrees = off.sum(axis=1)
    return {
        "zero_fraction": float(1.0 - support.mean()),
        "connected_pairs": connected,
        "one_directional_fraction": float(one_way.sum() / connected) if connected else 0.0,
        "symmetric": bool(np.array_equal(graph, graph.T)),
        "support_symmetric": bool(np.array_equal(support.any(axis=0), support.any(axis=0).T)),
        "degree_min": int(degrees.min()),
        "degree_max": int(degrees.max()),
        "degree_distinct": int(np.unique(degrees).size),
    }


def check_knobs(spec: GraphSpec, stats: dict) -> list:
    """Names of the knob predicates that ``stats`` violates."""
    bad = []
    if spec.sparsity == "sparse" and stats["zero_fraction"] < spec.sparsity_threshold:
        bad.append("sparsity")
    if spec.sparsity == "dense" and 1.0 - stats["zero_fraction"] < spec.sparsity_threshold:
        bad.append("density")
    if spec.direction == "undirected" and not (stats["symmetric"] and stats["support_symmetric"]):
        bad.append("symmetry")
    if spec.direction == "directed" and stats["one_directional_fraction"] < spec.direction_ratio:
        bad.append("directionality")
    lo, hi = spec.degree_range
    if spec.regularity == "regular" and stats["degree_distinct"] != 1:
        bad.append("regularity")
    if spec.regularity == "irregular":
        if stats["degree_min"] < lo or stats["degree_max"] > hi:
            bad.append("degree_range")
        if hi > lo and stats["degree_distinct"] < 2:
            bad.append("irregularity")
    return bad


def _precheck(spec: GraphSpec) -> None:
    n, m = spec.num_states, spec.blocks
    if n % m:
        raise InfeasibleSpecError(f"{n} states cannot be split into {m} equal blocks")
    top = spec.regular_degree if spec.regularity == "regular" else spec.degree_range[1]
    if top > n - 1:
        raise InfeasibleSpecError(f"degree {top} exceeds the {n - 1} available neighbours")
    if spec.sparsity == "sparse" and (max(top, 1)) / n > 1.0 - spec.sparsity_threshold:
        raise InfeasibleSpecError(
            f"degree {top} on {n} states cannot leave {spec.sparsity_threshold:.0%} zero entries"
        )


def generate(spec: GraphSpec) -> Mdp:
    """Draw a random MDP whose transition tensor satisfies the spec's knobs."""
    _precheck(spec)
    n, m = spec.num_states, spec.blocks
    b = n // m
    rng = make_rng(spec.seed, "graph")
    for attempt in range(MAX_ATTEMPTS):
        if spec.direction == "directed":
            first = _directed_rows(spec, b, rng)
        elif spec.regularity == "regular":
            first = _regular_undirected_rows(spec, b, rng)[:b]
        else:
            first = _undirected_rows(spec, b, m, rng)
        edges = first.copy()
        isolated = ~edges.any(axis=1)
        edges[np.flatnonzero(isolated), np.flatnonzero(isolated)] = True
        background = _background_rows(spec, b, m, rng) if spec.sparsity == "dense" else None

        weights = np.empty((spec.num_actions, b, n))
        for a in range(spec.num_actions):
            w = np.where(edges, rng.random((b, n)), 0.0)
            w /= w.sum(axis=1, keepdims=True)
            if background is not None:
                bg = np.where(background, rng.random((b, n)), 0.0)
                sums = bg.sum(axis=1, keepdims=True)
                bg = np.divide(bg, sums, out=np.zeros_like(bg), where=sums > 0)
                w = (1.0 - spec.background_mass * (sums > 0)) * w + spec.background_mass * bg
            weights[a] = w
        # rows are normalised before tiling so every block row is an exact shift
        transitions = tile_block_row(weights, m)
        graph = tile_block_row(first, m)
        stats = knob_stats(graph, transitions > 0.0)
        if not check_knobs(spec, stats):
            break
    else:
        raise InfeasibleSpecError(f"knob predicates {check_knobs(spec, stats)} unmet after {MAX_ATTEMPTS} draws")

    costs = rng.uniform(spec.cost_low, spec.cost_high, size=(n, spec.num_actions))
    meta = {"spec": spec.to_dict(), "attempts": attempt + 1, **stats}
    return Mdp(transitions, costs, spec.gamma, meta)


def graph_adjacency(mdp: Mdp) -> np.ndarray:
    """Action-aggregated support: an edge exists if any action reaches it."""
    return (mdp.transitions > 0.0).any(axis=0)


def is_block_circulant(matrix: np.ndarray, num_blocks: int) -> bool:
    n = matrix.shape[0]
    if n % num_blocks:
        return False
    b = n // num_blocks
    blocks = lambda i, j: matrix[i * b:(i + 1) * b, j * b:(j + 1) * b]
    return all(
        np.array_equal(blocks(i, j), blocks(0, (j - i) % num_blocks))
        for i in range(num_blocks)
        for j in range(num_blocks)
    )


def random_mdp(num_states: int, num_actions: int, gamma: float, seed: int,
               branching: int | None = None, cost_range=(0.5, 1.0)) -> Mdp:
    """Small unstructured MDP with Dirichlet rows, used by the oracle tests."""
    rng = make_rng(seed, "random_mdp")
    p = np.zeros((num_actions, num_states, num_states))
    k = num_states if branching is None else min(branching, num_states)
    for a in range(num_actions):
        for s in range(num_states):
            idx = rng.choice(num_states, size=k, replace=False)
            p[a, s, idx] = rng.dirichlet(np.ones(k))
    costs = rng.uniform(*cost_range, size=(num_states, num_actions))
    return Mdp(p, costs, gamma, {"generator": "random_mdp", "seed": derive_int(seed, "random_mdp")})
