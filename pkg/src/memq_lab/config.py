"""Versioned JSON run configuration with field-path validation errors."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .graphs import GraphSpec
from .qlearning import LearnerConfig, Schedules

SCHEMA = "memq-lab/run-config/1"
SCALES = ("desk", "paper")


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field, e.g. ``schedules.c2``."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class ScheduleConfig:
    c1: float | None = None
    c2: float = 0.999
    c3: float = 0.05
    c4: float | None = None
    freeze_fraction: float = 0.6


@dataclass
class RunConfig:
    graph: dict | str = field(default_factory=lambda: {"num_states": 100})
    schedules: ScheduleConfig = field(default_factory=ScheduleConfig)
    min_visits: int = 40
    trajectory_length: int = 10
    episode_cap: int | None = None
    steps: int | None = None  # defaults to 4000 per state
    k: int = 5
    k_total: int = 10
    gamma: float = 0.9
    u: float | str = "schedule"
    zeta: float | str = "uniform"
    tracked_pairs: list = field(default_factory=list)
    seed: int = 0
    scale: str = "desk"
    output_dir: str | None = None
    schema: str = SCHEMA

    # -- validation -------------------------------------------------------------

    def validate(self, base_dir=None) -> "RunConfig":
        if self.schema != SCHEMA:
            raise ConfigError("schema", f"expected {SCHEMA!r}, got {self.schema!r}")
        if isinstance(self.graph, str):
            path = Path(self.graph)
            if base_dir is not None and not path.is_absolute():
                path = Path(base_dir) / path
            if not path.exists():
                raise FileNotFoundError(f"graph file not found: {path}")
        elif isinstance(self.graph, dict):
            try:
                GraphSpec.from_dict({"gamma": self.gamma, **self.graph})
            except (TypeError, ValueError) as exc:
                raise ConfigError("graph", str(exc)) from exc
        else:
            raise ConfigError("graph", "must be a spec object or a path")
        _positive_int("min_visits", self.min_visits)
        _positive_int("trajectory_length", self.trajectory_length)
        if self.episode_cap is not None:
            _positive_int("episode_cap", self.episode_cap)
        if self.steps is not None:
            _positive_int("steps", self.steps)
        _positive_int("k", self.k)
        _positive_int("k_total", self.k_total)
        if self.k > self.k_total:
            raise ConfigError("k", f"must not exceed k_total={self.k_total}")
        _open_unit("gamma", self.gamma)
        if self.u != "schedule":
            _open_unit("u", self.u)
        if self.zeta != "uniform":
            _open_unit("zeta", self.zeta)
        s = self.schedules
        if s.c1 is not None and not _num(s.c1) > 0:
            raise ConfigError("schedules.c1", "must be positive")
        _open_unit("schedules.c2", s.c2)
        _open_unit("schedules.c3", s.c3)
        if s.c4 is not None and not _num(s.c4) > 0:
            raise ConfigError("schedules.c4", "must be positive")
        _open_unit("schedules.freeze_fraction", s.freeze_fraction)
        for i, p in enumerate(self.tracked_pairs):
            if not (isinstance(p, (list, tuple)) and len(p) == 2 and all(isinstance(x, int) and x >= 0 for x in p)):
                raise ConfigError(f"tracked_pairs[{i}]", "must be a [state, action] pair of non-negative ints")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed", "must be an unsigned 64-bit integer")
        if self.scale not in SCALES:
            raise ConfigError("scale", f"must be one of {SCALES}")
        return self

    # -- derived objects ----------------------------------------------------------

    def graph_spec(self) -> GraphSpec:
        if not isinstance(self.graph, dict):
            raise TypeError("graph is a path; load it with Mdp.load")
        return GraphSpec.from_dict({"gamma": self.gamma, "seed": self.seed, **self.graph})

    def learner(self, num_states: int, num_actions: int) -> LearnerConfig:
        steps = self.steps or 4000 * num_states
        s = self.schedules
        overrides = {k: v for k, v in (("c1", s.c1), ("c2", s.c2), ("c3", s.c3), ("c4", s.c4)) if v is not None}
        sched = Schedules.for_budget(num_states, num_actions, steps, s.freeze_fraction, **overrides)
        fixed_u = None if self.u == "schedule" else float(self.u)
        return LearnerConfig(steps=steps, trajectory_length=self.trajectory_length, schedules=sched,
                             fixed_u=fixed_u, num_checkpoints=100 if self.tracked_pairs else 0)

    # -- serialisation ------------------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tracked_pairs"] = [list(p) for p in self.tracked_pairs]
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("$", "config must be a JSON object")
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(key, "unknown field")
        data = dict(data)
        data.setdefault("schema", SCHEMA)
        sched = data.get("schedules", {})
        if not isinstance(sched, dict):
            raise ConfigError("schedules", "must be an object")
        sknown = {f.name for f in fields(ScheduleConfig)}
        for key in sched:
            if key not in sknown:
                raise ConfigError(f"schedules.{key}", "unknown field")
        data["schedules"] = ScheduleConfig(**sched)
        if "tracked_pairs" in data:
            pairs = data["tracked_pairs"]
            if not isinstance(pairs, list):
                raise ConfigError("tracked_pairs", "must be a list")
            data["tracked_pairs"] = [list(p) if isinstance(p, (list, tuple)) else p for p in pairs]
        return cls(**data)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config {path}: {exc}") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("$", f"invalid JSON: {exc}") from exc
        return cls.from_dict(data).validate(path.parent)


def _num(x):
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        return float("nan")
    return float(x)


def _positive_int(path, x, allow_zero=False):
    if isinstance(x, bool) or not isinstance(x, int) or x < (0 if allow_zero else 1):
        raise ConfigError(path, "must be a " + ("non-negative" if allow_zero else "positive") + " integer")


def _open_unit(path, x):
    if not 0.0 < _num(x) < 1.0:
        raise ConfigError(path, f"must lie in (0, 1), got {x!r}")
