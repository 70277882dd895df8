"""Declarative experiment configuration."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .grid import DEFAULT_CANDIDATES, MODEL_KINDS
from .mutation import INSERT_STRATEGIES, OVERFLOW_MODES, TRIGGERS
from .nn import NNConfig
from .training import DEFAULT_CUTOFFS, TrainConfig
from .workload import DEFAULT_EDGES, DEFAULT_SELECTIVITIES

SCALES = {
    "desk": {"max_entries": 200, "dataset": {"n": 100_000}, "queries_per_cell": 200},
    "paper": {"max_entries": 1000, "dataset": {"n": 872_127}, "queries_per_cell": 200},
}


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    source: str = "synthetic"
    n: int = 872_127
    clusters: int = 10
    spread: tuple[float, float] = (0.02, 0.08)
    path: str | None = None
    x_column: str = "x"
    y_column: str = "y"
    limit: int | None = None


@dataclass
class MutationConfig:
    script: str | None = None
    policies: tuple[str, ...] = ("in_place", "out_of_place")
    overflow_when: str = "full"
    chain_cap: int = 4
    retrain_trigger: str = "manual"
    fallback_limit: float = 0.2
    window: int = 1000


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    max_entries: int = 1000
    selectivities: tuple[float, ...] = DEFAULT_SELECTIVITIES
    alpha_buckets: tuple[float, ...] = DEFAULT_EDGES
    queries_per_cell: int = 200
    max_candidates: int = 600_000
    tau: float = 0.75
    split_ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    model_kinds: tuple[str, ...] = MODEL_KINDS
    grid_candidates: dict = field(default_factory=lambda: {k: [list(s) for s in v] for k, v in DEFAULT_CANDIDATES.items()})
    model_params: dict = field(default_factory=lambda: {k: dict(v) for k, v in TrainConfig().params.items()})
    router: dict = field(default_factory=lambda: dict(TrainConfig().router))
    cutoffs: tuple[float, ...] = DEFAULT_CUTOFFS
    target_recall: float = 0.9
    tune_router_cutoff: bool = True
    aggregation: str = "union"
    nn: dict = field(default_factory=lambda: {"hidden": [64, 64, 64], "learning_rate": 1e-3, "epochs": 30, "batch_size": 32,
                                              "full_support": False})
    mutation: MutationConfig = field(default_factory=MutationConfig)
    io_ms: float = 1.0
    oracle_predictor: bool = False
    seed: int = 0
    scale: str = "paper"

    def validate(self) -> "ExperimentConfig":
        ds = self.dataset
        if ds.source not in ("synthetic", "csv"):
            raise ConfigError("dataset.source must be synthetic or csv")
        if ds.source == "csv" and not ds.path:
            raise ConfigError("dataset.path is required for csv sources")
        if ds.source == "synthetic" and (ds.n < 1 or ds.clusters < 1):
            raise ConfigError("dataset.n and dataset.clusters must be positive")
        if self.max_entries < 2:
            raise ConfigError("max_entries must be at least 2")
        if not self.selectivities or any(not 0 < s < 1 for s in self.selectivities):
            raise ConfigError("selectivities must lie in (0, 1)")
        b = list(self.alpha_buckets)
        if not b or b != sorted(set(b)) or b[0] <= 0 or b[-1] != 1.0:
            raise ConfigError("alpha_buckets must be strictly increasing in (0, 1] and end at 1.0")
        if self.queries_per_cell < 1:
            raise ConfigError("queries_per_cell must be positive")
        if not 0 < self.tau < 1:
            raise ConfigError("tau must lie in (0, 1)")
        r = self.split_ratios
        if len(r) != 3 or any(x < 0 for x in r) or abs(sum(r) - 1) > 1e-9:
            raise ConfigError("split_ratios must be three non-negative numbers summing to 1")
        bad = set(self.model_kinds) - set(MODEL_KINDS)
        if bad or not self.model_kinds:
            raise ConfigError(f"model_kinds must be drawn from {MODEL_KINDS}")
        for kind, sizes in self.grid_candidates.items():
            if not sizes or any(len(s) != 2 or min(s) < 1 for s in sizes):
                raise ConfigError(f"grid_candidates[{kind}] must be a list of [rows, cols] with positive sizes")
        if any(not 0 < c <= 1 for c in self.cutoffs):
            raise ConfigError("cutoffs must lie in (0, 1]")
        if self.aggregation not in ("union", "vote"):
            raise ConfigError("aggregation must be union or vote")
        if self.io_ms < 0:
            raise ConfigError("io_ms must be non-negative")
        m = self.mutation
        if any(p not in INSERT_STRATEGIES for p in m.policies):
            raise ConfigError(f"mutation.policies must be drawn from {INSERT_STRATEGIES}")
        if m.overflow_when not in OVERFLOW_MODES or m.retrain_trigger not in TRIGGERS:
            raise ConfigError("bad mutation.overflow_when or mutation.retrain_trigger")
        try:
            self.nn_config()
        except TypeError as exc:
            raise ConfigError(f"bad nn settings: {exc}") from exc
        return self

    def nn_config(self) -> NNConfig:
        d = dict(self.nn)
        d["hidden"] = tuple(d.get("hidden", (64, 64, 64)))
        return NNConfig(seed=self.seed, **d)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            model_kinds=tuple(self.model_kinds),
            tau=self.tau,
            router=dict(self.router),
            params={k: dict(v) for k, v in self.model_params.items()},
            grid_candidates={k: [tuple(s) for s in v] for k, v in self.grid_candidates.items()},
            cutoff_candidates=tuple(self.cutoffs),
            target_recall=self.target_recall,
            tune_router_cutoff=self.tune_router_cutoff,
            aggregation=self.aggregation,
            nn=self.nn_config(),
            seed=self.seed,
        )

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def digest_text(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("grid_candidates", "model_params"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _build(cls, data: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")
    kw = {}
    for k, v in data.items():
        if k == "dataset":
            v = _build(DatasetConfig, v, "dataset")
        elif k == "mutation":
            v = _build(MutationConfig, v, "mutation")
        elif isinstance(v, list) and k not in ("grid_candidates",) and not isinstance(known[k].default, list):
            v = tuple(v)
        kw[k] = v
    return cls(**kw)


def make_config(overrides: dict | None = None, scale: str | None = None) -> ExperimentConfig:
    """Defaults, then the scale preset, then ``overrides``; validated.

    The bare dataclass defaults are paper scale; the preset defaults to desk.
    """
    overrides = dict(overrides or {})
    scale = scale or overrides.get("scale") or "desk"
    if scale not in SCALES:
        raise ConfigError(f"scale must be one of {sorted(SCALES)}")
    data = _merge(ExperimentConfig().to_dict(), SCALES[scale])
    data = _merge(data, overrides)
    data["scale"] = scale
    return _build(ExperimentConfig, data, "config").validate()


def load_config(path, scale: str | None = None, **overrides) -> ExperimentConfig:
    """Read a YAML or JSON config file (JSON is valid YAML)."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return make_config(data, scale)


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(cfg, **kw).validate()
