"""Run configuration: a YAML key/value tree with strict key checking.

Reference of every key and its default::

    data:
      adjacency: null          # adjacency.csv (region_a,region_b)
      population: null         # population.csv (region_id,population_t0,entrants_per_year)
      surveys: null            # surveys.csv
      anc: null                # anc.csv
      art_counts: null         # art_counts.csv
      parameters: null         # JSON parameter file for `simulate`
      sites: null              # optional explicit ANC site order (list)
    grid: {t0: 2000.0, t_end: 2019.0, h: 0.1}
    kappa_spline: {order: 3, knot_interval_years: 5.0}
    alpha_spline: {order: 1, knot_interval_years: 1.0, zero_before: 2004.0}
    mixing: {w0: 0.9}
    seek: {D: 2}
    infection_entry: highest_stage   # or per_stage_literal
    omega_art: 0.9                   # placeholder ART infectiousness reduction
    natural_history: {}              # overrides of the placeholder rate tables
    inference: {chains: 4, iters: 2000, warmup: 1000, steps: null, seed: null,
                workers: 1, gtol: 1.0e-5, max_iter: 500, series_thin: 1}
    scenario: {}                     # synthetic scenario overrides (see ScenarioSpec)
    out: null

Relative paths are resolved against the directory of the config file.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .engine import ENTRY_MODES, EpidemicModel, NaturalHistory
from .graph import read_graph_csv
from .synthetic import ScenarioSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    adjacency: Path | None = None
    population: Path | None = None
    surveys: Path | None = None
    anc: Path | None = None
    art_counts: Path | None = None
    parameters: Path | None = None
    sites: tuple[str, ...] | None = None


@dataclass(frozen=True)
class GridConfig:
    t0: float = 2000.0
    t_end: float = 2019.0
    h: float = 0.1


@dataclass(frozen=True)
class SplineConfig:
    order: int = 3
    knot_interval_years: float = 5.0
    zero_before: float | None = None


@dataclass(frozen=True)
class InferenceConfig:
    chains: int = 4
    iters: int = 2000
    warmup: int = 1000
    steps: int | None = None
    seed: int | None = None
    workers: int = 1
    gtol: float = 1e-5
    max_iter: int = 500
    series_thin: int = 1


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = DataConfig()
    grid: GridConfig = GridConfig()
    kappa_spline: SplineConfig = SplineConfig(3, 5.0, None)
    alpha_spline: SplineConfig = SplineConfig(1, 1.0, 2004.0)
    w0: float = 0.9
    D: int = 2
    infection_entry: str = "highest_stage"
    omega_art: float = 0.9
    natural_history: dict[str, Any] = field(default_factory=dict)
    inference: InferenceConfig = InferenceConfig()
    scenario: dict[str, Any] = field(default_factory=dict)
    out: Path | None = None

    def __post_init__(self):
        g = self.grid
        if not (g.h > 0 and g.t_end > g.t0):
            raise ConfigError("grid needs h > 0 and t_end > t0")
        for name, s in (("kappa_spline", self.kappa_spline), ("alpha_spline", self.alpha_spline)):
            if s.order < 1 or s.knot_interval_years <= 0:
                raise ConfigError(f"{name}: order must be >= 1 and knot_interval_years > 0")
        if not 0.0 <= self.w0 <= 1.0:
            raise ConfigError("mixing.w0 must lie in [0, 1]")
        if self.D < 0:
            raise ConfigError("seek.D must be non-negative")
        if self.infection_entry not in ENTRY_MODES:
            raise ConfigError(f"infection_entry must be one of {ENTRY_MODES}")
        if not 0.0 <= self.omega_art <= 1.0:
            raise ConfigError("omega_art must lie in [0, 1]")
        i = self.inference
        if i.chains < 1 or i.iters < 1 or not 0 <= i.warmup < i.iters:
            raise ConfigError("inference: need chains >= 1 and 0 <= warmup < iters")
        if (i.steps is not None and i.steps < 1) or i.workers < 1 or i.series_thin < 1:
            raise ConfigError("inference: steps, workers and series_thin must be positive")
        if i.seed is not None and not 0 <= i.seed < 2 ** 64:
            raise ConfigError("inference.seed must be an unsigned 64-bit integer")
        try:
            self.nh()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"natural_history: {exc}") from exc

    def nh(self) -> NaturalHistory:
        d = dict(self.natural_history)
        d.setdefault("omega_art", self.omega_art)
        return NaturalHistory.from_dict(d)

    def scenario_spec(self, seed: int | None = None) -> ScenarioSpec:
        d = {"t0": self.grid.t0, "t_end": self.grid.t_end, "h": self.grid.h, "w0": self.w0, "D": self.D,
             "art_start": self.alpha_spline.zero_before or self.grid.t0}
        # default design years outside a shortened grid are dropped
        for key in ("survey_years", "art_survey_years", "recency_years", "anc_years"):
            if key not in self.scenario:
                years = ScenarioSpec.__dataclass_fields__[key].default
                d[key] = tuple(t for t in years if self.grid.t0 <= t <= self.grid.t_end)
        d.update(self.scenario)
        if seed is not None:
            d["seed"] = seed
        try:
            return ScenarioSpec.from_dict(d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"scenario: {exc}") from exc

    def model_options(self) -> dict[str, Any]:
        """Spline and infection-entry keywords for ``EpidemicModel.build``."""
        return {"kappa_order": self.kappa_spline.order,
                "kappa_knot_interval": self.kappa_spline.knot_interval_years,
                "alpha_order": self.alpha_spline.order,
                "alpha_knot_interval": self.alpha_spline.knot_interval_years,
                "infection_entry": self.infection_entry}

    def build_model(self, graph=None) -> EpidemicModel:
        if graph is None:
            if self.data.adjacency is None or self.data.population is None:
                raise ConfigError("data.adjacency and data.population are required")
            graph = read_graph_csv(self.data.adjacency, self.data.population)
        return EpidemicModel.build(
            graph, self.nh(), t0=self.grid.t0, t_end=self.grid.t_end, h=self.grid.h, w0=self.w0,
            alpha_zero_before=self.alpha_spline.zero_before, **self.model_options())


def _strict(cls, d, where):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


_TOP = {"data", "grid", "kappa_spline", "alpha_spline", "mixing", "seek", "infection_entry",
        "omega_art", "natural_history", "inference", "scenario", "out"}


def parse_config(tree: dict | None, base: Path | None = None) -> RunConfig:
    """Validate a parsed YAML tree and resolve paths against ``base``."""
    tree = tree or {}
    if not isinstance(tree, dict):
        raise ConfigError("config root must be a mapping")
    unknown = set(tree) - _TOP
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    base = base or Path.cwd()

    def path(v):
        if v is None:
            return None
        p = Path(v)
        return p if p.is_absolute() else base / p

    data = _strict(DataConfig, tree.get("data"), "data")
    data = replace(data, **{f.name: path(getattr(data, f.name)) for f in fields(DataConfig) if f.name != "sites"})
    if data.sites is not None:
        data = replace(data, sites=tuple(str(s) for s in data.sites))
    for f in fields(DataConfig):
        p = getattr(data, f.name)
        if isinstance(p, Path) and not p.exists():
            raise ConfigError(f"data.{f.name}: file not found: {p}")

    mixing = tree.get("mixing") or {}
    seek = tree.get("seek") or {}
    if set(mixing) - {"w0"} or set(seek) - {"D"}:
        raise ConfigError("mixing accepts only w0 and seek accepts only D")
    kap = _strict(SplineConfig, tree.get("kappa_spline"), "kappa_spline")
    alp = tree.get("alpha_spline") or {}
    alp = _strict(SplineConfig, {"order": 1, "knot_interval_years": 1.0, "zero_before": 2004.0, **alp},
                  "alpha_spline")
    for key in ("natural_history", "scenario"):
        if tree.get(key) is not None and not isinstance(tree[key], dict):
            raise ConfigError(f"{key} must be a mapping")
    try:
        return RunConfig(
            data=data, grid=_strict(GridConfig, tree.get("grid"), "grid"), kappa_spline=kap, alpha_spline=alp,
            w0=float(mixing.get("w0", 0.9)), D=int(seek.get("D", 2)),
            infection_entry=tree.get("infection_entry", "highest_stage"),
            omega_art=float(tree.get("omega_art", 0.9)),
            natural_history=dict(tree.get("natural_history") or {}),
            inference=_strict(InferenceConfig, tree.get("inference"), "inference"),
            scenario=dict(tree.get("scenario") or {}), out=path(tree.get("out")))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None) -> RunConfig:
    """Read a YAML config file; ``None`` gives all defaults."""
    if path is None:
        return parse_config({})
    path = Path(path)
    try:
        tree = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    return parse_config(tree, path.parent)
