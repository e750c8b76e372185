"""Synthetic scenarios with known parameters, and data simulated from them."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .engine import EpidemicModel, NaturalHistory, Trajectories, project, yearly_indices
from .graph import RegionGraph, build_graph
from .inference.params import ParameterLayout, ParameterVector, spline_whiten
from .inference.posterior import Posterior
from .observation import (
    BinomialData,
    CountData,
    ObservationSet,
    negbinom3_sample,
    recent_fraction,
    seek_model,
    seek_prior_mean,
)
from scipy.special import expit, logit

TOPOLOGIES = ("path", "grid", "complete", "custom")


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    """Ground-truth generator and observation design.

    Ranges are ``(low, high)`` pairs sampled uniformly. The default design
    mirrors a national setting: household surveys in 2004, 2010, 2015 and
    2016 (ART and recency assays in the last), two ANC sites per region
    reporting yearly, and quarterly facility counts from ART scale-up on.
    """

    region_count: int = 6
    topology: str = "path"
    edges: tuple[tuple[str, str], ...] = ()
    population_range: tuple[float, float] = (1.5e5, 6e5)
    entrant_rate: float = 0.035
    t0: float = 2000.0
    t_end: float = 2019.0
    h: float = 0.1
    w0: float = 0.9
    D: int = 2
    art_start: float = 2004.0
    # truth generator
    kappa_start_range: tuple[float, float] = (-1.6, -1.4)
    kappa_trend_range: tuple[float, float] = (-1.0, -0.7)
    sigma_kappa_range: tuple[float, float] = (0.15, 0.35)
    alpha_start_range: tuple[float, float] = (-2.8, -2.4)
    alpha_end_range: tuple[float, float] = (-0.9, -0.5)
    sigma_alpha_star_range: tuple[float, float] = (0.1, 0.25)
    rho0_range: tuple[float, float] = (0.06, 0.12)
    sigma_rho_range: tuple[float, float] = (0.2, 0.45)
    sigma_delta_range: tuple[float, float] = (0.2, 0.5)
    sigma_m_range: tuple[float, float] = (0.2, 0.5)
    omega_range: tuple[float, float] = (0.5, 2.0)
    theta_range: tuple[float, float] = (0.002, 0.008)
    # observation design
    survey_years: tuple[float, ...] = (2004.5, 2010.5, 2015.5, 2016.5)
    survey_size: int = 1500
    art_survey_years: tuple[float, ...] = (2016.5,)
    recency_years: tuple[float, ...] = (2016.5,)
    anc_sites_per_region: int = 2
    anc_years: tuple[float, ...] = tuple(2000.5 + k for k in range(19))
    anc_size: int = 300
    count_interval: float = 0.25
    seed: int = 20191205

    def __post_init__(self):
        if self.region_count < 1:
            raise ScenarioError("region_count must be positive")
        if self.topology not in TOPOLOGIES:
            raise ScenarioError(f"topology must be one of {TOPOLOGIES}")
        if self.topology == "grid" and math.isqrt(self.region_count) ** 2 != self.region_count:
            raise ScenarioError("grid topology needs a square region count")
        if min(self.survey_size, self.anc_size) <= 0 or self.anc_sites_per_region < 0:
            raise ScenarioError("sample sizes must be positive")
        for t in (*self.survey_years, *self.art_survey_years, *self.recency_years, *self.anc_years):
            if not self.t0 <= t <= self.t_end:
                raise ScenarioError(f"observation year {t} outside [{self.t0}, {self.t_end}]")

    @classmethod
    def from_dict(cls, d) -> "ScenarioSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ScenarioError(f"unknown scenario keys: {sorted(unknown)}")
        conv = {}
        for k, v in d.items():
            if isinstance(v, list):
                v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
            conv[k] = v
        return cls(**conv)


@dataclass
class Scenario:
    spec: ScenarioSpec
    graph: RegionGraph
    nh: NaturalHistory
    model: EpidemicModel
    truth: ParameterVector
    sites: tuple[str, ...]
    site_region: tuple[str, ...]

    def __iter__(self):
        yield from (self.graph, self.nh, self.truth)

    def posterior(self, obs: ObservationSet, backend=None) -> Posterior:
        return Posterior.build(self.model, obs, D=self.spec.D, sites=list(self.sites), backend=backend)


def region_names(n: int) -> list[str]:
    return [f"R{i + 1:02d}" for i in range(n)]


def scenario_edges(spec: ScenarioSpec) -> list[tuple[str, str]]:
    names = region_names(spec.region_count)
    n = spec.region_count
    if spec.topology == "path":
        return [(names[i], names[i + 1]) for i in range(n - 1)]
    if spec.topology == "complete":
        return [(names[i], names[j]) for i in range(n) for j in range(i + 1, n)]
    if spec.topology == "grid":
        s = math.isqrt(n)
        out = []
        for i in range(s):
            for j in range(s):
                k = i * s + j
                if j + 1 < s:
                    out.append((names[k], names[k + 1]))
                if i + 1 < s:
                    out.append((names[k], names[k + s]))
        return out
    return [tuple(e) for e in spec.edges]


def generate_scenario(spec: ScenarioSpec = ScenarioSpec(), nh: NaturalHistory | None = None,
                      model_options: dict | None = None) -> Scenario:
    """Draw a region graph and true parameters; deterministic in ``spec.seed``.

    ``model_options`` are extra keyword arguments for ``EpidemicModel.build``
    (spline settings, infection entry); grid, mixing and ART start come from
    ``spec``.
    """
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    names = region_names(spec.region_count)
    pops = {r: float(np.round(rng.uniform(*spec.population_range))) for r in names}
    graph = build_graph(scenario_edges(spec), pops, {r: spec.entrant_rate * p for r, p in pops.items()})
    nh = nh or NaturalHistory()
    model = EpidemicModel.build(graph, nh, **{**(model_options or {}), "t0": spec.t0, "t_end": spec.t_end,
                                              "h": spec.h, "w0": spec.w0, "alpha_zero_before": spec.art_start})
    sites = tuple(f"{r}_anc{k + 1}" for r in names for k in range(spec.anc_sites_per_region))
    site_region = tuple(r for r in names for _ in range(spec.anc_sites_per_region))
    layout = ParameterLayout(graph.n, len(sites), model.kappa_basis.width, model.alpha_basis.width,
                             model.art_era, graph.region_ids, sites)
    p = layout.zeros()
    R = graph.n

    def zdraw(*shape):
        return np.clip(rng.standard_normal(shape), -2.0, 2.0)

    Kk, Ka = layout.n_kappa, layout.n_alpha
    start, trend = rng.uniform(*spec.kappa_start_range), rng.uniform(*spec.kappa_trend_range)
    p.beta_kappa_0 = start + trend * np.linspace(0.0, 1.0, Kk) + rng.uniform(-0.1, 0.1, Kk)
    # smooth region deviations: a shared level plus small drift across knots
    dev = 0.8 * zdraw(R, 1) + 0.3 * zdraw(R, Kk)
    p.log_sigma_kappa = math.log(rng.uniform(*spec.sigma_kappa_range))
    p.z_kappa = spline_whiten(math.exp(p.log_sigma_kappa) * dev, p.log_sigma_kappa)
    a0, a1 = rng.uniform(*spec.alpha_start_range), rng.uniform(*spec.alpha_end_range)
    p.beta_alpha_0 = np.linspace(a0, a1, Ka) + rng.uniform(-0.1, 0.1, Ka)
    dev = 0.8 * zdraw(R, 1) + 0.3 * zdraw(R, Ka)
    p.log_sigma_alpha_star = math.log(rng.uniform(*spec.sigma_alpha_star_range))
    p.z_alpha = spline_whiten(math.exp(p.log_sigma_alpha_star) * dev, p.log_sigma_alpha_star)
    p.rho0 = float(logit(rng.uniform(*spec.rho0_range)))
    p.z_rho = zdraw(R)
    p.log_sigma_rho = math.log(rng.uniform(*spec.sigma_rho_range))
    p.z_delta = zdraw(len(sites))
    p.log_sigma_delta = math.log(rng.uniform(*spec.sigma_delta_range))
    p.z_m = zdraw(R)
    p.log_sigma_m = math.log(rng.uniform(*spec.sigma_m_range))
    p.log_omega_lin = math.log(rng.uniform(*spec.omega_range))
    p.log_theta_quad = math.log(rng.uniform(*spec.theta_range))
    if model.art_era:
        p.alpha0 = float(logit(0.2))
        p.z_alpha0 = zdraw(R)
        p.log_sigma_alpha = math.log(0.3)
    return Scenario(spec, graph, nh, model, p, sites, site_region)


def _times(spec: ScenarioSpec):
    t = np.arange(spec.art_start + spec.count_interval / 2, spec.t_end, spec.count_interval)
    return t[t <= spec.t_end]


def simulate_observations(traj: Trajectories, truth: ParameterVector, scenario: Scenario,
                          seed: int | None = None) -> ObservationSet:
    """Draw every observation source from the model-implied distributions."""
    spec = scenario.spec
    model = scenario.model
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed if seed is None else seed, 1]))
    rid = list(model.graph.region_ids)
    R = len(rid)
    rho, alpha = traj.rho, traj.alpha

    hiv_r, hiv_t, hiv_n, hiv_k, hiv_s = [], [], [], [], []
    positives = {}
    for yr in spec.survey_years:
        k = int(model.time_index(yr))
        for r in range(R):
            pos = int(rng.binomial(spec.survey_size, rho[k, r]))
            positives[(yr, r)] = pos
            hiv_r.append(rid[r]); hiv_t.append(yr); hiv_n.append(spec.survey_size)
            hiv_k.append(pos); hiv_s.append(f"survey{yr:.0f}")

    def among_positives(years, prob):
        out = ([], [], [], [], [])
        for yr in years:
            k = int(model.time_index(yr))
            for r in range(R):
                n = positives.get((yr, r))
                if n is None:
                    n = int(rng.binomial(spec.survey_size, rho[k, r]))
                if n == 0:
                    continue
                out[0].append(rid[r]); out[1].append(yr); out[2].append(n)
                out[3].append(int(rng.binomial(n, prob(k, r)))); out[4].append(f"survey{yr:.0f}")
        return BinomialData(*out)

    art = among_positives(spec.art_survey_years, lambda k, r: alpha[k, r])
    rec = among_positives(
        spec.recency_years,
        lambda k, r: recent_fraction(traj.lam[k, r], rho[k, r]) if rho[k, r] > 0 else 0.0)

    delta = truth.delta_s
    site_idx = {s: i for i, s in enumerate(scenario.sites)}
    anc = ([], [], [], [], [])
    for yr in spec.anc_years:
        k = int(model.time_index(yr))
        for s, r_id in zip(scenario.sites, scenario.site_region):
            r = model.graph.index(r_id)
            p = expit(logit(rho[k, r]) + delta[site_idx[s]]) if rho[k, r] > 0 else 0.0
            anc[0].append(r_id); anc[1].append(yr); anc[2].append(spec.anc_size)
            anc[3].append(int(rng.binomial(spec.anc_size, p))); anc[4].append(s)

    log_m = seek_prior_mean(model.graph, spec.D) + np.exp(truth.log_sigma_m) * truth.z_m
    pi = seek_model(log_m, model.graph, spec.D).pi
    omega, theta = math.exp(truth.log_omega_lin), math.exp(truth.log_theta_quad)
    c_r, c_t, c_x = [], [], []
    for t in _times(spec):
        k = int(model.time_index(t))
        astar = traj.art_count[k] @ pi
        for r in range(R):
            if astar[r] <= 0:
                continue
            c_r.append(rid[r]); c_t.append(round(float(t), 6))
            c_x.append(int(negbinom3_sample(rng, astar[r], omega, theta)))
    return ObservationSet(BinomialData(hiv_r, hiv_t, hiv_n, hiv_k, hiv_s), BinomialData(*anc),
                          art, rec, CountData(c_r, c_t, c_x))


def synthesize(spec: ScenarioSpec = ScenarioSpec(), nh: NaturalHistory | None = None,
               model_options: dict | None = None):
    """Scenario, true trajectories and simulated data in one call."""
    sc = generate_scenario(spec, nh, model_options)
    post = Posterior.build(sc.model, ObservationSet(), D=spec.D, sites=list(sc.sites))
    traj = project(post.coefficients(sc.truth.pack()), sc.model)
    obs = simulate_observations(traj, sc.truth, sc, spec.seed)
    return sc, traj, obs


def truth_document(sc: Scenario, traj: Trajectories) -> dict:
    """JSON-ready truth: parameters, spec and yearly true trajectories."""
    model = sc.model
    log_m = seek_prior_mean(model.graph, sc.spec.D) + np.exp(sc.truth.log_sigma_m) * sc.truth.z_m
    pi = seek_model(log_m, model.graph, sc.spec.D).pi
    yearly = yearly_indices(model.grid)
    series = {}
    for name, arr in (("rho", traj.rho), ("alpha", traj.alpha), ("lambda", traj.lam),
                      ("art_resident", traj.art_count), ("art_facility", traj.art_count @ pi),
                      ("N", traj.N)):
        series[name] = {r: arr[yearly, i].tolist() for i, r in enumerate(model.graph.region_ids)}
    return {
        "schema_version": 1,
        "spec": asdict(sc.spec),
        "parameters": sc.truth.named(),
        "natural_history": sc.nh.to_dict(),
        "sites": {s: r for s, r in zip(sc.sites, sc.site_region)},
        "years": model.grid[yearly].round(6).tolist(),
        "series": series,
    }


def write_truth(path: str | Path, sc: Scenario, traj: Trajectories) -> None:
    Path(path).write_text(json.dumps(truth_document(sc, traj), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")
