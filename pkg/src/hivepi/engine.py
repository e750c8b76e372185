"""Spatial compartmental HIV model projected by forward Euler.

Compartments per region are susceptibles ``S``, untreated PLHIV ``I[c]`` by
current CD4 stage and treated PLHIV ``A[c]`` by CD4 stage at initiation.
Stage index 0 is CD4 < 200 and stage 3 is CD4 >= 500. Untreated PLHIV
progress from stage ``c`` to ``c - 1`` at rate ``tau[c]``; treated PLHIV keep
their stage at initiation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from typing import Any, Mapping

import numpy as np
from scipy.special import expit

from . import _pykernel, kernels
from .graph import RegionGraph, mixing_weights
from .splines import BasisMatrix, BasisSpec, make_basis

log = logging.getLogger(__name__)

NSTAGE = 4
STAGE_LABELS = ("cd4_lt200", "cd4_200_350", "cd4_350_500", "cd4_ge500")
ENTRY_MODES = ("highest_stage", "per_stage_literal")


class ProjectionError(RuntimeError):
    """The projection produced a non-finite state."""

    def __init__(self, index: int, time: float | None = None):
        self.index = index
        self.time = time
        where = f"grid index {index}" + (f" (t={time:.3f})" if time is not None else "")
        super().__init__(f"non-finite epidemic state at {where}")


def _vec(x, n=NSTAGE):
    a = np.asarray(x, dtype=float).reshape(-1)
    if a.shape != (n,):
        raise ValueError(f"expected {n} values, got {a.shape[0]}")
    return a


@dataclass(frozen=True)
class NaturalHistory:
    """Fixed natural-history and treatment rates (per person-year).

    The defaults are placeholders of plausible magnitude, not calibrated
    values; supply real rate tables through configuration.
    """

    mu_S: float = 0.02
    mu_I: np.ndarray = field(default_factory=lambda: np.array([0.30, 0.06, 0.03, 0.015]))
    mu_A: np.ndarray = field(default_factory=lambda: np.array([0.06, 0.025, 0.015, 0.01]))
    eta: float = 0.03
    tau: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.25, 0.33, 0.33]))
    xi: np.ndarray = field(default_factory=lambda: np.array([1.5, 1.0, 0.9, 0.8]))
    zeta: np.ndarray = field(default_factory=lambda: np.ones(NSTAGE))
    omega_art: float = 0.9
    b_rho: np.ndarray = field(default_factory=lambda: np.array([0.10, 0.20, 0.30, 0.40]))
    b_alpha: np.ndarray = field(default_factory=lambda: np.array([0.40, 0.30, 0.20, 0.10]))
    eligible: np.ndarray = field(default_factory=lambda: np.ones(NSTAGE, dtype=bool))

    def __post_init__(self):
        for name in ("mu_I", "mu_A", "tau", "xi", "zeta", "b_rho", "b_alpha"):
            object.__setattr__(self, name, _vec(getattr(self, name)))
        object.__setattr__(self, "eligible", np.asarray(self.eligible, dtype=bool).reshape(-1))
        if self.eligible.shape != (NSTAGE,):
            raise ValueError("eligible needs one flag per stage")
        rates = [self.mu_S, self.eta, *self.mu_I, *self.mu_A, *self.tau, *self.xi, *self.zeta]
        if not all(np.isfinite(rates)) or min(rates) < 0:
            raise ValueError("natural-history rates must be finite and nonnegative")
        if self.tau[0] != 0.0:
            raise ValueError("tau[0] must be 0: the lowest CD4 stage cannot progress")
        if not 0.0 <= self.omega_art <= 1.0:
            raise ValueError("omega_art must lie in [0, 1]")
        for name in ("b_rho", "b_alpha"):
            b = getattr(self, name)
            if np.any(b < 0) or abs(b.sum() - 1.0) > 1e-9:
                raise ValueError(f"{name} must be nonnegative shares summing to 1")

    @property
    def zeta_eligible(self) -> np.ndarray:
        return self.zeta * self.eligible

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "NaturalHistory":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown natural_history keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.tolist() if isinstance(v, np.ndarray) else v
        return out


@dataclass
class EpidemicState:
    S: np.ndarray  # (R,)
    I: np.ndarray  # (R, 4)
    A: np.ndarray  # (R, 4)

    @property
    def N(self) -> np.ndarray:
        return self.S + self.I.sum(axis=1) + self.A.sum(axis=1)

    def to_array(self) -> np.ndarray:
        return np.column_stack([self.S, self.I, self.A])

    @classmethod
    def from_array(cls, X) -> "EpidemicState":
        X = np.asarray(X, dtype=float)
        return cls(X[:, 0].copy(), X[:, 1:5].copy(), X[:, 5:9].copy())


@dataclass(frozen=True)
class EpidemicModel:
    """Everything fixed during inference: graph, rates, grid, bases, mixing."""

    graph: RegionGraph
    nh: NaturalHistory
    grid: np.ndarray
    h: float
    kappa_basis: BasisMatrix
    alpha_basis: BasisMatrix
    W: np.ndarray
    infection_entry: str = "highest_stage"

    @classmethod
    def build(cls, graph: RegionGraph, nh: NaturalHistory | None = None, *,
              t0: float = 2000.0, t_end: float = 2019.0, h: float = 0.1, w0: float = 0.9,
              kappa_order: int = 3, kappa_knot_interval: float = 5.0,
              alpha_order: int = 1, alpha_knot_interval: float = 1.0,
              alpha_zero_before: float | None = 2004.0,
              infection_entry: str = "highest_stage") -> "EpidemicModel":
        if infection_entry not in ENTRY_MODES:
            raise ValueError(f"infection_entry must be one of {ENTRY_MODES}")
        grid = make_grid(t0, t_end, h)
        kb = make_basis(BasisSpec(kappa_order, kappa_knot_interval, t0, t_end), grid)
        ab = make_basis(BasisSpec(alpha_order, alpha_knot_interval, t0, t_end,
                                  alpha_zero_before), grid)
        return cls(graph, nh or NaturalHistory(), grid, float(h), kb, ab,
                   mixing_weights(graph, w0), infection_entry)

    @property
    def n_regions(self) -> int:
        return self.graph.n

    @property
    def art_era(self) -> bool:
        """True when the projection starts after ART scale-up."""
        zb = self.alpha_basis.spec.zero_before
        return zb is None or self.grid[0] >= zb

    @property
    def literal(self) -> bool:
        return self.infection_entry == "per_stage_literal"

    def time_index(self, t) -> np.ndarray:
        """Nearest grid index for decimal year(s) ``t``; raises when off-grid."""
        t = np.asarray(t, dtype=float)
        idx = np.rint((t - self.grid[0]) / self.h).astype(np.int64)
        if np.any(idx < 0) or np.any(idx >= len(self.grid)):
            raise ValueError("observation time outside the simulation grid")
        return idx


def make_grid(t0: float, t_end: float, h: float) -> np.ndarray:
    if h <= 0:
        raise ValueError("step h must be positive")
    n = int(round((t_end - t0) / h))
    if n < 1:
        raise ValueError("grid needs at least one step")
    return t0 + h * np.arange(n + 1)


def yearly_indices(grid) -> np.ndarray:
    """Grid indices that fall on whole years after the grid start."""
    off = np.asarray(grid) - grid[0]
    return np.flatnonzero(np.abs(off - np.round(off)) < 1e-6)


@dataclass(frozen=True)
class EpidemicCoefficients:
    """Inputs to a projection on the natural scale of the rate models."""

    kappa_coef: np.ndarray  # (R, Kk) = beta_0 + beta_r
    alpha_coef: np.ndarray  # (R, Ka)
    rho_logit: np.ndarray  # (R,)
    alpha_logit: np.ndarray | None = None  # (R,), only after ART scale-up


@dataclass
class Trajectories:
    """Projected series, time-major: every array is (T, R) unless noted."""

    times: np.ndarray
    region_ids: tuple[str, ...]
    states: np.ndarray  # (T, R, 9)
    lam: np.ndarray
    K: np.ndarray  # transmission multiplier; kappa = xi[c] * K
    Astar: np.ndarray  # ART initiation multiplier; alpha_star = zeta_e[c] * Astar
    xi: np.ndarray
    zeta_e: np.ndarray
    clamped: np.ndarray
    shortfall: float

    @property
    def N(self):
        return self.states.sum(axis=2)

    @property
    def plhiv(self):
        return self.states[:, :, 1:].sum(axis=2)

    @property
    def art_count(self):
        return self.states[:, :, 5:].sum(axis=2)

    @property
    def rho(self):
        return self.plhiv / self.N

    @property
    def alpha(self):
        plhiv = self.plhiv
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(plhiv > 0, self.art_count / plhiv, 0.0)

    @property
    def kappa(self):
        """(T, R, 4) transmission rate by stage."""
        return self.K[:, :, None] * self.xi[None, None, :]

    @property
    def alpha_star(self):
        """(T, R, 4) ART initiation rate by stage."""
        return self.Astar[:, :, None] * self.zeta_e[None, None, :]

    @property
    def n_clamped(self) -> int:
        return int(self.clamped.sum())


def initial_state(rho0: float, rho_dev, alpha0: float, alpha_dev, nh: NaturalHistory,
                  g: RegionGraph, art_era: bool) -> EpidemicState:
    """Initial compartments from logit-linear prevalence and ART coverage."""
    rho = expit(rho0 + np.asarray(rho_dev, dtype=float))
    alpha = expit(alpha0 + np.asarray(alpha_dev, dtype=float)) if art_era else np.zeros(g.n)
    return _state_from_shares(rho, alpha, nh, g.base_population)


def _state_from_shares(rho, alpha, nh, P):
    rho = np.broadcast_to(rho, P.shape)
    alpha = np.broadcast_to(alpha, P.shape)
    I = nh.b_rho[None, :] * ((1.0 - alpha) * rho * P)[:, None]
    A = nh.b_alpha[None, :] * (alpha * rho * P)[:, None]
    S = P - I.sum(axis=1) - A.sum(axis=1)
    return EpidemicState(S, I, A)


def _log_rate(beta0, beta_r, basis: BasisMatrix) -> np.ndarray:
    beta0 = np.asarray(beta0, dtype=float)
    beta_r = np.atleast_2d(np.asarray(beta_r, dtype=float))
    if beta0.shape != (basis.width,) or beta_r.shape[1] != basis.width:
        raise ValueError(f"coefficient count must match basis width {basis.width}")
    return _basis_series(basis, beta0[None, :] + beta_r)


def _basis_series(basis: BasisMatrix, coef) -> np.ndarray:
    """``sum_i coef[r, i] phi_i(t)`` as (T, R), summing only the nonzero basis values.

    The explicit reduction keeps each region's series bit-identical however
    many regions share the call; BLAS picks different kernels by shape.
    """
    idx, val = basis.support
    return (np.asarray(coef, dtype=float).T[idx] * val[:, :, None]).sum(axis=1)


def transmission_rate(beta0, beta_r, basis: BasisMatrix, xi) -> np.ndarray:
    """kappa (T, R, 4): ``log kappa = log xi_c + sum_i (beta_i0 + beta_ir) phi_i(t)``."""
    return np.exp(_log_rate(beta0, beta_r, basis))[:, :, None] * _vec(xi)[None, None, :]


def art_initiation_rate(beta0, beta_r, basis: BasisMatrix, zeta, eligible) -> np.ndarray:
    """alpha_star (T, R, 4); zero for ineligible stages and masked times."""
    mult = np.exp(_log_rate(beta0, beta_r, basis)) * basis.active[:, None]
    ze = _vec(zeta) * np.asarray(eligible, dtype=bool)
    return mult[:, :, None] * ze[None, None, :]


def stage_force(state: EpidemicState, kappa, W, omega_art: float) -> np.ndarray:
    """Per-stage force of infection (R, 4) for one time point.

    ``kappa`` is (R, 4). Each region's stage prevalence is ART-adjusted
    (treated PLHIV count with weight ``1 - omega_art``) and mixed with its
    neighbours' through ``W``.
    """
    X = state.to_array()
    N = X.sum(axis=1)
    y = (X[:, 1:5] + (1.0 - omega_art) * X[:, 5:9]) / N[:, None]
    return np.asarray(kappa, dtype=float) * (np.asarray(W) @ y)


def total_incidence(lambda_stage, h: float) -> tuple[np.ndarray, np.ndarray]:
    """Total incidence per region and its per-step infection probability."""
    if h <= 0:
        raise ValueError("h must be positive")
    lam = np.asarray(lambda_stage, dtype=float).sum(axis=-1)
    return lam, -np.expm1(-h * lam)


def euler_step(state: EpidemicState, lambda_stage, alpha_star, nh: NaturalHistory,
               entrants, h: float, infection_entry: str = "highest_stage") -> EpidemicState:
    """Advance ``state`` by one forward-Euler step of length ``h`` years.

    ``lambda_stage`` and ``alpha_star`` are (R, 4). New infections enter the
    highest-CD4 stage unless ``infection_entry == "per_stage_literal"``, in
    which case stage ``c`` receives ``lambda_stage[:, c] * S``. Negative
    compartments are clamped to 0 and the shortfall logged.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if infection_entry not in ENTRY_MODES:
        raise ValueError(f"infection_entry must be one of {ENTRY_MODES}")
    X = state.to_array()
    nxt = _pykernel.step(X, np.asarray(lambda_stage, dtype=float), np.asarray(alpha_star, dtype=float),
                         nh.mu_S, nh.mu_I, nh.mu_A, nh.eta, nh.tau,
                         np.asarray(entrants, dtype=float), h, infection_entry == "per_stage_literal")
    if not np.isfinite(nxt).all():
        raise ProjectionError(-1)
    neg = nxt < 0
    if neg.any():
        log.warning("clamped %d negative compartments (shortfall %.3g persons)",
                    int(neg.sum()), float(-nxt[neg].sum()))
        nxt[neg] = 0.0
    return EpidemicState.from_array(nxt)


def rate_multipliers(coef: EpidemicCoefficients, model: EpidemicModel):
    """Per-region transmission and ART-initiation multipliers on the grid (T, R)."""
    K = np.exp(_basis_series(model.kappa_basis, coef.kappa_coef))
    Astar = np.exp(_basis_series(model.alpha_basis, coef.alpha_coef))
    Astar *= model.alpha_basis.active[:, None]
    return K, Astar


def initial_array(coef: EpidemicCoefficients, model: EpidemicModel) -> np.ndarray:
    rho = expit(coef.rho_logit)
    if model.art_era and coef.alpha_logit is not None:
        alpha = expit(coef.alpha_logit)
    else:
        alpha = np.zeros(model.n_regions)
    return _state_from_shares(rho, alpha, model.nh, model.graph.base_population).to_array()


def project(coef: EpidemicCoefficients, model: EpidemicModel, backend: str | None = None) -> Trajectories:
    """Project the epidemic over ``model.grid``.

    Raises:
        ProjectionError: with the first grid index whose state is not finite.
    """
    nh = model.nh
    K, Astar = rate_multipliers(coef, model)
    x0 = initial_array(coef, model)
    kern = kernels.get(backend)
    X, lam, clamped, shortfall, bad = kern.forward(
        x0, K, Astar, model.W, nh.xi, nh.zeta_eligible, nh.mu_S, nh.mu_I, nh.mu_A,
        nh.eta, nh.tau, nh.omega_art, model.graph.entrants, model.h, model.literal)
    if bad >= 0:
        raise ProjectionError(bad, float(model.grid[bad]))
    if shortfall > 0:
        log.debug("projection clamped %d compartments (shortfall %.3g)", int(clamped.sum()), shortfall)
    return Trajectories(model.grid, model.graph.region_ids, X, lam, K, Astar,
                        nh.xi, nh.zeta_eligible, clamped, float(shortfall))


@dataclass
class CoefficientGradient:
    kappa_coef: np.ndarray
    alpha_coef: np.ndarray
    rho_logit: np.ndarray
    alpha_logit: np.ndarray


def project_adjoint(traj: Trajectories, coef: EpidemicCoefficients, model: EpidemicModel,
                    g_states, g_lam, backend: str | None = None) -> CoefficientGradient:
    """Pull state/incidence sensitivities back onto the projection inputs.

    ``g_states`` (T, R, 9) and ``g_lam`` (T, R) are derivatives of a scalar
    objective with respect to ``traj.states`` and ``traj.lam``.
    """
    nh = model.nh
    kern = kernels.get(backend)
    g0, gK, gA = kern.backward(
        traj.states, traj.clamped, traj.K, traj.Astar, model.W, nh.xi, nh.zeta_eligible,
        nh.mu_S, nh.mu_I, nh.mu_A, nh.eta, nh.tau, nh.omega_art, model.h, model.literal,
        np.ascontiguousarray(g_states), np.ascontiguousarray(g_lam))
    g_kappa = (gK * traj.K).T @ model.kappa_basis.values
    g_alpha = (gA * traj.Astar).T @ model.alpha_basis.values

    P = model.graph.base_population
    rho = expit(coef.rho_logit)
    art = model.art_era and coef.alpha_logit is not None
    alpha = expit(coef.alpha_logit) if art else np.zeros_like(rho)
    gS, gI, gAc = g0[:, 0], g0[:, 1:5], g0[:, 5:9]
    d_rho = (-P * gS + (gI @ nh.b_rho) * (1 - alpha) * P + (gAc @ nh.b_alpha) * alpha * P)
    g_rho_logit = d_rho * rho * (1 - rho)
    if art:
        d_alpha = (-(gI @ nh.b_rho) + gAc @ nh.b_alpha) * rho * P
        g_alpha_logit = d_alpha * alpha * (1 - alpha)
    else:
        g_alpha_logit = np.zeros_like(rho)
    return CoefficientGradient(g_kappa, g_alpha, g_rho_logit, g_alpha_logit)
