"""Posterior medians, 95% intervals and diagnostics for parameters and derived series."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..engine import yearly_indices
from .diagnostics import bulk_ess, split_rhat
from .mcmc import Samples

LEVELS = (0.025, 0.5, 0.975)


def interval(values, axis=0) -> np.ndarray:
    """Lower 2.5%, median and upper 97.5% quantiles (linear interpolation)."""
    return np.quantile(np.asarray(values, dtype=float), LEVELS, axis=axis)


def _stats(q, rhat, ess):
    return {"median": float(q[1]), "lo95": float(q[0]), "hi95": float(q[2]),
            "rhat": float(rhat), "ess": float(ess)}


def _safe_diag(chain_draws):
    """R-hat and ESS that tolerate too-short chains."""
    try:
        return split_rhat(chain_draws), bulk_ess(chain_draws)
    except ValueError:
        shape = chain_draws.shape[2:]
        return np.full(shape, np.nan), np.full(shape, np.nan)


@dataclass
class PosteriorSummary:
    parameters: dict[str, dict[str, float]]
    series: dict[str, dict] = field(default_factory=dict)
    diagnostics: dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"schema_version": 1, "diagnostics": self.diagnostics,
                "parameters": self.parameters, "series": self.series}


def summarize_draws(chain_draws, names) -> dict[str, dict[str, float]]:
    """Per-scalar summaries of draws shaped (chains, draws, k)."""
    chain_draws = np.asarray(chain_draws, dtype=float)
    flat = chain_draws.reshape(-1, chain_draws.shape[-1])
    q = interval(flat)
    r, e = _safe_diag(chain_draws)
    return {n: _stats(q[:, i], r[i], e[i]) for i, n in enumerate(names)}


def derived_series(posterior, x):
    """Yearly derived quantities at one parameter vector."""
    traj = posterior.project(x)
    idx = yearly_indices(traj.times)
    pi = posterior.seek(x).pi
    return {
        "rho": traj.rho[idx],
        "lambda": traj.lam[idx],
        "alpha": traj.alpha[idx],
        "art_facility": traj.art_count[idx] @ pi,
        "alpha_star": traj.alpha_star[idx],
        "pi": pi,
    }


def summarize(samples: Samples, posterior=None, series_thin: int = 1) -> PosteriorSummary:
    """Summaries for every scalar and, with a posterior, every yearly derived series.

    Derived series are computed by projecting every ``series_thin``-th
    retained draw of every chain.
    """
    if samples.n_chains < 2:
        raise ValueError("summaries need at least two chains")
    params = summarize_draws(samples.draws, samples.names)
    rhat = np.array([v["rhat"] for v in params.values()])
    diag = {
        "chains": int(samples.n_chains),
        "draws_per_chain": int(samples.draws.shape[1]),
        "steps_per_iteration": int(samples.steps),
        "acceptance": [float(a) for a in samples.acceptance],
        "warmup_acceptance": [float(a) for a in samples.warmup_acceptance],
        "rhat_max": float(np.nanmax(rhat)) if rhat.size else float("nan"),
        "rhat_below_1_1": float(np.mean(rhat < 1.1)) if rhat.size else float("nan"),
        "warnings": list(samples.warnings),
    }
    out = PosteriorSummary(params, {}, diag)
    if posterior is None:
        return out

    kept = samples.draws[:, ::series_thin]
    per = [[derived_series(posterior, x) for x in chain] for chain in kept]
    model = posterior.model
    years = [f"{t:.1f}" for t in model.grid[yearly_indices(model.grid)]]
    regions = list(model.graph.region_ids)
    series = {}
    for key in ("rho", "lambda", "alpha", "art_facility", "alpha_star", "pi"):
        arr = np.array([[d[key] for d in chain] for chain in per])  # (chains, draws, ...)
        q = interval(arr.reshape(-1, *arr.shape[2:]))
        r, e = _safe_diag(arr)
        if key == "pi":
            series[key] = {
                regions[a]: {regions[b]: _stats(q[:, a, b], r[a, b], e[a, b]) for b in range(len(regions))}
                for a in range(len(regions))}
        elif key == "alpha_star":
            series[key] = {
                regions[j]: {f"stage{c}": {y: _stats(q[:, t, j, c], r[t, j, c], e[t, j, c])
                                           for t, y in enumerate(years)}
                             for c in range(arr.shape[-1])}
                for j in range(len(regions))}
        else:
            series[key] = {regions[j]: {y: _stats(q[:, t, j], r[t, j], e[t, j]) for t, y in enumerate(years)}
                           for j in range(len(regions))}
    out.series = series
    return out
