"""Observation model: survey, ANC, ART-coverage, recency and facility-count data.

Every likelihood returns, next to its value, the sensitivities needed by
the projection adjoint so the full posterior gradient is analytic.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import digamma, expit, gammaln, logit, xlog1py, xlogy

from .engine import EpidemicModel, Trajectories
from .graph import RegionGraph, close_mask

log = logging.getLogger(__name__)

RECENCY_WINDOW = 130.0 / 365.0  # mean duration of recent infection, years
FALSE_RECENT = 0.0
OUTSIDE_SHARE = 0.05  # expected share of patients treated outside their home region
SCHEMA_LINE = "# schema_version: 1"


class ObservationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# distributions


def negbinom3_params(mu, omega, theta):
    """``(r, p)`` of the negative binomial with variance mu + omega mu + theta mu^2."""
    mu = np.asarray(mu, dtype=float)
    var = mu + omega * mu + theta * mu * mu
    excess = var - mu
    if np.any(excess <= 0):
        raise ValueError("negbinom3 needs variance above the mean (omega, theta > 0)")
    return mu * mu / excess, mu / var


def negbinom3_logpmf(x, mu, omega: float, theta: float):
    """Log pmf of the three-parameter negative binomial.

    Evaluated with log-gamma, so large counts do not overflow.
    """
    x = np.asarray(x, dtype=float)
    negbinom3_params(mu, omega, theta)  # validates
    out = _nb3_core(x, np.asarray(mu, dtype=float), omega, theta)
    return out if out.ndim else float(out)


def negbinom3_sample(rng: np.random.Generator, mu, omega: float, theta: float, size=None):
    r, p = negbinom3_params(mu, omega, theta)
    return rng.negative_binomial(r, p, size=size)


_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def _stirling_rest(z):
    """``lgamma(z) - ((z - 1/2) log z - z + log sqrt(2 pi))``, to 1e-17 for ``z >= 40``."""
    w = 1.0 / (z * z)
    return (1.0 / 12.0 - w * (1.0 / 360.0 - w * (1.0 / 1260.0 - w / 1680.0))) / z


def _nb3_core(x, mu, omega, theta):
    """Log pmf with ``s = omega + theta mu``, ``r = mu / s`` and ``p = 1 / (1 + s)``.

    For large ``r`` (the near-Poisson regime) ``lgamma(x + r) - lgamma(r)``
    is expanded around ``r`` so that its ``x log r`` part cancels against
    ``x log s`` analytically; the direct difference loses ~1e-7 there. When
    ``x`` is large too, ``lgamma(x + 1)`` is expanded as well and the
    remaining terms are written in ``x - mu``: otherwise terms of size
    ``x log x`` cancel and leave rounding noise of ~1e-10 per record.
    """
    x = np.asarray(x, dtype=float)
    s = omega + theta * mu
    r = mu / s
    l1s = np.log1p(s)
    big = r >= 40.0
    if not np.any(big):
        return gammaln(x + r) - gammaln(x + 1.0) - gammaln(r) + xlogy(x, s) - (r + x) * l1s
    large_x = x >= 40.0
    if np.all(big & large_x):
        return _nb3_large(x, mu, r)
    rb = np.where(big, r, 40.0)
    near_poisson = (xlogy(x, mu) - gammaln(x + 1.0) - x + (rb + x - 0.5) * np.log1p(x / rb)
                    + _stirling_rest(rb + x) - _stirling_rest(rb)) - (rb + x) * l1s
    xb = np.where(x >= 40.0, x, 40.0)
    large = _nb3_large(xb, mu, rb)
    direct = gammaln(x + r) - gammaln(x + 1.0) - gammaln(r) + xlogy(x, s) - (r + x) * l1s
    return np.where(big, np.where(large_x, large, near_poisson), direct)


def _nb3_large(x, mu, r):
    """Log pmf for ``x >= 40`` and ``r >= 40``, written in ``x - mu``."""
    d = x - mu
    return (-x * np.log1p(d / mu) + (x + r) * np.log1p(d / (r + mu))
            - 0.5 * (np.log(x) + np.log1p(x / r)) - _LOG_SQRT_2PI
            - _stirling_rest(x) + _stirling_rest(r + x) - _stirling_rest(r))


def _nb3_grad(x, mu, omega, theta):
    """Log pmf and its partials with respect to mu, omega and theta."""
    s = omega + theta * mu
    r = mu / s
    p = 1.0 / (1.0 + s)
    lp = _nb3_core(x, mu, omega, theta)
    dr = digamma(x + r) - digamma(r) - np.log1p(s)
    dp = r / p - x / (1.0 - p)
    s2 = s * s
    d_mu = dr * omega / s2 + dp * (-theta * p * p)
    d_omega = dr * (-mu / s2) + dp * (-p * p)
    d_theta = dr * (-mu * mu / s2) + dp * (-mu * p * p)
    return lp, d_mu, d_omega, d_theta


def binom_logpmf(k, n, p):
    k = np.asarray(k, dtype=float)
    n = np.asarray(n, dtype=float)
    p = np.asarray(p, dtype=float)
    return _log_choose(n, k) + xlogy(k, p) + xlog1py(n - k, -p)


def _log_choose(n, k):
    return gammaln(n + 1.0) - gammaln(k + 1.0) - gammaln(n - k + 1.0)


def _binom_dp(k, n, p):
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(k > 0, k / p, 0.0)
        b = np.where(n - k > 0, (n - k) / (1.0 - p), 0.0)
    return a - b


# ---------------------------------------------------------------------------
# derived probabilities


def anc_site_prevalence(rho, delta_s):
    """Clinic prevalence: shift population prevalence by ``delta_s`` on the logit scale."""
    rho = np.asarray(rho, dtype=float)
    if np.any((rho <= 0) | (rho >= 1)):
        raise ValueError("prevalence must lie strictly inside (0, 1)")
    out = expit(logit(rho) + np.asarray(delta_s, dtype=float))
    return out if out.ndim else float(out)


def recent_fraction(lam, rho, window: float = RECENCY_WINDOW, false_recent: float = FALSE_RECENT):
    """Expected share of PLHIV classified recent, clamped to [0, 1]."""
    lam = np.asarray(lam, dtype=float)
    rho = np.asarray(rho, dtype=float)
    if np.any(rho <= 0):
        raise ValueError("recent fraction undefined at zero prevalence")
    nu = (lam * (1.0 - rho) * (window - false_recent) + false_recent * rho) / rho
    if np.any((nu < 0) | (nu > 1)):
        log.debug("recent fraction outside [0, 1]; clamped")
    out = np.clip(nu, 0.0, 1.0)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class SeekModel:
    log_m: np.ndarray
    D: int
    pi: np.ndarray  # (R, R), pi[r, j] = P(resident of r treated in j)
    inv_d2: np.ndarray  # (R, R), 1/d^2 within the close set excluding self, else 0


def seek_probabilities(log_m, g: RegionGraph, D: int = 2) -> np.ndarray:
    """Treatment-location probabilities ``pi[r, j]`` over each close set.

    Unnormalised weights are ``exp(log_m[j] / d(r, j)^2)`` for ``j != r`` within
    ``D`` crossings and 1 for ``j == r``.
    """
    return seek_model(log_m, g, D).pi


def seek_model(log_m, g: RegionGraph, D: int = 2) -> SeekModel:
    log_m = np.asarray(log_m, dtype=float)
    if log_m.shape != (g.n,):
        raise ValueError("log_m needs one value per region")
    dist = g.distance.astype(float)
    mask = close_mask(g, D) & (dist > 0)
    inv_d2 = np.where(mask, 1.0 / np.where(mask, dist, 1.0) ** 2, 0.0)
    u = np.where(mask, np.exp(log_m[None, :] * inv_d2), 0.0)
    np.fill_diagonal(u, 1.0)
    pi = u / u.sum(axis=1, keepdims=True)
    return SeekModel(log_m, D, pi, inv_d2)


def seek_prior_mean(g: RegionGraph, D: int = 2) -> np.ndarray:
    """``log(0.05 / n_j)`` with ``n_j`` the number of other regions within D of j."""
    n = close_mask(g, D).sum(axis=1) - 1
    return np.log(OUTSIDE_SHARE / np.maximum(n, 1))


def reallocate_patients(art_count, pi) -> np.ndarray:
    """Facility-location patients ``A*[r] = sum_j pi[j, r] A[j]``.

    ``art_count`` may be (R,) or (T, R).
    """
    return np.asarray(art_count, dtype=float) @ np.asarray(pi)


# ---------------------------------------------------------------------------
# data containers


@dataclass
class BinomialData:
    region: list[str]
    time: np.ndarray
    tested: np.ndarray
    positive: np.ndarray
    source: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.time = np.asarray(self.time, dtype=float).reshape(-1)
        self.tested = np.asarray(self.tested, dtype=np.int64).reshape(-1)
        self.positive = np.asarray(self.positive, dtype=np.int64).reshape(-1)
        self.region = [str(r) for r in self.region]
        if not self.source:
            self.source = [""] * len(self.region)
        n = len(self.region)
        if not (len(self.time) == len(self.tested) == len(self.positive) == len(self.source) == n):
            raise ObservationError("binomial record fields have unequal lengths")
        if np.any(self.positive < 0) or np.any(self.positive > self.tested):
            raise ObservationError("binomial records need 0 <= positive <= tested")

    def __len__(self):
        return len(self.region)

    @classmethod
    def empty(cls):
        return cls([], [], [], [])


@dataclass
class CountData:
    region: list[str]
    time: np.ndarray
    count: np.ndarray

    def __post_init__(self):
        self.time = np.asarray(self.time, dtype=float).reshape(-1)
        self.count = np.asarray(self.count, dtype=np.int64).reshape(-1)
        self.region = [str(r) for r in self.region]
        if not (len(self.time) == len(self.count) == len(self.region)):
            raise ObservationError("count record fields have unequal lengths")
        if np.any(self.count < 0):
            raise ObservationError("counts must be nonnegative")

    def __len__(self):
        return len(self.region)

    @classmethod
    def empty(cls):
        return cls([], [], [])


@dataclass
class ObservationSet:
    survey_hiv: BinomialData = field(default_factory=BinomialData.empty)
    anc: BinomialData = field(default_factory=BinomialData.empty)  # source = site id
    survey_art: BinomialData = field(default_factory=BinomialData.empty)
    recency: BinomialData = field(default_factory=BinomialData.empty)
    art_counts: CountData = field(default_factory=CountData.empty)

    @property
    def anc_sites(self) -> list[str]:
        return sorted(set(self.anc.source))

    def __len__(self):
        return sum(len(getattr(self, k)) for k in SOURCES)


SOURCES = ("survey_hiv", "anc", "survey_art", "recency", "art_counts")


@dataclass(frozen=True)
class _Bin:
    r: np.ndarray
    t: np.ndarray
    n: np.ndarray
    k: np.ndarray
    const: np.ndarray
    site: np.ndarray | None = None


@dataclass(frozen=True)
class BoundObservations:
    """Observations resolved to region/grid/site indices for fast evaluation."""

    survey_hiv: _Bin
    anc: _Bin
    survey_art: _Bin
    recency: _Bin
    count_r: np.ndarray
    count_t: np.ndarray
    count_x: np.ndarray
    sites: tuple[str, ...]
    site_region: np.ndarray

    def __post_init__(self):
        times = np.unique(self.count_t)
        object.__setattr__(self, "count_times", times)
        object.__setattr__(self, "count_row", np.searchsorted(times, self.count_t))

    @property
    def n_sites(self) -> int:
        return len(self.sites)


def bind(obs: ObservationSet, model: EpidemicModel, sites: list[str] | None = None) -> BoundObservations:
    """Resolve region ids, times and ANC sites; drop binomial records with no tests."""
    g = model.graph
    site_list = list(sites) if sites is not None else obs.anc_sites
    site_index = {s: i for i, s in enumerate(site_list)}
    site_region = np.full(len(site_list), -1, dtype=np.int64)

    def bin_(d: BinomialData, name: str, with_site=False):
        keep = d.tested > 0
        if not keep.all():
            log.warning("%s: dropped %d records with zero tested", name, int((~keep).sum()))
        idx = np.flatnonzero(keep)
        r = np.array([g.index(d.region[i]) for i in idx], dtype=np.int64)
        t = model.time_index(d.time[idx]) if idx.size else np.zeros(0, dtype=np.int64)
        n = d.tested[idx].astype(float)
        k = d.positive[idx].astype(float)
        site = None
        if with_site:
            site = np.empty(idx.size, dtype=np.int64)
            for m, i in enumerate(idx):
                s = d.source[i]
                if s not in site_index:
                    raise ObservationError(f"unknown ANC site {s!r}")
                j = site_index[s]
                if site_region[j] >= 0 and site_region[j] != r[m]:
                    raise ObservationError(f"ANC site {s!r} reported under two regions")
                site_region[j] = r[m]
                site[m] = j
        return _Bin(r, t, n, k, _log_choose(n, k), site)

    c = obs.art_counts
    cr = np.array([g.index(x) for x in c.region], dtype=np.int64)
    ct = model.time_index(c.time) if len(c) else np.zeros(0, dtype=np.int64)
    cx = c.count.astype(float)
    return BoundObservations(
        bin_(obs.survey_hiv, "survey_hiv"), bin_(obs.anc, "anc", True),
        bin_(obs.survey_art, "survey_art"), bin_(obs.recency, "recency"),
        cr, ct, cx, tuple(site_list), site_region)


# ---------------------------------------------------------------------------
# likelihood


@dataclass
class LoglikResult:
    total: float
    components: dict[str, float]
    g_states: np.ndarray | None = None
    g_lam: np.ndarray | None = None
    g_delta: np.ndarray | None = None
    g_log_m: np.ndarray | None = None
    g_log_omega: float = 0.0
    g_log_theta: float = 0.0


def _fsum(x) -> float:
    return math.fsum(np.asarray(x, dtype=float).ravel().tolist())


def total_loglik(traj: Trajectories, bound: BoundObservations, seek: SeekModel,
                 omega: float, theta: float, delta_s, *, grad: bool = False) -> LoglikResult:
    """Joint log-likelihood of all observation sources.

    Record sums use exactly-rounded summation, so the value does not depend
    on record order. With ``grad=True`` the result also carries derivatives
    with respect to the stored states, the incidence series, the clinic
    effects, ``log_m`` and the log dispersion parameters.
    """
    X = traj.states
    T, R, _ = X.shape
    delta_s = np.asarray(delta_s, dtype=float)
    comps = {}
    if grad:
        g_rho = np.zeros((T, R))
        g_alpha = np.zeros((T, R))
        g_art = np.zeros((T, R))
        g_lam = np.zeros((T, R))
        g_delta = np.zeros(bound.n_sites)
        g_log_m = np.zeros(R)
        g_lo = g_lt = 0.0

    def rho_at(b):
        sub = X[b.t, b.r]
        return sub[:, 1:].sum(axis=1) / sub.sum(axis=1)

    b = bound.survey_hiv
    if b.r.size:
        p = rho_at(b)
        comps["survey_hiv"] = _fsum(b.const + xlogy(b.k, p) + xlog1py(b.n - b.k, -p))
        if grad:
            np.add.at(g_rho, (b.t, b.r), _binom_dp(b.k, b.n, p))
    else:
        comps["survey_hiv"] = 0.0

    b = bound.anc
    if b.r.size:
        rho = rho_at(b)
        p = expit(logit(rho) + delta_s[b.site])
        comps["anc"] = _fsum(b.const + xlogy(b.k, p) + xlog1py(b.n - b.k, -p))
        if grad:
            dl = b.k - b.n * p  # d/d logit p
            np.add.at(g_delta, b.site, dl)
            np.add.at(g_rho, (b.t, b.r), dl / (rho * (1.0 - rho)))
    else:
        comps["anc"] = 0.0

    b = bound.survey_art
    if b.r.size:
        sub = X[b.t, b.r]
        plhiv = sub[:, 1:].sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            p = np.where(plhiv > 0, sub[:, 5:].sum(axis=1) / plhiv, 0.0)
        comps["survey_art"] = _fsum(b.const + xlogy(b.k, p) + xlog1py(b.n - b.k, -p))
        if grad:
            np.add.at(g_alpha, (b.t, b.r), _binom_dp(b.k, b.n, p))
    else:
        comps["survey_art"] = 0.0

    b = bound.recency
    if b.r.size:
        rho = rho_at(b)
        lam = traj.lam[b.t, b.r]
        raw = lam * (1.0 - rho) * (RECENCY_WINDOW - FALSE_RECENT) / rho + FALSE_RECENT
        p = np.clip(raw, 0.0, 1.0)
        comps["recency"] = _fsum(b.const + xlogy(b.k, p) + xlog1py(b.n - b.k, -p))
        if grad:
            dp = _binom_dp(b.k, b.n, p) * ((raw > 0) & (raw < 1))
            w = RECENCY_WINDOW - FALSE_RECENT
            np.add.at(g_lam, (b.t, b.r), dp * (1.0 - rho) * w / rho)
            np.add.at(g_rho, (b.t, b.r), dp * (-lam * w / rho ** 2))
    else:
        comps["recency"] = 0.0

    if bound.count_r.size:
        ts, row = bound.count_times, bound.count_row
        A = X[ts][:, :, 5:].sum(axis=2)  # (nt, R)
        Astar = A @ seek.pi
        mu = np.maximum(Astar[row, bound.count_r], 1e-12)
        if not grad:
            comps["art_counts"] = _fsum(_nb3_core(bound.count_x, mu, omega, theta))
        else:
            lp, d_mu, d_om, d_th = _nb3_grad(bound.count_x, mu, omega, theta)
            comps["art_counts"] = _fsum(lp)
            g_lo = _fsum(d_om) * omega
            g_lt = _fsum(d_th) * theta
            G = np.zeros_like(Astar)
            np.add.at(G, (row, bound.count_r), d_mu)
            g_art[ts] += G @ seek.pi.T
            # d pi[j, i] / d log_m[k] = pi[j, i] (delta_ik - pi[j, k]) inv_d2[j, k]
            s = G @ seek.pi.T  # (nt, R): sum_i pi[j, i] G_i per home region j
            contrib = A[:, :, None] * seek.pi[None] * seek.inv_d2[None] * (G[:, None, :] - s[:, :, None])
            g_log_m += contrib.sum(axis=(0, 1))
    else:
        comps["art_counts"] = 0.0

    total = math.fsum(comps[k] for k in SOURCES)
    if not grad:
        return LoglikResult(total, comps)

    N = X.sum(axis=2)
    plhiv = X[:, :, 1:].sum(axis=2)
    art = X[:, :, 5:].sum(axis=2)
    g_states = np.zeros_like(X)
    with np.errstate(invalid="ignore", divide="ignore"):
        S = X[:, :, 0]
        d_rho_S = -plhiv / N ** 2
        d_rho_inf = S / N ** 2
        g_states[:, :, 0] += g_rho * d_rho_S
        g_states[:, :, 1:] += (g_rho * d_rho_inf)[:, :, None]
        has = plhiv > 0
        untreated = plhiv - art
        d_alpha_I = np.where(has, -art / plhiv ** 2, 0.0)
        d_alpha_A = np.where(has, untreated / plhiv ** 2, 0.0)
    g_states[:, :, 1:5] += (g_alpha * d_alpha_I)[:, :, None]
    g_states[:, :, 5:] += (g_alpha * d_alpha_A + g_art)[:, :, None]
    return LoglikResult(total, comps, g_states, g_lam, g_delta, g_log_m, g_lo, g_lt)


# ---------------------------------------------------------------------------
# CSV interfaces


def _data_lines(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return [ln for ln in fh if ln.strip() and not ln.startswith("#")]


def _reader(path, required):
    reader = csv.DictReader(_data_lines(path))
    missing = set(required) - set(reader.fieldnames or ())
    if missing:
        raise ObservationError(f"{path}: missing columns {sorted(missing)}")
    return list(reader)


def read_observations(surveys: str | Path | None = None, anc: str | Path | None = None,
                      art_counts: str | Path | None = None) -> ObservationSet:
    """Load ``surveys.csv``, ``anc.csv`` and ``art_counts.csv`` (any may be omitted)."""
    kinds = {"hiv": [], "art": [], "recency": []}
    if surveys is not None:
        for row in _reader(surveys, ("source_id", "kind", "region_id", "time", "tested", "positive")):
            if row["kind"] not in kinds:
                raise ObservationError(f"unknown survey kind {row['kind']!r}")
            kinds[row["kind"]].append(row)

    def binom(rows, src="source_id"):
        return BinomialData([r["region_id"] for r in rows], [float(r["time"]) for r in rows],
                            [int(r["tested"]) for r in rows], [int(r["positive"]) for r in rows],
                            [r[src] for r in rows])

    obs = ObservationSet(binom(kinds["hiv"]), BinomialData.empty(), binom(kinds["art"]),
                         binom(kinds["recency"]))
    if anc is not None:
        obs.anc = binom(_reader(anc, ("site_id", "region_id", "time", "tested", "positive")), "site_id")
    if art_counts is not None:
        rows = _reader(art_counts, ("region_id", "time", "count"))
        obs.art_counts = CountData([r["region_id"] for r in rows], [float(r["time"]) for r in rows],
                                   [int(r["count"]) for r in rows])
    return obs


def write_observations(obs: ObservationSet, outdir: str | Path) -> dict[str, Path]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {k: outdir / f"{k}.csv" for k in ("surveys", "anc", "art_counts")}
    with open(paths["surveys"], "w", newline="", encoding="utf-8") as fh:
        fh.write(SCHEMA_LINE + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source_id", "kind", "region_id", "time", "tested", "positive"])
        for kind, d in (("hiv", obs.survey_hiv), ("art", obs.survey_art), ("recency", obs.recency)):
            for i in range(len(d)):
                w.writerow([d.source[i], kind, d.region[i], f"{d.time[i]:.4f}", d.tested[i], d.positive[i]])
    with open(paths["anc"], "w", newline="", encoding="utf-8") as fh:
        fh.write(SCHEMA_LINE + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["site_id", "region_id", "time", "tested", "positive"])
        d = obs.anc
        for i in range(len(d)):
            w.writerow([d.source[i], d.region[i], f"{d.time[i]:.4f}", d.tested[i], d.positive[i]])
    with open(paths["art_counts"], "w", newline="", encoding="utf-8") as fh:
        fh.write(SCHEMA_LINE + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region_id", "time", "count"])
        c = obs.art_counts
        for i in range(len(c)):
            w.writerow([c.region[i], f"{c.time[i]:.4f}", c.count[i]])
    return paths
