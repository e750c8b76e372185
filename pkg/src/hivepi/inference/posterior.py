"""Log prior, log posterior and its gradient over the flat parameter vector."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..engine import (
    EpidemicCoefficients,
    EpidemicModel,
    ProjectionError,
    Trajectories,
    project,
    project_adjoint,
)
from ..observation import (
    BoundObservations,
    ObservationSet,
    bind,
    seek_model,
    seek_prior_mean,
    total_loglik,
)
from .mcmc import SamplerOptions, Samples, sample_posterior
from .params import ParameterLayout, ParameterVector, smoothing_eigen, spline_deviation, spline_scales

MEAN_SD = 5.0  # prior sd of spline means and logit intercepts
DISP_SD = 2.0  # prior sd of log dispersion parameters
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_LOG2 = math.log(2.0)
# standardised blocks the sampler moves on their natural scale
_SAMPLER_CENTRED = (("z_rho", "log_sigma_rho"), ("z_delta", "log_sigma_delta"))


def _normal_lp(x, sd):
    x = np.asarray(x, dtype=float)
    return -0.5 * float(np.sum((x / sd) ** 2)) - x.size * (_LOG_SQRT_2PI + math.log(sd))


def _half_normal_log_scale_lp(u):
    """Half-normal(0, 1) on sigma = exp(u), plus the log-Jacobian u."""
    s = math.exp(u)
    return _LOG2 - _LOG_SQRT_2PI - 0.5 * s * s + u


class NonFinitePosterior(RuntimeError):
    pass


@dataclass
class Posterior:
    """Posterior over the parameters of one model and data set.

    ``log_posterior`` returns ``-inf`` when the projection fails; the failure
    is recorded on ``last_failure``.
    """

    model: EpidemicModel
    bound: BoundObservations
    layout: ParameterLayout
    D: int = 2
    backend: str | None = None
    m_bar: np.ndarray = field(init=False)
    last_failure: str | None = field(default=None, init=False)

    def __post_init__(self):
        self.m_bar = seek_prior_mean(self.model.graph, self.D)
        self._sl = self.layout.slices()
        self._seek_cache = (None, None)
        self._prior_idx = None

    @classmethod
    def build(cls, model: EpidemicModel, obs: ObservationSet, D: int = 2, sites=None,
              backend: str | None = None) -> "Posterior":
        bound = bind(obs, model, sites)
        g = model.graph
        layout = ParameterLayout(
            n_regions=g.n, n_sites=bound.n_sites, n_kappa=model.kappa_basis.width,
            n_alpha=model.alpha_basis.width, art_era=model.art_era,
            region_ids=g.region_ids, site_ids=bound.sites)
        return cls(model, bound, layout, D, backend)

    @property
    def dim(self) -> int:
        return self.layout.size

    def initial_point(self) -> np.ndarray:
        """Prior-centred start: every unconstrained value at 0 (``log_m`` at its prior mean)."""
        return np.zeros(self.dim)

    def _get(self, x, name):
        sl, shape = self._sl[name]
        return x[sl].reshape(shape) if shape else x[sl][0]

    def unpack(self, x) -> ParameterVector:
        return self.layout.unpack(x)

    # -- transforms ---------------------------------------------------------

    def coefficients(self, x) -> EpidemicCoefficients:
        g = self._get
        kappa = g(x, "beta_kappa_0")[None, :] + spline_deviation(g(x, "z_kappa"), g(x, "log_sigma_kappa"))
        alpha = g(x, "beta_alpha_0")[None, :] + spline_deviation(g(x, "z_alpha"), g(x, "log_sigma_alpha_star"))
        rho = g(x, "rho0") + math.exp(g(x, "log_sigma_rho")) * g(x, "z_rho")
        alpha_logit = None
        if self.layout.art_era:
            alpha_logit = g(x, "alpha0") + math.exp(g(x, "log_sigma_alpha")) * g(x, "z_alpha0")
        return EpidemicCoefficients(kappa, alpha, rho, alpha_logit)

    def log_m(self, x) -> np.ndarray:
        return self.m_bar + math.exp(self._get(x, "log_sigma_m")) * self._get(x, "z_m")

    def delta_s(self, x) -> np.ndarray:
        return math.exp(self._get(x, "log_sigma_delta")) * self._get(x, "z_delta")

    def seek(self, x):
        lm = self.log_m(x)
        key, cached = self._seek_cache
        if key is not None and np.array_equal(key, lm):
            return cached
        sm = seek_model(lm, self.model.graph, self.D)
        self._seek_cache = (lm.copy(), sm)
        return sm

    def project(self, x) -> Trajectories:
        return project(self.coefficients(x), self.model, self.backend)

    # -- densities ------------------------------------------------------------

    def _std_blocks(self):
        names = ["z_kappa", "z_alpha", "z_rho", "z_delta", "z_m"]
        if self.layout.art_era:
            names.append("z_alpha0")
        return names

    def _scale_names(self):
        names = ["log_sigma_kappa", "log_sigma_alpha_star", "log_sigma_rho",
                 "log_sigma_delta", "log_sigma_m"]
        if self.layout.art_era:
            names.append("log_sigma_alpha")
        return names

    def _mean_names(self):
        names = ["beta_kappa_0", "beta_alpha_0", "rho0"]
        if self.layout.art_era:
            names.append("alpha0")
        return names

    def _index(self, names):
        idx = [np.arange(self._sl[n][0].start, self._sl[n][0].stop) for n in names]
        return np.concatenate(idx) if idx else np.zeros(0, dtype=np.int64)

    def log_prior(self, x) -> float:
        """Sum of all prior log densities on the unconstrained scale.

        Standardised effects are N(0, 1). For the whitened spline deviations
        the N(0, 1) first-difference penalties and the change of variables
        leave ``-R/2 sum log(1 + sigma^2 lam)`` plus a constant on ``sigma``.
        """
        x = np.asarray(x, dtype=float)
        if self._prior_idx is None:
            self._prior_idx = (self._index(self._mean_names()), self._index(self._std_blocks()),
                               self._index(self._scale_names()),
                               self._index(["log_omega_lin", "log_theta_quad"]))
        im, iz, isc, idisp = self._prior_idx
        g = self._get
        xm, xz, xd = x[im] / MEAN_SD, x[iz], x[idisp] / DISP_SD
        lp = -0.5 * float(xm @ xm) - im.size * (_LOG_SQRT_2PI + math.log(MEAN_SD))
        lp += -0.5 * float(xz @ xz) - iz.size * _LOG_SQRT_2PI
        lp += -0.5 * float(xd @ xd) - idisp.size * (_LOG_SQRT_2PI + math.log(DISP_SD))
        for zname, sname in (("z_kappa", "log_sigma_kappa"), ("z_alpha", "log_sigma_alpha_star")):
            R, K = self._sl[zname][1]
            lam = smoothing_eigen(K)[1]
            lp -= R * (0.5 * float(np.sum(np.log1p(math.exp(2.0 * g(x, sname)) * lam))) + (K - 1) * _LOG_SQRT_2PI)
        u = x[isc]
        lp += float(np.sum(_LOG2 - _LOG_SQRT_2PI - 0.5 * np.exp(2.0 * u) + u))
        return float(lp)

    def grad_log_prior(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        g = self._get
        for name in self._mean_names():
            sl, _ = self._sl[name]
            out[sl] -= x[sl] / MEAN_SD ** 2
        for name in self._std_blocks():
            sl, _ = self._sl[name]
            out[sl] -= x[sl]
        for zname, sname in (("z_kappa", "log_sigma_kappa"), ("z_alpha", "log_sigma_alpha_star")):
            R, K = self._sl[zname][1]
            q = math.exp(2.0 * g(x, sname)) * smoothing_eigen(K)[1]
            out[self._sl[sname][0]] -= R * float(np.sum(q / (1.0 + q)))
        for name in self._scale_names():
            sl, _ = self._sl[name]
            out[sl] += 1.0 - math.exp(2.0 * x[sl][0])
        for name in ("log_omega_lin", "log_theta_quad"):
            sl, _ = self._sl[name]
            out[sl] -= x[sl] / DISP_SD ** 2
        return out

    def log_likelihood(self, x, traj: Trajectories | None = None):
        if traj is None:
            traj = self.project(x)
        g = self._get
        return total_loglik(traj, self.bound, self.seek(x), math.exp(g(x, "log_omega_lin")),
                            math.exp(g(x, "log_theta_quad")), self.delta_s(x))

    def log_posterior(self, x) -> float:
        x = np.asarray(x, dtype=float)
        if not np.isfinite(x).all():
            self.last_failure = "non-finite parameters"
            return -math.inf
        try:
            traj = self.project(x)
        except ProjectionError as exc:
            self.last_failure = str(exc)
            return -math.inf
        lp = self.log_prior(x) + self.log_likelihood(x, traj).total
        if not math.isfinite(lp):
            self.last_failure = "non-finite likelihood"
            return -math.inf
        return lp

    __call__ = log_posterior

    def value_and_grad(self, x) -> tuple[float, np.ndarray]:
        """Log posterior and its analytic gradient (reverse-mode through the projection).

        Raises:
            NonFinitePosterior: when the posterior or its gradient is not finite at ``x``.
        """
        # extreme trial points can overflow in intermediate terms; the result is checked below
        with np.errstate(all="ignore"):
            value, grad = self._value_and_grad(np.asarray(x, dtype=float))
        if not np.isfinite(grad).all():
            raise NonFinitePosterior("gradient is not finite")
        return value, grad

    def _value_and_grad(self, x):
        try:
            coef = self.coefficients(x)
            traj = project(coef, self.model, self.backend)
        except ProjectionError as exc:
            raise NonFinitePosterior(str(exc)) from exc
        g = self._get
        omega = math.exp(g(x, "log_omega_lin"))
        theta = math.exp(g(x, "log_theta_quad"))
        seek = self.seek(x)
        ll = total_loglik(traj, self.bound, seek, omega, theta, self.delta_s(x), grad=True)
        value = self.log_prior(x) + ll.total
        if not math.isfinite(value):
            raise NonFinitePosterior("log posterior is not finite")
        cg = project_adjoint(traj, coef, self.model, ll.g_states, ll.g_lam, self.backend)

        grad = self.grad_log_prior(x)

        def add(name, v):
            grad[self._sl[name][0]] += np.ravel(v)

        for coef_g, b0, zn, sn in ((cg.kappa_coef, "beta_kappa_0", "z_kappa", "log_sigma_kappa"),
                                   (cg.alpha_coef, "beta_alpha_0", "z_alpha", "log_sigma_alpha_star")):
            u, z = g(x, sn), g(x, zn)
            V, lam = smoothing_eigen(z.shape[1])
            sc = spline_scales(u, z.shape[1])
            gv = coef_g @ V
            add(b0, coef_g.sum(axis=0))
            add(zn, gv * sc)
            # d s / d log sigma = s / (1 + sigma^2 lam)
            add(sn, float(np.sum(gv * z * (sc / (1.0 + math.exp(2.0 * u) * lam)))))
        s = math.exp(g(x, "log_sigma_rho"))
        add("rho0", cg.rho_logit.sum())
        add("z_rho", s * cg.rho_logit)
        add("log_sigma_rho", s * float(cg.rho_logit @ g(x, "z_rho")))
        if self.layout.art_era:
            s = math.exp(g(x, "log_sigma_alpha"))
            add("alpha0", cg.alpha_logit.sum())
            add("z_alpha0", s * cg.alpha_logit)
            add("log_sigma_alpha", s * float(cg.alpha_logit @ g(x, "z_alpha0")))
        s = math.exp(g(x, "log_sigma_delta"))
        add("z_delta", s * ll.g_delta)
        add("log_sigma_delta", s * float(ll.g_delta @ g(x, "z_delta")))
        s = math.exp(g(x, "log_sigma_m"))
        add("z_m", s * ll.g_log_m)
        add("log_sigma_m", s * float(ll.g_log_m @ g(x, "z_m")))
        add("log_omega_lin", ll.g_log_omega)
        add("log_theta_quad", ll.g_log_theta)
        return value, grad

    def gradient(self, x) -> np.ndarray:
        return self.value_and_grad(x)[1]

    # -- sampler coordinates ----------------------------------------------------
    #
    # The initial-prevalence deviations and the clinic biases are pinned down
    # tightly by the data, so ``z = deviation / sigma`` is strongly curved
    # against ``log_sigma``. The sampler therefore works with the deviations
    # themselves for those blocks; every other coordinate is unchanged.

    def _sampler_blocks(self):
        return [(self._sl[z][0], self._sl[s][0].start) for z, s in _SAMPLER_CENTRED]

    def to_sampler(self, x) -> np.ndarray:
        y = np.array(x, dtype=float)
        for sl, iu in self._sampler_blocks():
            y[sl] = y[sl] * math.exp(y[iu])
        return y

    def from_sampler(self, y) -> np.ndarray:
        """Inverse of :meth:`to_sampler`; accepts a single point or rows of points."""
        x = np.array(y, dtype=float)
        for sl, iu in self._sampler_blocks():
            x[..., sl] = x[..., sl] * np.exp(-x[..., iu : iu + 1])
        return x

    def sampler_log_density(self, y) -> float:
        """Log posterior density in sampler coordinates (includes the Jacobian)."""
        y = np.asarray(y, dtype=float)
        log_jac = -sum((sl.stop - sl.start) * float(y[iu]) for sl, iu in self._sampler_blocks())
        return self.log_posterior(self.from_sampler(y)) + log_jac

    def sample(self, x, cov, opts: SamplerOptions = SamplerOptions()) -> Samples:
        """Adaptive Metropolis from the mode ``x`` with covariance ``cov``.

        Chains run in sampler coordinates; the returned draws are in the
        parameter layout.
        """
        x = np.asarray(x, dtype=float)
        s = sample_posterior(self.sampler_log_density, self.to_sampler(x), self.sampler_covariance(x, cov),
                             opts, names=self.layout.names())
        s.draws = self.from_sampler(s.draws)
        return s

    def sampler_covariance(self, x, cov) -> np.ndarray:
        """Map a covariance at ``x`` into sampler coordinates (first order)."""
        J = np.eye(len(x))
        for sl, iu in self._sampler_blocks():
            sigma = math.exp(x[iu])
            idx = np.arange(sl.start, sl.stop)
            J[idx, idx] = sigma
            J[idx, iu] = sigma * np.asarray(x)[sl]
        return J @ np.asarray(cov, dtype=float) @ J.T


def finite_difference_gradient(f, x, rel: float = 1e-5, abs_floor: float = 1e-7) -> np.ndarray:
    """Central differences with step ``max(rel * |x_i|, abs_floor)``."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for i in range(x.size):
        h = max(rel * abs(x[i]), abs_floor)
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        out[i] = (f(xp) - f(xm)) / (xp[i] - xm[i])
    return out
