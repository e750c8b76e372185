import math

import numpy as np
import pytest
from scipy import stats

from hivepi.engine import EpidemicModel
from hivepi.inference import ParameterLayout, Posterior
from hivepi.inference.params import smoothing_eigen, spline_deviation, spline_whiten
from hivepi.inference.posterior import finite_difference_gradient
from hivepi.observation import ObservationSet, seek_prior_mean
from hivepi.synthetic import ScenarioSpec, synthesize

from conftest import path_graph


@pytest.fixture(scope="module")
def two_region():
    sc, traj, obs = synthesize(ScenarioSpec(region_count=2, seed=11))
    return sc, sc.posterior(obs)


@pytest.fixture(scope="module")
def prior_only():
    m = EpidemicModel.build(path_graph(3, pop=1e5, entrants=3e3))
    return Posterior.build(m, ObservationSet())


# ---------------------------------------------------------------- layout

def test_pack_unpack_round_trip(rng):
    for art in (False, True):
        lay = ParameterLayout(3, 4, 6, 15, art, ("a", "b", "c"), ("s1", "s2", "s3", "s4"))
        x = rng.standard_normal(lay.size)
        assert np.array_equal(lay.unpack(x).pack(), x)
        assert len(lay.names()) == lay.size == len(set(lay.names()))


def test_smoothing_eigen_matches_difference_matrix():
    for k in (1, 2, 6, 15):
        D = np.diff(np.eye(k), axis=0)
        V, lam = smoothing_eigen(k)
        assert np.allclose(V.T @ V, np.eye(k), atol=1e-13)
        assert np.allclose(D.T @ D, (V * lam) @ V.T, atol=1e-12)


def test_whitening_round_trip_and_precision(rng):
    dev = rng.standard_normal((3, 6))
    assert np.allclose(spline_deviation(spline_whiten(dev, -0.4), -0.4), dev, atol=1e-13)
    # z ~ N(0, I) maps to deviations with precision I / sigma^2 + D'D
    sigma = 0.7
    M = np.column_stack([spline_deviation(e[None, :], math.log(sigma))[0] for e in np.eye(6)])
    D = np.diff(np.eye(6), axis=0)
    assert np.allclose(np.linalg.inv(M @ M.T), np.eye(6) / sigma ** 2 + D.T @ D, atol=1e-10)


def test_layout_rejects_wrong_length():
    lay = ParameterLayout(2, 0, 6, 15)
    with pytest.raises(ValueError):
        lay.unpack(np.zeros(lay.size + 1))


# ---------------------------------------------------------------- prior

def prior_oracle(post, x):
    """Independent per-term evaluation with scipy densities."""
    p = post.unpack(x)
    lp = 0.0
    mean_blocks = [p.beta_kappa_0, p.beta_alpha_0, [p.rho0]] + ([[p.alpha0]] if post.layout.art_era else [])
    for b in mean_blocks:
        lp += stats.norm.logpdf(b, 0, 5).sum()
    z_blocks = [p.z_kappa, p.z_alpha, p.z_rho, p.z_delta, p.z_m] + ([p.z_alpha0] if post.layout.art_era else [])
    for b in z_blocks:
        lp += stats.norm.logpdf(b).sum()
    # spline deviations: N(0, sigma) marginals and N(0, 1) differences on the
    # natural scale, plus the log-Jacobian of the whitening map
    for z, dev, u in ((p.z_kappa, p.beta_kappa, p.log_sigma_kappa), (p.z_alpha, p.beta_alpha, p.log_sigma_alpha_star)):
        lp -= stats.norm.logpdf(z).sum()
        lp += stats.norm.logpdf(dev, 0, math.exp(u)).sum() + stats.norm.logpdf(np.diff(dev, axis=1)).sum()
        R, K = z.shape
        lp += R * np.linalg.slogdet(np.column_stack([spline_deviation(e[None, :], u)[0] for e in np.eye(K)]))[1]
    scales = [p.log_sigma_kappa, p.log_sigma_alpha_star, p.log_sigma_rho, p.log_sigma_delta, p.log_sigma_m]
    if post.layout.art_era:
        scales.append(p.log_sigma_alpha)
    for u in scales:
        lp += stats.halfnorm.logpdf(math.exp(u)) + u
    lp += stats.norm.logpdf([p.log_omega_lin, p.log_theta_quad], 0, 2).sum()
    return lp


def test_prior_matches_scalar_oracle(two_region, rng):
    _, post = two_region
    for x in (np.zeros(post.dim), 0.7 * rng.standard_normal(post.dim)):
        assert post.log_prior(x) == pytest.approx(prior_oracle(post, x), rel=1e-12)


def test_prior_mean_shift(two_region):
    _, post = two_region
    x = np.zeros(post.dim)
    y = x.copy()
    y[post.layout.slices()["beta_kappa_0"][0].start] = 5.0
    assert post.log_prior(y) - post.log_prior(x) == pytest.approx(-0.5, abs=1e-12)


def test_prior_gradient(two_region, rng):
    _, post = two_region
    x = np.zeros(post.dim)
    g0 = post.grad_log_prior(x)
    spline_scales = [post.layout.slices()[n][0].start for n in ("log_sigma_kappa", "log_sigma_alpha_star")]
    assert np.all(np.delete(g0, spline_scales) == 0.0)
    i = post.layout.slices()["beta_kappa_0"][0].start
    x[i] = 1.3
    assert post.grad_log_prior(x)[i] == pytest.approx(-1.3 / 25)
    x = 0.5 * rng.standard_normal(post.dim)
    fd = finite_difference_gradient(post.log_prior, x)
    assert np.allclose(post.grad_log_prior(x), fd, rtol=1e-6, atol=1e-7)


def test_prior_exchangeable_in_regions(rng):
    m = EpidemicModel.build(path_graph(3, pop=1e5))
    post = Posterior.build(m, ObservationSet())
    x = rng.standard_normal(post.dim)
    p = post.unpack(x)
    perm = [2, 0, 1]
    p.z_kappa, p.z_alpha, p.z_rho, p.z_m = p.z_kappa[perm], p.z_alpha[perm], p.z_rho[perm], p.z_m[perm]
    assert post.log_prior(p.pack()) == pytest.approx(post.log_prior(x), rel=1e-13)


# ---------------------------------------------------------------- posterior

def test_empty_data_posterior_is_prior(prior_only, rng):
    x = 0.3 * rng.standard_normal(prior_only.dim)
    assert prior_only.log_posterior(x) == prior_only.log_prior(x)


def test_seek_intercepts_centred_on_prior_mean(prior_only):
    x = np.zeros(prior_only.dim)
    assert np.array_equal(prior_only.log_m(x), seek_prior_mean(prior_only.model.graph, 2))


def test_finite_at_truth(two_region):
    sc, post = two_region
    assert math.isfinite(post.log_posterior(sc.truth.pack()))


def test_failure_is_minus_infinity(two_region):
    _, post = two_region
    x = np.zeros(post.dim)
    x[0] = np.nan
    assert post.log_posterior(x) == -math.inf
    assert post.last_failure


def test_deterministic(two_region, rng):
    sc, post = two_region
    x = sc.truth.pack() + 0.05 * rng.standard_normal(post.dim)
    assert post.log_posterior(x) == post.log_posterior(x.copy())


def test_value_and_grad_value_matches(two_region):
    sc, post = two_region
    x = sc.truth.pack()
    v, _ = post.value_and_grad(x)
    assert v == post.log_posterior(x)


def test_gradient_matches_finite_differences(two_region, rng):
    sc, post = two_region
    for _ in range(3):
        x = sc.truth.pack() + 0.2 * rng.standard_normal(post.dim)
        g = post.gradient(x)
        # step 1e-5 balances truncation error against ~1e-12 rounding noise in the log posterior
        fd = finite_difference_gradient(post.log_posterior, x, rel=1e-5, abs_floor=1e-5)
        assert np.all(np.abs(g - fd) <= 1e-4 * np.abs(fd) + 1e-6)


# ---------------------------------------------------------------- sampler coordinates

def _jacobian(f, y, h=1e-6):
    cols = []
    for i in range(y.size):
        e = np.zeros_like(y)
        e[i] = h
        cols.append((f(y + e) - f(y - e)) / (2 * h))
    return np.column_stack(cols)


def test_sampler_coordinates_round_trip(two_region, rng):
    sc, post = two_region
    x = sc.truth.pack() + 0.3 * rng.standard_normal(post.dim)
    y = post.to_sampler(x)
    assert np.allclose(post.from_sampler(y), x, rtol=1e-14, atol=1e-14)
    rows = np.stack([x, 2 * x])
    assert np.allclose(post.from_sampler(np.stack([post.to_sampler(r) for r in rows])), rows, atol=1e-13)
    p = post.unpack(x)
    q = post.unpack(y)
    assert np.allclose(q.z_delta, p.delta_s) and np.allclose(q.z_rho, p.rho_dev)
    assert np.array_equal(q.z_m, p.z_m) and np.array_equal(q.z_kappa, p.z_kappa)


def test_sampler_density_carries_the_jacobian(two_region, rng):
    sc, post = two_region
    y = post.to_sampler(sc.truth.pack() + 0.1 * rng.standard_normal(post.dim))
    log_det = np.linalg.slogdet(_jacobian(post.from_sampler, y))[1]
    assert post.sampler_log_density(y) == pytest.approx(post.log_posterior(post.from_sampler(y)) + log_det,
                                                        abs=1e-6)


def test_sampler_covariance_is_the_linearised_map(two_region, rng):
    sc, post = two_region
    x = sc.truth.pack()
    A = rng.standard_normal((post.dim, post.dim))
    cov = A @ A.T
    J = _jacobian(post.to_sampler, x)
    assert np.allclose(post.sampler_covariance(x, cov), J @ cov @ J.T, rtol=1e-6, atol=1e-6)
