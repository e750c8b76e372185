import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats
from scipy.special import gammaln

from hivepi.engine import EpidemicCoefficients, EpidemicModel, project
from hivepi.graph import build_graph
from hivepi.observation import (
    BinomialData,
    CountData,
    ObservationError,
    ObservationSet,
    anc_site_prevalence,
    bind,
    binom_logpmf,
    negbinom3_logpmf,
    negbinom3_params,
    negbinom3_sample,
    read_observations,
    reallocate_patients,
    recent_fraction,
    seek_model,
    seek_prior_mean,
    seek_probabilities,
    total_loglik,
    write_observations,
)

from conftest import path_graph, random_connected_graph


def nb_oracle(x, r, p):
    """Textbook negative binomial log pmf, written out term by term."""
    return math.lgamma(x + r) - math.lgamma(x + 1) - math.lgamma(r) + r * math.log(p) + x * math.log(1 - p)


# ---------------------------------------------------------------- negative binomial

def test_negbinom3_parameters_by_hand():
    r, p = negbinom3_params(10.0, 1.0, 0.1)
    assert (float(r), float(p)) == pytest.approx((5.0, 1 / 3), rel=1e-14)
    assert negbinom3_logpmf(10, 10.0, 1.0, 0.1) == pytest.approx(nb_oracle(10, 5.0, 1 / 3), rel=1e-13)
    r, p = negbinom3_params(5.0, 1e-300, 0.2)
    assert (float(r), float(p)) == pytest.approx((5.0, 0.5), rel=1e-12)


@pytest.mark.parametrize("mu", [1.0, 10.0, 50.0])
def test_negbinom3_poisson_limit(mu):
    x = np.arange(51)
    diff = negbinom3_logpmf(x, mu, 1e-8, 1e-8) - stats.poisson.logpmf(x, mu)
    assert np.max(np.abs(diff)) < 1e-4


@pytest.mark.parametrize("mu,omega,theta", [(1.0, 0.5, 0.01), (10.0, 1.0, 0.1), (100.0, 0.5, 0.01),
                                            (100.0, 1e-8, 1e-8)])
def test_negbinom3_normalizes(mu, omega, theta):
    var = mu + omega * mu + theta * mu * mu
    x = np.arange(int(mu + 60 * math.sqrt(var)) + 200)
    assert math.fsum(np.exp(negbinom3_logpmf(x, mu, omega, theta))) == pytest.approx(1.0, abs=1e-8)


def test_negbinom3_large_counts_finite():
    assert math.isfinite(negbinom3_logpmf(10 ** 7, 10 ** 7, 0.5, 0.01))


def test_negbinom3_rejects_zero_dispersion():
    with pytest.raises(ValueError):
        negbinom3_params(10.0, 0.0, 0.0)


@pytest.mark.parametrize("mu,omega,theta", [(10.0, 1.0, 0.1), (100.0, 0.5, 0.01)])
def test_negbinom3_sample_moments(mu, omega, theta):
    x = negbinom3_sample(np.random.default_rng(7), mu, omega, theta, size=200_000)
    var = mu + omega * mu + theta * mu * mu
    assert x.mean() == pytest.approx(mu, rel=0.01)
    assert x.var() == pytest.approx(var, rel=0.03)


def test_binom_logpmf_matches_scipy():
    k = np.array([0, 3, 10])
    assert np.allclose(binom_logpmf(k, 10, 0.3), stats.binom.logpmf(k, 10, 0.3), rtol=1e-12)


# ---------------------------------------------------------------- derived probabilities

def test_anc_site_prevalence_examples():
    assert anc_site_prevalence(0.2, 0.0) == pytest.approx(0.2, rel=1e-15)
    assert anc_site_prevalence(0.5, 1.0) == pytest.approx(1 / (1 + math.exp(-1)), rel=1e-15)
    assert anc_site_prevalence(0.3, -800.0) == 0.0
    with pytest.raises(ValueError):
        anc_site_prevalence(0.0, 0.0)


def test_recent_fraction_examples():
    assert recent_fraction(0.0, 0.2) == 0.0
    assert recent_fraction(0.01, 0.1) == pytest.approx(0.01 * 0.9 * (130 / 365) / 0.1, abs=1e-12)
    assert recent_fraction(0.01, 0.1) == pytest.approx(0.03205, abs=1e-5)
    with pytest.raises(ValueError):
        recent_fraction(0.01, 0.0)


@given(st.floats(1e-4, 0.2), st.floats(1e-4, 0.2), st.floats(0.01, 0.9))
def test_recent_fraction_monotone(lam1, lam2, rho):
    lo, hi = sorted((lam1, lam2))
    assert recent_fraction(lo, rho) <= recent_fraction(hi, rho)
    assert recent_fraction(lo, min(rho * 1.1, 0.99)) <= recent_fraction(lo, rho)


# ---------------------------------------------------------------- treatment seeking

def test_seek_uniform_when_log_m_zero():
    g = path_graph(5)
    pi = seek_probabilities(np.zeros(5), g, D=2)
    assert np.allclose(pi[2], [0.2] * 5)
    assert np.allclose(pi[0], [1 / 3, 1 / 3, 1 / 3, 0, 0])


def test_seek_isolated_region():
    g = build_graph([], {"a": 1000.0})
    assert seek_probabilities(np.array([3.0]), g, D=2)[0, 0] == 1.0


def test_seek_two_regions_by_hand():
    g = path_graph(2)
    pi = seek_probabilities(np.array([1.0, 1.0]), g, D=1)
    e = math.e
    assert pi[0] == pytest.approx([1 / (1 + e), e / (1 + e)], rel=1e-14)


def test_seek_distance_discount():
    g = path_graph(3)
    pi = seek_probabilities(np.array([0.0, 0.0, 2.0]), g, D=2)
    # region 2 is two steps from region 0, so its log weight is 2 / 2^2
    u = np.array([1.0, 1.0, math.exp(0.5)])
    assert pi[0] == pytest.approx(u / u.sum(), rel=1e-14)


def test_seek_prior_mean():
    g = path_graph(4)
    assert seek_prior_mean(g, 2) == pytest.approx(np.log(0.05 / np.array([2, 3, 3, 2])))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(2, 28))
def test_flow_conservation(seed, n):
    rng = np.random.default_rng(seed)
    g = random_connected_graph(rng, n)
    pi = seek_probabilities(rng.normal(-2, 1.5, n), g, D=2)
    assert np.all(np.abs(pi.sum(axis=1) - 1.0) <= 1e-12)
    assert np.all(np.diag(pi) > 0)
    A = rng.uniform(0, 1e5, n)
    At = reallocate_patients(A, pi)
    assert abs(At.sum() - A.sum()) <= 1e-9 * A.sum()


def test_reallocate_examples():
    A = np.array([100.0, 0.0])
    assert np.array_equal(reallocate_patients(A, np.eye(2)), A)
    pi = np.array([[0.8, 0.2], [0.0, 1.0]])
    assert reallocate_patients(A, pi) == pytest.approx([80.0, 20.0])


# ---------------------------------------------------------------- likelihood

@pytest.fixture(scope="module")
def small():
    g = path_graph(2, pop=1e5, entrants=3e3)
    m = EpidemicModel.build(g, t0=2000.0, t_end=2010.0)
    R = 2
    coef = EpidemicCoefficients(np.full((R, m.kappa_basis.width), -1.5), np.full((R, m.alpha_basis.width), -1.0),
                                np.array([-2.5, -2.0]))
    return m, project(coef, m)


def _obs():
    hiv = BinomialData(["r00", "r01", "r00"], [2004.5, 2004.5, 2008.5], [1000, 800, 900], [150, 120, 140], ["s"] * 3)
    anc = BinomialData(["r00", "r01", "r01"], [2003.5, 2005.5, 2006.5], [300, 300, 300], [40, 50, 52],
                       ["c0", "c1", "c1"])
    art = BinomialData(["r01"], [2008.5], [120], [40], ["s"])
    rec = BinomialData(["r00"], [2008.5], [150], [4], ["s"])
    counts = CountData(["r00", "r01", "r00"], [2006.0, 2006.0, 2009.0], [2000, 3000, 4000])
    return ObservationSet(hiv, anc, art, rec, counts)


def _ll(small, obs, delta=(0.3, -0.2)):
    m, tr = small
    sm = seek_model(np.array([-2.0, -3.0]), m.graph, 2)
    return total_loglik(tr, bind(obs, m), sm, 0.5, 0.01, np.array(delta[:len(obs.anc_sites)]))


def test_empty_observations_give_zero(small):
    res = _ll(small, ObservationSet())
    assert res.total == 0.0 and all(v == 0.0 for v in res.components.values())


def test_components_are_additive(small):
    full = _ll(small, _obs())
    total = 0.0
    for name in ("survey_hiv", "anc", "survey_art", "recency", "art_counts"):
        part = ObservationSet(**{name: getattr(_obs(), name)})
        total += _ll(small, part, (0.3, -0.2)).total
    assert full.total == pytest.approx(total, rel=1e-13)


def test_survey_component_against_scalar_oracle(small):
    m, tr = small
    k = m.time_index(2004.5)
    rho = tr.rho[k, 0]
    n = 10 ** 6
    pos = round(rho * n)
    obs = ObservationSet(survey_hiv=BinomialData(["r00"], [2004.5], [n], [pos]))
    got = _ll(small, obs).total
    assert got == pytest.approx(stats.binom.logpmf(pos, n, rho), rel=1e-10)


def test_count_component_against_scalar_oracle(small):
    m, tr = small
    pi = seek_model(np.array([-2.0, -3.0]), m.graph, 2).pi
    k = m.time_index(2006.0)
    mu = reallocate_patients(tr.art_count[k], pi)[1]
    obs = ObservationSet(art_counts=CountData(["r01"], [2006.0], [3000]))
    r, p = negbinom3_params(mu, 0.5, 0.01)
    assert _ll(small, obs).total == pytest.approx(nb_oracle(3000, float(r), float(p)), rel=1e-12)


def test_order_invariance(small):
    obs = _obs()
    rev = ObservationSet(
        BinomialData(obs.survey_hiv.region[::-1], obs.survey_hiv.time[::-1], obs.survey_hiv.tested[::-1],
                     obs.survey_hiv.positive[::-1], obs.survey_hiv.source[::-1]),
        obs.anc, obs.survey_art, obs.recency,
        CountData(obs.art_counts.region[::-1], obs.art_counts.time[::-1], obs.art_counts.count[::-1]))
    assert _ll(small, rev).total == _ll(small, obs).total


def test_zero_tested_records_dropped(small, caplog):
    obs = ObservationSet(survey_hiv=BinomialData(["r00", "r01"], [2004.5, 2004.5], [0, 100], [0, 10]))
    assert len(bind(obs, small[0]).survey_hiv.r) == 1
    assert "zero tested" in caplog.text


def test_record_validation(small):
    with pytest.raises(ObservationError):
        BinomialData(["r00"], [2004.5], [10], [11])
    with pytest.raises(ObservationError):
        CountData(["r00"], [2004.5], [-1])
    with pytest.raises(ValueError):
        bind(ObservationSet(survey_hiv=BinomialData(["r00"], [2030.0], [10], [1])), small[0])
    with pytest.raises(Exception):
        bind(ObservationSet(survey_hiv=BinomialData(["zz"], [2004.5], [10], [1])), small[0])


def test_csv_round_trip(tmp_path, small):
    obs = _obs()
    paths = write_observations(obs, tmp_path)
    assert paths["surveys"].read_text().startswith("# schema_version: 1\n")
    back = read_observations(paths["surveys"], paths["anc"], paths["art_counts"])
    assert _ll(small, back).total == _ll(small, obs).total


def test_csv_missing_column(tmp_path):
    p = tmp_path / "art_counts.csv"
    p.write_text("region_id,time\nr0,2004.0\n")
    with pytest.raises(ObservationError):
        read_observations(art_counts=p)
