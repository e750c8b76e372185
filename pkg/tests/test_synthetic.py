import math

import numpy as np
import pytest
from scipy import stats

from hivepi.observation import negbinom3_sample
from hivepi.synthetic import (
    ScenarioError,
    ScenarioSpec,
    generate_scenario,
    scenario_edges,
    simulate_observations,
    synthesize,
    truth_document,
)

SMALL = dict(region_count=2, anc_years=(2001.5, 2005.5, 2009.5))


def test_same_seed_same_scenario():
    a = synthesize(ScenarioSpec(seed=3, **SMALL))
    b = synthesize(ScenarioSpec(seed=3, **SMALL))
    assert np.array_equal(a[0].truth.pack(), b[0].truth.pack())
    assert np.array_equal(a[1].states, b[1].states)
    assert np.array_equal(a[2].survey_hiv.positive, b[2].survey_hiv.positive)
    assert np.array_equal(a[2].art_counts.count, b[2].art_counts.count)
    c = synthesize(ScenarioSpec(seed=4, **SMALL))
    assert not np.array_equal(a[0].truth.pack(), c[0].truth.pack())


def test_single_region_scenario():
    sc = generate_scenario(ScenarioSpec(region_count=1))
    assert sc.graph.n == 1 and len(sc.sites) == 2


def test_topologies():
    assert len(scenario_edges(ScenarioSpec(region_count=4, topology="complete"))) == 6
    assert len(scenario_edges(ScenarioSpec(region_count=9, topology="grid"))) == 12
    with pytest.raises(ScenarioError):
        ScenarioSpec(region_count=6, topology="grid")
    with pytest.raises(ScenarioError):
        ScenarioSpec(survey_years=(2030.0,))
    with pytest.raises(ScenarioError):
        ScenarioSpec.from_dict({"regions": 3})


def test_default_scenario_every_kind_and_finite_posterior():
    sc, traj, obs = synthesize(ScenarioSpec())
    for name in ("survey_hiv", "anc", "survey_art", "recency", "art_counts"):
        assert len(getattr(obs, name)) >= 1
    post = sc.posterior(obs)
    assert math.isfinite(post.log_posterior(sc.truth.pack()))
    assert traj.n_clamped == 0


def test_law_of_large_numbers():
    spec = ScenarioSpec(survey_size=10 ** 7, **SMALL)
    sc, traj, obs = synthesize(spec)
    k = sc.model.time_index(obs.survey_hiv.time)
    r = [sc.graph.index(x) for x in obs.survey_hiv.region]
    p = traj.rho[k, r]
    # 0.1 percentage points; the sampling sd here is about 1e-4
    assert np.all(np.abs(obs.survey_hiv.positive / obs.survey_hiv.tested - p) < 1e-3)


def test_zero_prevalence_gives_no_positives():
    sc, traj, obs = synthesize(ScenarioSpec(rho0_range=(0.0, 0.0), **SMALL))
    assert np.all(traj.rho == 0)
    assert np.all(obs.survey_hiv.positive == 0) and np.all(obs.anc.positive == 0)
    assert len(obs.art_counts) == 0


def test_near_poisson_counts_chi_square():
    rng = np.random.default_rng(2)
    mu = 6.0
    x = negbinom3_sample(rng, mu, 1e-9, 1e-9, size=100_000)
    edges = np.arange(0, 16)
    observed = np.array([np.sum(x == k) for k in edges[:-1]] + [np.sum(x >= 15)])
    probs = np.append(stats.poisson.pmf(edges[:-1], mu), stats.poisson.sf(14, mu))
    assert stats.chisquare(observed, probs * x.size).pvalue > 0.01


def test_truth_likelier_than_perturbed():
    wins = 0
    for seed in range(100):
        sc, traj, obs = synthesize(ScenarioSpec(seed=seed, **SMALL))
        post = sc.posterior(obs)
        x = sc.truth.pack()
        rng = np.random.default_rng(seed)
        n = len(obs)
        wins += post.log_likelihood(x).total / n > post.log_likelihood(x + 0.5 * rng.standard_normal(x.size)).total / n
    assert wins >= 95


def test_simulated_data_are_valid():
    sc, traj, obs = synthesize(ScenarioSpec(**SMALL))
    for d in (obs.survey_hiv, obs.anc, obs.survey_art, obs.recency):
        assert np.all((d.positive >= 0) & (d.positive <= d.tested))
    assert np.all(obs.art_counts.count >= 0)
    again = simulate_observations(traj, sc.truth, sc, sc.spec.seed)
    assert np.array_equal(again.anc.positive, obs.anc.positive)


def test_truth_document():
    sc, traj, _ = synthesize(ScenarioSpec(**SMALL))
    doc = truth_document(sc, traj)
    assert doc["years"][0] == 2000.0 and len(doc["years"]) == 20
    assert set(doc["parameters"]) == set(sc.truth.layout.names())
    assert doc["series"]["rho"]["R01"][0] == pytest.approx(traj.rho[0, 0])
