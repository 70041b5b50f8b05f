import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from dhmcmc import inference
from dhmcmc.inference import (IdentityMap, LinearMap, MeasurementError, MeasurementSpec, SampleSet,
                              SamplerError, TruncatedNormalPrior)

GAUSS_MEAN = np.array([10.0, 10.0])
GAUSS_COV = np.array([[1.0, 0.5], [0.5, 2.0]])


def _gauss_prior():
    # many sigma from zero, so the truncation is immaterial
    return TruncatedNormalPrior(GAUSS_MEAN, GAUSS_COV)


def _batch_mean_se(x, n_batches=50):
    """Standard error of the mean per column from batch means (accounts for autocorrelation)."""
    b = np.array_split(x, n_batches)
    means = np.array([c.mean(axis=0) for c in b])
    return means.std(axis=0, ddof=1) / np.sqrt(n_batches)


# -- prior ---------------------------------------------------------------------------

def test_loop_prior_parameters(loop_prior):
    np.testing.assert_array_equal(loop_prior.q_mean, [200, 20, 200, 200])
    np.testing.assert_allclose(np.diag(loop_prior.cov), [7000, 100, 100, 7000])
    assert loop_prior.cov[0, 2] / np.sqrt(7000 * 100) == pytest.approx(-0.9)


def test_loop_prior_samples_match_truncated_marginals(loop_prior):
    Q = loop_prior.sample(100_000, np.random.default_rng(0))
    assert np.all(Q > 0)
    sd = np.sqrt(np.diag(loop_prior.cov))
    # marginal of a truncated MVN is not a truncated normal in general, but A and D only
    # interact with C (far from 0), so the univariate truncnorm is an accurate oracle here
    for k in (0, 3):
        a = -loop_prior.mean[k] / sd[k]
        expect = stats.truncnorm(a, np.inf, loc=loop_prior.mean[k], scale=sd[k]).mean()
        assert Q[:, k].mean() == pytest.approx(expect, abs=4 * sd[k] / np.sqrt(len(Q)) + 0.2)
    assert np.corrcoef(Q[:, 0], Q[:, 2])[0, 1] == pytest.approx(-0.9, abs=0.02)


def test_prior_sampling_fails_when_acceptance_is_tiny():
    prior = TruncatedNormalPrior([-50.0], [[1.0]])
    with pytest.raises(SamplerError, match="prior"):
        prior.sample(10, np.random.default_rng(0))


def test_log_prior_outside_orthant_is_minus_inf():
    prior = TruncatedNormalPrior([1.0, 2.0], np.eye(2), signs=[1, -1])
    assert prior.log_prior(np.array([[1.0, 1.0]]))[0] == -np.inf
    assert np.isfinite(prior.log_prior(np.array([[1.0, -1.0]]))[0])


def test_prior_rejects_bad_covariance():
    with pytest.raises(ValueError):
        TruncatedNormalPrior([1.0, 1.0], [[1.0, 2.0], [0.0, 1.0]])
    with pytest.raises(ValueError):
        TruncatedNormalPrior([1.0, 1.0], [[1.0, 2.0], [2.0, 1.0]])


def test_prior_round_trip(tmp_path, loop_prior):
    path = tmp_path / "p.json"
    inference.save_prior(loop_prior, path, {"seed": 0})
    back = inference.load_prior(path)
    np.testing.assert_array_equal(back.mean, loop_prior.mean)
    np.testing.assert_array_equal(back.cov, loop_prior.cov)


@settings(max_examples=40, deadline=None)
@given(q=st.lists(st.floats(1.0, 400.0), min_size=4, max_size=4))
def test_grad_log_prior_matches_finite_differences(loop_prior, q):
    q = np.array(q)[None]
    g = loop_prior.grad_log_prior(q)[0]
    h = 1e-4
    fd = [(loop_prior.log_prior(q + h * e)[0] - loop_prior.log_prior(q - h * e)[0]) / (2 * h) for e in np.eye(4)]
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-8)


# -- measurements --------------------------------------------------------------------

def test_measurement_file_round_trip(tmp_path, loop, plant_spec):
    path = tmp_path / "m.json"
    inference.save_measurements(path, plant_spec, [2.6, 48.0], {"seed": 0})
    spec, m = inference.load_measurements(path, loop.layout)
    assert spec.names == plant_spec.names
    np.testing.assert_array_equal(spec.sigma, plant_spec.sigma)
    np.testing.assert_array_equal(m, [2.6, 48.0])


def test_unknown_measurement_name_is_rejected(loop):
    with pytest.raises(MeasurementError):
        inference.load_measurements([{"state": "T[nowhere]", "value": 1.0, "sigma": 1.0}], loop.layout)


def test_fixed_state_cannot_be_measured(loop):
    with pytest.raises(MeasurementError):
        inference.load_measurements([{"state": "Tend[A]", "value": 50.0, "sigma": 1.0}], loop.layout)


def test_plant_sigma_is_one_percent_of_mean_condition(loop, plant_spec):
    from dhmcmc import nr_solver
    state, _ = nr_solver.solve(inference.loop_prior(loop).q_mean, loop)
    np.testing.assert_allclose(plant_spec.sigma, 0.01 * np.abs(plant_spec.select(state.values)))


def test_shipped_example_measurements(loop):
    from dhmcmc.cli import example_measurements_path
    spec, m = inference.load_measurements(example_measurements_path(), loop.layout)
    assert dict(zip(spec.names, m)) == {"T[r_hp]": 48.0, "mdot[hp]": 2.6}


def test_log_likelihood_hand_value():
    spec = MeasurementSpec(np.array([0]), np.array([2.0]), ("x",))
    ll = inference.log_likelihood(spec, [1.0], np.array([[3.0]]))[0]
    # unnormalised: the Gaussian constant does not depend on the state
    assert ll == pytest.approx(stats.norm(3.0, 2.0).logpdf(1.0) - stats.norm(3.0, 2.0).logpdf(3.0))


def test_log_likelihood_nan_state_is_minus_inf():
    spec = MeasurementSpec(np.array([0]), np.array([1.0]), ("x",))
    assert inference.log_likelihood(spec, [1.0], np.array([[np.nan]]))[0] == -np.inf


# -- sample sets ---------------------------------------------------------------------

def test_sample_set_round_trip_is_bitwise(tmp_path, rng):
    s = SampleSet(rng.random((7, 2)) * 1e3, rng.standard_normal((7, 3)) / 3, ["a", "b"], ["x", "y", "z"],
                  np.arange(7) % 2, np.arange(7), rng.random(7), {"seed": 4})
    path = tmp_path / "s.csv"
    s.save(path)
    back = SampleSet.load(path)
    assert back.q.tobytes() == s.q.tobytes() and back.x.tobytes() == s.x.tobytes()
    assert back.weights.tobytes() == s.weights.tobytes()
    np.testing.assert_array_equal(back.chain, s.chain)
    assert back.provenance == {"seed": 4}
    assert json.loads(inference.sidecar(path).read_text()) == {"seed": 4}


# -- SIR -------------------------------------------------------------------------------

def test_uniform_weights_resample_uniformly():
    n_cat, n = 20, 40_000
    idx = inference.resample_indices(np.ones(n_cat), n, np.random.default_rng(7))
    counts = np.bincount(idx, minlength=n_cat)
    assert stats.chisquare(counts).pvalue > 0.01


def test_all_zero_weights_raise():
    with pytest.raises(SamplerError):
        inference.resample_indices(np.zeros(5), 3, np.random.default_rng(0))


def test_sir_recovers_conjugate_posterior():
    # identity map, one measured coordinate: posterior is the Gaussian conjugate update
    prior = TruncatedNormalPrior([50.0], [[4.0]])
    spec = MeasurementSpec(np.array([0]), np.array([1.0]), ("q",))
    out = inference.sir_mc(prior, spec, [52.0], model=IdentityMap(1), n_draws=200_000, n_out=20_000, seed=1)
    post_var = 1 / (1 / 4.0 + 1.0)
    post_mean = post_var * (50.0 / 4.0 + 52.0)
    assert out.x[:, 0].mean() == pytest.approx(post_mean, abs=0.03)
    assert out.x[:, 0].var() == pytest.approx(post_var, rel=0.05)


def test_sir_is_deterministic_given_seed():
    prior = TruncatedNormalPrior([50.0], [[4.0]])
    spec = MeasurementSpec(np.array([0]), np.array([1.0]), ("q",))
    a = inference.sir_mc(prior, spec, [52.0], model=IdentityMap(1), n_draws=1000, n_out=100, seed=3)
    b = inference.sir_mc(prior, spec, [52.0], model=IdentityMap(1), n_draws=1000, n_out=100, seed=3)
    assert a.x.tobytes() == b.x.tobytes()


def test_sir_reports_degenerate_weights():
    prior = TruncatedNormalPrior([50.0], [[4.0]])
    spec = MeasurementSpec(np.array([0]), np.array([1e-3]), ("q",))
    out = inference.sir_mc(prior, spec, [55.0], model=IdentityMap(1), n_draws=2000, n_out=100, seed=0)
    assert "warning" in out.provenance


# -- Metropolis-Hastings -----------------------------------------------------------------

def test_metropolis_two_state_detailed_balance():
    # symmetric proposal between two states: pi1 * a(1->2) == pi2 * a(2->1)
    pi = np.array([0.3, 0.7])
    u = (np.arange(100_000) + 0.5) / 100_000
    a12 = inference.metropolis_accept(np.log(pi[1] / pi[0]), u).mean()
    a21 = inference.metropolis_accept(np.log(pi[0] / pi[1]), u).mean()
    assert pi[0] * a12 == pytest.approx(pi[1] * a21, abs=1e-5)


def test_metropolis_nan_ratio_rejects():
    assert not inference.metropolis_accept(np.nan, 0.0)


def test_mh_recovers_gaussian_target():
    prior = _gauss_prior()
    out = inference.mh_chain(prior, None, None, IdentityMap(2), GAUSS_MEAN, 100_000, 2.4**2 / 2 * GAUSS_COV,
                             seed=0, n_burnin=1000)
    se = _batch_mean_se(out.q)
    assert np.all(np.abs(out.q.mean(axis=0) - GAUSS_MEAN) < 3 * se)
    np.testing.assert_allclose(np.cov(out.q.T), GAUSS_COV, rtol=0.05, atol=0.05 * 0.5)


def test_mh_reports_hopeless_proposals():
    prior = _gauss_prior()
    with pytest.raises(SamplerError, match="rejected"):
        inference.mh_chain(prior, None, None, IdentityMap(2), GAUSS_MEAN, 2000, 1e8 * np.eye(2))


# -- HMC ---------------------------------------------------------------------------------

def test_hmc_recovers_gaussian_target():
    prior = _gauss_prior()
    out = inference.hmc_chains(prior, None, None, IdentityMap(2), n_chains=10, n_steps=10_000,
                               n_burnin=2000, seed=0)
    assert len(out) == 100_000
    se = np.sqrt(np.mean([_batch_mean_se(out.q[out.chain == c]) ** 2 for c in range(10)], axis=0) / 10)
    assert np.all(np.abs(out.q.mean(axis=0) - GAUSS_MEAN) < 3 * se)
    np.testing.assert_allclose(np.cov(out.q.T), GAUSS_COV, rtol=0.05, atol=0.05 * 0.5)
    acc = np.array(out.provenance["acceptance"])
    assert np.all((acc > 0.6) & (acc < 0.9))


def test_hmc_with_linear_likelihood_matches_conjugate_posterior():
    # x = A q + b measured in its first coordinate; Gaussian posterior in closed form
    A = np.array([[2.0, -1.0], [0.5, 0.5]])
    b = np.array([1.0, 0.0])
    prior = _gauss_prior()
    spec = MeasurementSpec(np.array([0]), np.array([0.5]), ("x0",))
    m = np.array([12.0])
    out = inference.hmc_chains(prior, spec, m, LinearMap(A, b), n_chains=10, n_steps=5000, n_burnin=2000, seed=1)
    H = A[:1]
    prec = np.linalg.inv(GAUSS_COV) + H.T @ H / 0.25
    cov = np.linalg.inv(prec)
    mean = cov @ (np.linalg.solve(GAUSS_COV, GAUSS_MEAN) + H.T @ (m - b[:1]) / 0.25)
    np.testing.assert_allclose(out.q.mean(axis=0), mean, atol=0.05)
    np.testing.assert_allclose(np.cov(out.q.T), cov, rtol=0.1, atol=0.02)


def test_hmc_is_deterministic_given_seed():
    prior = _gauss_prior()
    a = inference.hmc_chains(prior, None, None, IdentityMap(2), n_chains=3, n_steps=200, n_burnin=100, seed=5)
    b = inference.hmc_chains(prior, None, None, IdentityMap(2), n_chains=3, n_steps=200, n_burnin=100, seed=5)
    assert a.q.tobytes() == b.q.tobytes()


def test_hmc_stays_in_prior_support():
    prior = TruncatedNormalPrior([0.5], [[1.0]])
    out = inference.hmc_chains(prior, None, None, IdentityMap(1), n_chains=4, n_steps=2000, n_burnin=500, seed=0)
    assert np.all(out.q >= 0)


def test_dual_averaging_reaches_target_rate():
    # acceptance model a(eps) = exp(-eps): the adapted step should give a ~ 0.75
    da = inference.DualAveraging(np.full(1, 0.1), target=0.75)
    eps = da.init_step
    for _ in range(5000):
        eps = da.update(np.exp(-eps))
    assert np.exp(-da.final_step[0]) == pytest.approx(0.75, abs=0.02)
