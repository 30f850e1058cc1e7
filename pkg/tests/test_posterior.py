import warnings

import numpy as np
import pytest
from scipy.stats import multivariate_normal, norm

from oracles import likelihood_draws, mc_moments, nested_mc_expected_var, random_config, random_fantasy, random_spd
from seqcal.errors import CovarianceSingular, NonPositiveDeterminant
from seqcal.gp import FieldEmulatorMoments
from seqcal.posterior import (
    DiscrepancyParams,
    FieldExperiment,
    PriorSpec,
    discrepancy_loglik,
    expected_posterior_var,
    fit_discrepancy,
    log_fantasy_term,
    posterior_mean,
    posterior_moments,
    posterior_var,
)

THETA = np.array([0.5])


def _fe(y, sigma2=1.0, d=None, prior=None):
    y = np.atleast_1d(y)
    x = np.linspace(0.1, 0.9, y.size)
    return FieldExperiment.with_noise(x, y, sigma2, prior or PriorSpec.unit(1))


# -- posterior_mean / posterior_var ---------------------------------------------


def test_mean_no_emulator_uncertainty_is_normal_pdf():
    fm = FieldEmulatorMoments(np.array([0.3]), np.zeros((1, 1)))
    assert posterior_mean(fm, _fe(0.3), THETA) == pytest.approx(1 / np.sqrt(2 * np.pi), rel=1e-12)
    assert posterior_mean(fm, _fe(0.3), THETA) == pytest.approx(0.398942, abs=1e-6)


def test_zero_prior_gives_zero_moments():
    fm = FieldEmulatorMoments(np.array([0.3]), np.array([[0.5]]))
    outside = np.array([1.5])
    assert posterior_mean(fm, _fe(0.3), outside) == 0.0
    assert posterior_var(fm, _fe(0.3), outside) == 0.0


def test_prior_density_scales_moments():
    fm = FieldEmulatorMoments(np.array([0.3]), np.array([[0.5]]))
    wide = PriorSpec([0.0], [2.0])
    m1, v1 = posterior_mean(fm, _fe(0.1), THETA), posterior_var(fm, _fe(0.1), THETA)
    m2 = posterior_mean(fm, _fe(0.1, prior=wide), THETA)
    v2 = posterior_var(fm, _fe(0.1, prior=wide), THETA)
    assert m2 == pytest.approx(m1 / 2, rel=1e-14)
    assert v2 == pytest.approx(v1 / 4, rel=1e-14)


@pytest.mark.parametrize("d", [1, 3, 5])
def test_variance_vanishes_without_emulator_uncertainty(d, rng):
    # 1/(2^d pi^(d/2) |Sigma|^(1/2)) f_N(y; mu, Sigma/2) equals f_N(y; mu, Sigma)^2
    mu = rng.normal(size=d)
    fe = _fe(mu + rng.normal(size=d), sigma2=0.7)
    fm = FieldEmulatorMoments(mu, np.zeros((d, d)))
    mean = posterior_mean(fm, fe, THETA)
    assert posterior_var(fm, fe, THETA) <= 1e-12 * max(mean**2, 1e-300)


@pytest.mark.parametrize("seed", range(6))
def test_moments_match_monte_carlo(seed):
    rng = np.random.default_rng(seed)
    fm, fe = random_config(rng, [1, 3, 5][seed % 3])
    m, se, v = mc_moments(fm, fe, 100_000, rng)
    assert abs(posterior_mean(fm, fe, THETA) - m) < 3 * se
    assert posterior_var(fm, fe, THETA) == pytest.approx(v, rel=0.05)


def test_moments_dataclass_matches_functions(rng):
    fm, fe = random_config(rng, 3)
    pm = posterior_moments(fm, fe, THETA)
    assert pm.mean == posterior_mean(fm, fe, THETA)
    assert pm.var == posterior_var(fm, fe, THETA)
    assert pm.mean >= 0 and pm.var >= 0


def test_mean_matches_scipy_density(rng):
    fm, fe = random_config(rng, 4)
    ref = multivariate_normal(fm.mean, fe.Sigma + fm.cov).pdf(fe.y)
    assert posterior_mean(fm, fe, THETA) == pytest.approx(ref, rel=1e-12)


def test_far_residuals_stay_finite():
    d = 3
    S = 0.1 * np.eye(d)
    mu = np.zeros(d)
    sd = np.sqrt(1.0 + 0.1)
    fe = _fe(np.full(d, 40 * sd))
    fm = FieldEmulatorMoments(mu, S)
    m, v = posterior_mean(fm, fe, THETA), posterior_var(fm, fe, THETA)
    assert np.isfinite(m) and np.isfinite(v)
    assert m >= 0 and v >= 0
    phi = 0.5 * S
    assert np.isfinite(expected_posterior_var(fm, fe, THETA, phi))
    assert np.isfinite(log_fantasy_term(fm, fe, phi))


def test_permutation_invariance(rng):
    fm, fe = random_config(rng, 5)
    perm = rng.permutation(5)
    fm2 = FieldEmulatorMoments(fm.mean[perm], fm.cov[np.ix_(perm, perm)])
    fe2 = FieldExperiment(fe.field_x[perm], fe.y[perm], fe.Sigma[np.ix_(perm, perm)], fe.prior, fe.noise_var)
    assert posterior_mean(fm2, fe2, THETA) == pytest.approx(posterior_mean(fm, fe, THETA), rel=1e-12)
    assert posterior_var(fm2, fe2, THETA) == pytest.approx(posterior_var(fm, fe, THETA), rel=1e-12)


def test_non_spd_covariance_raises():
    fm = FieldEmulatorMoments(np.zeros(2), np.zeros((2, 2)))
    fe = FieldExperiment(np.array([0.2, 0.4]), np.zeros(2), np.zeros((2, 2)), PriorSpec.unit(1))
    with pytest.raises(CovarianceSingular):
        posterior_mean(fm, fe, THETA)


def test_field_experiment_validation():
    with pytest.raises(ValueError):
        FieldExperiment(np.array([0.1, 0.2]), np.zeros(3), np.eye(3), PriorSpec.unit(1))
    with pytest.raises(ValueError):
        FieldExperiment(np.array([0.1, 0.2]), np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]), PriorSpec.unit(1))


# -- expected_posterior_var -------------------------------------------------------


def test_zero_phi_is_no_information_gain(rng):
    fm, fe = random_config(rng, 3)
    a = expected_posterior_var(fm, fe, THETA, np.zeros((3, 3)))
    assert a == pytest.approx(posterior_var(fm, fe, THETA), rel=1e-12)


@pytest.mark.parametrize("d", [1, 3, 5])
def test_phi_equal_to_s_removes_all_variance(d, rng):
    fm, fe = random_config(rng, d)
    out = expected_posterior_var(fm, fe, THETA, fm.cov)
    assert out <= 1e-12 * posterior_var(fm, fe, THETA)


@pytest.mark.parametrize("seed", range(4))
def test_expected_var_matches_nested_monte_carlo(seed):
    rng = np.random.default_rng(100 + seed)
    fm, fe, c, m_star, v_star = random_fantasy(rng, [1, 3, 5][seed % 3])
    phi = np.outer(c, c) / v_star
    mc = nested_mc_expected_var(fm, fe, c, m_star, v_star, 2000, rng,
                                lambda m: posterior_var(m, fe, THETA))
    assert expected_posterior_var(fm, fe, THETA, phi) == pytest.approx(mc, rel=0.02)


def test_expected_var_matches_refit_emulator(sine_emulator, sine_field):
    # oracle: condition the emulator on each fantasy output and recompute the variance
    e, fe = sine_emulator, sine_field
    theta, z_star = np.array([0.63]), np.array([[0.3, 0.6]])
    fm = e.predict_field(theta, fe.field_x)
    phi = e.fantasy_cross_cov(z_star, theta, fe.field_x)
    m_star, v_star = e.predict(z_star)
    rng = np.random.default_rng(7)
    draws = m_star[0] + np.sqrt(v_star[0] + e.nugget) * rng.standard_normal(8000)
    vals = np.array([posterior_var(e.condition(z_star, eta).predict_field(theta, fe.field_x), fe, theta)
                     for eta in draws])
    se = vals.std(ddof=1) / np.sqrt(vals.size)
    assert abs(expected_posterior_var(fm, fe, theta, phi) - vals.mean()) < 3 * se


def test_monotone_information(rng):
    for _ in range(30):
        d = int(rng.integers(1, 6))
        fm, fe = random_config(rng, d)
        # any PSD phi below S keeps Sigma + S - phi SPD
        L = np.linalg.cholesky(fm.cov)
        W = rng.uniform(0, 1) * random_spd(rng, d)
        W /= np.linalg.eigvalsh(W).max() * rng.uniform(1.0, 3.0)
        phi = L @ W @ L.T
        assert expected_posterior_var(fm, fe, THETA, phi) <= posterior_var(fm, fe, THETA) + 1e-10


def test_singular_fantasy_raises():
    fm = FieldEmulatorMoments(np.zeros(1), np.array([[0.5]]))
    fe = _fe(0.0)
    with pytest.raises(NonPositiveDeterminant):
        log_fantasy_term(fm, fe, np.array([[1.5]]))
    with pytest.raises(NonPositiveDeterminant):
        log_fantasy_term(fm, fe, np.array([[1.5 - 1e-13]]))


def test_log_fantasy_term_matches_direct_formula(rng):
    fm, fe = random_config(rng, 3)
    phi = 0.5 * fm.cov
    d = 3
    direct = (multivariate_normal(fm.mean, 0.5 * (fe.Sigma + fm.cov + phi)).pdf(fe.y)
              / (2**d * np.pi ** (d / 2) * np.sqrt(np.linalg.det(fe.Sigma + fm.cov - phi))))
    assert np.exp(log_fantasy_term(fm, fe, phi)) == pytest.approx(direct, rel=1e-10)


# -- discrepancy ------------------------------------------------------------------


def _design26():
    rng = np.random.default_rng(0)
    return rng.uniform(size=(26, 1))


def test_discrepancy_cov_form():
    p = DiscrepancyParams(0.04, 0.25, 2.0)
    x = np.array([[0.1], [0.4]])
    C = p.cov(x)
    assert C[0, 0] == pytest.approx(0.29)
    assert C[0, 1] == pytest.approx(0.25 * np.exp(-0.6))
    assert np.linalg.eigvalsh(C).min() > 0


def test_fit_discrepancy_iid_residuals():
    x = _design26()
    fe = FieldExperiment.with_noise(x, np.zeros(26), 0.04, PriorSpec.unit(1))
    hits = 0
    for seed in range(20):
        r = 0.2 * np.random.default_rng(seed).standard_normal(26)
        hits += 0.02 <= fit_discrepancy(fe, r, seed=seed).sigma_eps2 <= 0.08
    assert hits >= 18


def test_fit_discrepancy_zero_residuals_hit_lower_bounds():
    fe = FieldExperiment.with_noise(_design26(), np.zeros(26), 0.04, PriorSpec.unit(1))
    p = fit_discrepancy(fe, np.zeros(26))
    assert p.sigma_eps2 == pytest.approx(1e-6, rel=1e-6)
    assert p.sigma_b2 == pytest.approx(1e-6, rel=1e-6)
    assert not p.fallback


def test_fit_discrepancy_dominates_generating_likelihood():
    x = _design26()
    truth = DiscrepancyParams(0.04, 0.25, 2.0)
    fe = FieldExperiment.with_noise(x, np.zeros(26), 0.04, PriorSpec.unit(1))
    for seed in range(5):
        r = np.random.default_rng(seed).multivariate_normal(np.zeros(26), truth.cov(x))
        fit = fit_discrepancy(fe, r, seed=seed)
        assert discrepancy_loglik(fit, x, r) >= discrepancy_loglik(truth, x, r) - 1e-6


def test_fit_discrepancy_fallback(monkeypatch):
    import seqcal.posterior as post

    def broken(*args, **kwargs):
        raise ValueError("optimizer failure")

    monkeypatch.setattr(post, "minimize", broken)
    fe = FieldExperiment.with_noise(_design26(), np.zeros(26), 0.04, PriorSpec.unit(1))
    r = np.random.default_rng(1).standard_normal(26)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        p = fit_discrepancy(fe, r)
    assert caught
    assert p.fallback and p.sigma_b2 == 0.0 and p.lam == 1.0
    assert p.sigma_eps2 == pytest.approx(np.var(r))


def test_fit_discrepancy_needs_three_points():
    fe = FieldExperiment.with_noise(np.array([0.1, 0.9]), np.zeros(2), 0.04, PriorSpec.unit(1))
    with pytest.raises(ValueError):
        fit_discrepancy(fe, np.zeros(2))


def test_augmented_noise_known_and_fitted():
    fe = FieldExperiment.with_noise(np.array([0.1, 0.5]), np.zeros(2), 0.04, PriorSpec.unit(1))
    cross, var = fe.augmented_noise(np.array([0.3]))
    assert np.all(cross == 0) and var[0] == 0.04
    p = DiscrepancyParams(0.04, 0.25, 2.0)
    cross, var = fe.with_discrepancy(p).augmented_noise(np.array([0.3]))
    assert cross[0] == pytest.approx(0.25 * np.exp(-0.4) * np.ones(2))
    assert var[0] == pytest.approx(0.29)


def test_prior_sample_inside_box(rng):
    prior = PriorSpec([-1.0, 0.0], [1.0, 3.0])
    th = prior.sample(rng, 500)
    assert np.all(prior.density(th) == pytest.approx(1 / 6))
    assert prior.density(np.array([2.0, 1.0])) == 0.0


def test_likelihood_draw_helper_is_consistent(rng):
    # sanity check of the oracle itself against a one-dimensional closed form
    fm = FieldEmulatorMoments(np.array([0.0]), np.array([[0.3]]))
    fe = _fe(0.5)
    f = likelihood_draws(fm, fe, 200_000, rng)
    assert f.mean() == pytest.approx(norm.pdf(0.5, scale=np.sqrt(1.3)), rel=0.01)
