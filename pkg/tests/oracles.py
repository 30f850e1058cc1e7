"""Monte-Carlo oracles shared by the unit and acceptance suites.

They only use numpy/scipy densities, never the closed forms under test.
"""
import numpy as np
from scipy.stats import multivariate_normal, norm

from seqcal.gp import FieldEmulatorMoments
from seqcal.posterior import FieldExperiment, PriorSpec


def random_spd(rng, d, scale=1.0):
    A = rng.standard_normal((d, d))
    return scale * (A @ A.T / d + 0.1 * np.eye(d))


def random_config(rng, d):
    """Emulator moments and field data with y drawn from the marginal model."""
    sigma2 = rng.uniform(0.2, 1.0)
    S = random_spd(rng, d, scale=rng.uniform(0.05, 0.3) * sigma2)
    mu = rng.normal(size=d)
    y = rng.multivariate_normal(mu, S + sigma2 * np.eye(d))
    fe = FieldExperiment.with_noise(rng.uniform(size=(d, 1)), y, sigma2, PriorSpec.unit(1))
    return FieldEmulatorMoments(mu, S), fe


def likelihood_draws(fm, fe, n, rng):
    """f_N(y; eta, Sigma) for n draws eta ~ MVN(mu, S)."""
    eta = rng.multivariate_normal(fm.mean, fm.cov, size=n)
    return multivariate_normal(mean=fe.y, cov=fe.Sigma).pdf(eta)


def mc_moments(fm, fe, n, rng):
    """(mean, standard error of the mean, variance) of the likelihood under the emulator."""
    f = np.atleast_1d(likelihood_draws(fm, fe, n, rng))
    return f.mean(), f.std(ddof=1) / np.sqrt(n), f.var(ddof=1)


def random_fantasy(rng, d):
    """Joint Gaussian of the field outputs and one hypothetical simulation output.

    Returns (fm, fe, c, m_star, v_star): ``c`` is the cross-covariance of the
    field outputs with eta*, whose predictive law is N(m_star, v_star).
    """
    fm, fe = random_config(rng, d)
    K = random_spd(rng, d + 1, scale=float(np.mean(np.diag(fm.cov))))
    S = K[:d, :d]
    c, v_star = K[:d, d], K[d, d]
    return FieldEmulatorMoments(fm.mean, S), fe, c, rng.normal(), v_star


def nested_mc_expected_var(fm, fe, c, m_star, v_star, n, rng, var_fn):
    """Average post-update variance over fantasy draws eta* ~ N(m_star, v_star).

    Each draw shifts the field mean by c (eta* - m_star) / v_star and shrinks the
    covariance by c c^T / v_star; ``var_fn(moments)`` re-evaluates the variance.
    Draws are randomized-stratified (one uniform per probability stratum), which
    keeps the estimator unbiased with far less noise than iid draws.
    """
    S_new = fm.cov - np.outer(c, c) / v_star
    u = (np.arange(n) + rng.uniform(size=n)) / n
    draws = m_star + np.sqrt(v_star) * norm.ppf(u)
    vals = [var_fn(FieldEmulatorMoments(fm.mean + c * (eta - m_star) / v_star, S_new))
            for eta in draws]
    return float(np.mean(vals))


def brute_force_eivar(e, fe, theta_ref, z_star, xi):
    """Integrated expected posterior variance after observing z*, by nested MC.

    ``xi`` holds standard normal draws, shared across candidates so rankings use
    common random numbers. Each draw gives a fantasy output
    eta* = m(z*) + sqrt(var(z*) + nugget) xi; the field mean moves along the
    emulator cross-covariance and the variance is recomputed from densities.
    """
    z_star = np.atleast_2d(z_star)
    m_star, v_star = e.predict(z_star)
    sd = np.sqrt(v_star[0] + e.nugget)
    d = fe.d
    log_const = d * np.log(2.0) + 0.5 * d * np.log(np.pi) + 0.5 * np.linalg.slogdet(fe.Sigma)[1]
    total = 0.0
    for theta in np.atleast_2d(theta_ref):
        fm = e.predict_field(theta, fe.field_x)
        Zf = np.hstack([fe.field_x, np.tile(theta, (d, 1))])
        c = e.cov(Zf, z_star)[:, 0]
        S_new = fm.cov - np.outer(c, c) / sd**2
        means = fm.mean[None, :] + np.outer(xi, c / sd)
        resid = fe.y[None, :] - means
        second = multivariate_normal(np.zeros(d), 0.5 * fe.Sigma + S_new, allow_singular=True).logpdf(resid)
        first = multivariate_normal(np.zeros(d), fe.Sigma + S_new, allow_singular=True).logpdf(resid)
        var = np.exp(second - log_const) - np.exp(2.0 * first)
        total += fe.prior.density(theta) ** 2 * var.mean()
    return total / len(np.atleast_2d(theta_ref))
