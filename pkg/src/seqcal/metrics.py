"""Accuracy metrics for posterior and field predictions, and spread of acquisitions."""
from __future__ import annotations

import numpy as np

from .gp import joint
from .posterior import FieldExperiment, mvn_logpdf, posterior_mean

DEFAULT_ALPHA = 0.10


def true_posterior(fe: FieldExperiment, theta_ref, true_eta) -> np.ndarray:
    """Unnormalized posterior f_N(y; eta(x^f, theta), Sigma) p(theta) with the true simulator.

    ``true_eta(Z)`` maps scaled joint rows to outputs.
    """
    theta_ref = np.asarray(theta_ref, dtype=float).reshape(len(theta_ref), -1)
    out = np.empty(theta_ref.shape[0])
    for i, th in enumerate(theta_ref):
        prior = fe.prior.density(th)
        if prior == 0:
            out[i] = 0.0
            continue
        eta = np.asarray(true_eta(joint(fe.field_x, th)), dtype=float)
        out[i] = np.exp(mvn_logpdf(fe.y - eta, fe.Sigma)) * prior
    return out


def posterior_predictions(e, fe: FieldExperiment, theta_ref) -> np.ndarray:
    theta_ref = np.asarray(theta_ref, dtype=float).reshape(len(theta_ref), -1)
    return np.array([posterior_mean(e.predict_field(th, fe.field_x), fe, th) for th in theta_ref])


def mad_p(e, fe: FieldExperiment, theta_ref, true_model=None, truth=None) -> float:
    """Mean absolute deviation between true and predicted unnormalized posteriors.

    Pass either ``true_model`` (a callable on scaled joint rows) or the
    precomputed ``truth`` over ``theta_ref``.
    """
    if truth is None:
        if true_model is None:
            raise ValueError("mad_p needs true_model or truth")
        truth = true_posterior(fe, theta_ref, true_model)
    return float(np.mean(np.abs(np.asarray(truth) - posterior_predictions(e, fe, theta_ref))))


def field_predictions(e, x_ref, theta_hat) -> np.ndarray:
    return np.asarray(e.predict(joint(x_ref, theta_hat), return_var=False))


def mad_y(e, fe: FieldExperiment, x_ref, theta_hat, true_field_mean) -> float:
    """Mean absolute error of the field prediction m_t(x, theta_hat) over ``x_ref``.

    ``true_field_mean`` is an array over ``x_ref`` or a callable on it.
    """
    x_ref = np.asarray(x_ref, dtype=float)
    truth = true_field_mean(x_ref) if callable(true_field_mean) else np.asarray(true_field_mean)
    return float(np.mean(np.abs(truth - field_predictions(e, x_ref, theta_hat))))


def _check(values):
    values = np.asarray(values, dtype=float).ravel()
    if values.size < 2:
        raise ValueError("need at least two values")
    return values


def interval_score(values, alpha: float = DEFAULT_ALPHA, a: float = 0.0) -> float:
    """Interval score of the central (1 - alpha) empirical interval against ``a``."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    values = _check(values)
    lo, hi = np.quantile(values, [alpha / 2.0, 1.0 - alpha / 2.0])
    score = hi - lo
    if a < lo:
        score += 2.0 / alpha * (lo - a)
    elif a > hi:
        score += 2.0 / alpha * (a - hi)
    return float(score)


def quantile_width(values, lo: float = 0.05, hi: float = 0.95) -> float:
    values = _check(values)
    ql, qh = np.quantile(values, [lo, hi])
    return float(max(qh - ql, 0.0))


def interval_scores(theta_acquired, a, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """Per-dimension interval scores for an (n, p) array of acquired parameters."""
    theta_acquired = np.atleast_2d(np.asarray(theta_acquired, dtype=float))
    a = np.atleast_1d(a)
    return np.array([interval_score(theta_acquired[:, j], alpha, a[j])
                     for j in range(theta_acquired.shape[1])])


def quantile_widths(x_acquired, lo: float = 0.05, hi: float = 0.95) -> np.ndarray:
    x_acquired = np.atleast_2d(np.asarray(x_acquired, dtype=float))
    return np.array([quantile_width(x_acquired[:, j], lo, hi) for j in range(x_acquired.shape[1])])
