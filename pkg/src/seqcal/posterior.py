"""Moments of the unnormalized posterior under a GP emulator.

For a parameter ``theta`` the emulator gives ``eta(theta) ~ MVN(mu, S)`` at the
field design inputs. With Gaussian residual error ``Sigma`` the unnormalized
posterior ``p(y|theta) p(theta)`` is then itself random, with

    E   = f_N(y; mu, Sigma + S) p(theta)
    Var = [f_N(y; mu, Sigma/2 + S) / (2^d pi^(d/2) |Sigma|^(1/2))
           - f_N(y; mu, Sigma + S)^2] p(theta)^2

Everything is evaluated in log space and exponentiated last.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from .errors import CovarianceSingular, NonPositiveDeterminant
from .gp import FieldEmulatorMoments, psd_clip

LOG2PI = np.log(2.0 * np.pi)


@dataclass
class PriorSpec:
    """Uniform prior on a box in scaled parameter space."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        self.upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if np.any(self.upper <= self.lower):
            raise ValueError("empty prior box")

    @classmethod
    def unit(cls, p: int) -> "PriorSpec":
        return cls(np.zeros(p), np.ones(p))

    @property
    def p(self) -> int:
        return self.lower.size

    def density(self, theta) -> np.ndarray | float:
        theta = np.asarray(theta, dtype=float)
        inside = np.all((theta >= self.lower) & (theta <= self.upper), axis=-1)
        dens = inside / np.prod(self.upper - self.lower)
        return float(dens) if np.ndim(dens) == 0 else dens

    def sample(self, rng, n: int) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(n, self.p))


@dataclass(frozen=True)
class DiscrepancyParams:
    """Hyperparameters of ``Sigma^e_ij = s_eps2 [i=j] + s_b2 exp(-lam ||x_i - x_j||_1)``."""

    sigma_eps2: float
    sigma_b2: float
    lam: float
    fallback: bool = False

    def cov(self, xa, xb=None) -> np.ndarray:
        xa = _as_rows(xa)
        xb = xa if xb is None else _as_rows(xb)
        dist = np.abs(xa[:, None, :] - xb[None, :, :]).sum(axis=2)
        out = self.sigma_b2 * np.exp(-self.lam * dist)
        if xb is xa:
            out[np.diag_indices(xa.shape[0])] += self.sigma_eps2
        return out


def _as_rows(x):
    x = np.asarray(x, dtype=float)
    return x.reshape(-1, 1) if x.ndim == 1 else x


@dataclass
class FieldExperiment:
    """Field observations ``y`` at design inputs ``field_x`` (rows, scaled).

    ``Sigma`` is the residual covariance used by every density evaluation.
    When the error variance is known, ``noise_var`` holds it and Sigma is
    ``noise_var * I``. When a discrepancy covariance has been fitted, it is
    stored in ``discrepancy`` and Sigma is assembled from it.
    """

    field_x: np.ndarray
    y: np.ndarray
    Sigma: np.ndarray
    prior: PriorSpec
    noise_var: float | None = None
    discrepancy: DiscrepancyParams | None = None
    _unique: tuple = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.field_x = _as_rows(self.field_x)
        self.y = np.atleast_1d(np.asarray(self.y, dtype=float))
        self.Sigma = np.atleast_2d(np.asarray(self.Sigma, dtype=float))
        d = self.y.size
        if self.field_x.shape[0] != d or self.Sigma.shape != (d, d):
            raise ValueError("field_x, y and Sigma sizes disagree")
        if not np.allclose(self.Sigma, self.Sigma.T):
            raise ValueError("Sigma must be symmetric")

    @classmethod
    def with_noise(cls, field_x, y, noise_var: float, prior: PriorSpec):
        y = np.atleast_1d(y)
        return cls(field_x, y, noise_var * np.eye(y.size), prior, noise_var=noise_var)

    @property
    def d(self) -> int:
        return self.y.size

    @property
    def q(self) -> int:
        return self.field_x.shape[1]

    def unique_design(self):
        """Unique field design rows and the index map back to all d rows."""
        if self._unique is None:
            uniq, inverse = np.unique(self.field_x, axis=0, return_inverse=True)
            self._unique = (uniq, np.asarray(inverse).ravel())
        return self._unique

    def with_discrepancy(self, params: DiscrepancyParams) -> "FieldExperiment":
        return replace(self, Sigma=params.cov(self.field_x), discrepancy=params)

    def augmented_noise(self, x_new):
        """Residual cross-covariances between x_new rows and the field rows.

        Returns ``(cross, var)`` with ``cross`` of shape (m, d) and ``var``
        of shape (m,), used to grow Sigma by one hypothetical field point.
        """
        x_new = _as_rows(x_new)
        if self.discrepancy is not None:
            cross = self.discrepancy.cov(x_new, self.field_x)
            var = np.full(x_new.shape[0], self.discrepancy.sigma_eps2 + self.discrepancy.sigma_b2)
            return cross, var
        s2 = self.noise_var if self.noise_var is not None else float(np.mean(np.diag(self.Sigma)))
        return np.zeros((x_new.shape[0], self.d)), np.full(x_new.shape[0], s2)


@dataclass
class PosteriorMoments:
    mean: float
    var: float


def _chol(C):
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError as err:
        raise CovarianceSingular("covariance is not positive definite") from err


def mvn_logpdf(r, C) -> float:
    """log f_N(r; 0, C) via Cholesky."""
    r = np.atleast_1d(r)
    L = _chol(np.atleast_2d(C))
    g = np.linalg.solve(L, r) if r.size > 1 else r / L[0, 0]
    return float(-0.5 * r.size * LOG2PI - np.log(np.diag(L)).sum() - 0.5 * g @ g)


def logdet(C) -> float:
    return float(2.0 * np.log(np.diag(_chol(np.atleast_2d(C)))).sum())


def _prepare(fm: FieldEmulatorMoments, fe: FieldExperiment):
    S = psd_clip(np.atleast_2d(fm.cov))
    r = fe.y - np.atleast_1d(fm.mean)
    return r, S


def log_second_moment(fm, fe) -> float:
    """log E[p(y|theta)^2] = log f_N(y; mu, Sigma/2 + S) - log(2^d pi^(d/2) |Sigma|^(1/2))."""
    r, S = _prepare(fm, fe)
    d = r.size
    return (
        mvn_logpdf(r, 0.5 * fe.Sigma + S)
        - d * np.log(2.0) - 0.5 * d * np.log(np.pi) - 0.5 * logdet(fe.Sigma)
    )


def log_likelihood_mean(fm, fe) -> float:
    """log E[p(y|theta)] = log f_N(y; mu, Sigma + S)."""
    r, S = _prepare(fm, fe)
    return mvn_logpdf(r, fe.Sigma + S)


def posterior_mean(fm: FieldEmulatorMoments, fe: FieldExperiment, theta) -> float:
    prior = fe.prior.density(theta)
    if prior == 0:
        return 0.0
    return float(np.exp(log_likelihood_mean(fm, fe)) * prior)


def _diff_exp(a, b):
    """exp(a) - exp(b) computed without cancellation, floored at zero."""
    if b >= a:
        return 0.0
    return float(np.exp(a) * -np.expm1(b - a))


def posterior_var(fm: FieldEmulatorMoments, fe: FieldExperiment, theta) -> float:
    prior = fe.prior.density(theta)
    if prior == 0:
        return 0.0
    return _diff_exp(log_second_moment(fm, fe), 2.0 * log_likelihood_mean(fm, fe)) * prior**2


def posterior_moments(fm, fe, theta) -> PosteriorMoments:
    return PosteriorMoments(posterior_mean(fm, fe, theta), posterior_var(fm, fe, theta))


def log_fantasy_term(fm: FieldEmulatorMoments, fe: FieldExperiment, phi) -> float:
    """log of f_N(y; mu, (Sigma + S + phi)/2) / (2^d pi^(d/2) |Sigma + S - phi|^(1/2)).

    Raises NonPositiveDeterminant when ``Sigma + S - phi`` is numerically
    singular (Cholesky pivot below 1e-10 relative to ``Sigma + S``).
    """
    r, S = _prepare(fm, fe)
    phi = np.atleast_2d(phi)
    d = r.size
    M = fe.Sigma + S - phi
    try:
        LM = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as err:
        raise NonPositiveDeterminant("Sigma + S - phi is not positive definite") from err
    piv = np.diag(LM) ** 2
    if piv.min() <= 1e-10 * np.diag(fe.Sigma + S).max():
        raise NonPositiveDeterminant("Sigma + S - phi is numerically singular")
    logdet_M = float(np.log(piv).sum())
    if logdet_M <= np.log(1e-300):
        raise NonPositiveDeterminant("|Sigma + S - phi| underflows")
    return (
        mvn_logpdf(r, 0.5 * (fe.Sigma + S + phi))
        - d * np.log(2.0) - 0.5 * d * np.log(np.pi) - 0.5 * logdet_M
    )


def expected_posterior_var(fm: FieldEmulatorMoments, fe: FieldExperiment, theta, phi) -> float:
    """Expected variance of p(y|theta) after observing a candidate with reduction phi.

    The prior factor is not applied; ``theta`` is accepted for signature
    symmetry with the other moment functions.
    """
    first = log_second_moment(fm, fe)
    return _diff_exp(first, log_fantasy_term(fm, fe, phi))


# -- discrepancy / noise covariance ------------------------------------------


def _discrepancy_nll(rho, dist, r):
    s_eps2, s_b2, lam = np.exp(rho)
    E = np.exp(-lam * dist)
    C = s_b2 * E
    C[np.diag_indices(r.size)] += s_eps2
    try:
        L = np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        return 1e25, np.zeros(3)
    Linv = np.linalg.inv(L)
    Cinv = Linv.T @ Linv
    alpha = Cinv @ r
    nll = 0.5 * r @ alpha + np.log(np.diag(L)).sum() + 0.5 * r.size * LOG2PI
    W = np.outer(alpha, alpha) - Cinv
    grad = np.array([
        s_eps2 * np.trace(W),
        s_b2 * np.sum(W * E),
        np.sum(W * (-lam * dist * s_b2 * E)),
    ])
    return nll, -0.5 * grad


def fit_discrepancy(fe: FieldExperiment, residuals, n_starts: int = 6, seed: int = 0,
                    var_floor: float = 1e-6) -> DiscrepancyParams:
    """Maximum-likelihood (sigma_eps2, sigma_b2, lam) for MVN(0, Sigma^e) residuals.

    Variances are bounded below by ``var_floor`` and above by
    ``10 * max(mean(r^2), var_floor)``; ``lam`` lies in [1e-2, 1e2] on the
    unit design cube.
    """
    r = np.asarray(residuals, dtype=float)
    if r.size < 3:
        raise ValueError("need at least three residuals to fit the discrepancy covariance")
    x = fe.field_x
    dist = np.abs(x[:, None, :] - x[None, :, :]).sum(axis=2)
    vmax = 10.0 * max(float(np.mean(r**2)), var_floor)
    bounds = [
        (np.log(var_floor), np.log(vmax)),
        (np.log(var_floor), np.log(vmax)),
        (np.log(1e-2), np.log(1e2)),
    ]
    rng = np.random.default_rng(seed)
    ms = max(float(np.mean(r**2)), var_floor)
    starts = [np.array([np.log(ms), np.log(var_floor * 10), 0.0])]
    starts.append(np.array([np.log(0.5 * ms), np.log(0.5 * ms), 0.0]))
    while len(starts) < n_starts:
        starts.append(np.array([rng.uniform(*b) for b in bounds]))
    best = None
    for x0 in starts:
        x0 = np.clip(x0, [b[0] for b in bounds], [b[1] for b in bounds])
        try:
            res = minimize(_discrepancy_nll, x0, args=(dist, r), jac=True,
                           method="L-BFGS-B", bounds=bounds)
        except (ValueError, np.linalg.LinAlgError):
            continue
        if np.isfinite(res.fun) and res.fun < 1e24 and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        warnings.warn("discrepancy fit failed from every start; using sample variance")
        return DiscrepancyParams(max(float(np.var(r)), var_floor), 0.0, 1.0, fallback=True)
    s_eps2, s_b2, lam = np.exp(best.x)
    return DiscrepancyParams(float(s_eps2), float(s_b2), float(lam))


def discrepancy_loglik(params: DiscrepancyParams, field_x, residuals) -> float:
    C = params.cov(field_x)
    return mvn_logpdf(np.asarray(residuals, dtype=float), C)
