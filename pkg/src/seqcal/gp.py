"""Gaussian-process emulator over joint inputs ``z = (x, theta)``.

Inputs live on the unit cube. Outputs are standardized internally (zero mean,
unit variance) and every public quantity (means, variances, covariances and
the nugget) is reported back in original output units.

The covariance is the separable Matern-1.5 kernel

    k(z, z') = tau2 * prod_l (1 + a_l |z_l - z'_l|) exp(-a_l |z_l - z'_l|),

with ``a_l = exp(zeta_l)`` the inverse lengthscales.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.linalg.lapack import dpotrf, dpotri
from scipy.optimize import minimize

from .errors import EmulatorSingular

ZETA_BOUNDS = (np.log(1e-2), np.log(1e3))
LOG_TAU2_BOUNDS = (np.log(1e-4), np.log(1e4))
NUGGET_FLOOR = 1e-8
NUGGET_CEIL = 1.0
JITTER_CEIL = 1e-2
VAR_TOL = 1e-8


@dataclass(frozen=True)
class KernelParams:
    """Hyperparameters in standardized output units."""

    log_inv_lengthscales: np.ndarray
    log_scale: float
    nugget: float

    def __post_init__(self):
        zeta = np.atleast_1d(np.asarray(self.log_inv_lengthscales, dtype=float))
        object.__setattr__(self, "log_inv_lengthscales", zeta)
        if not np.all(np.isfinite(zeta)):
            raise ValueError("log inverse lengthscales must be finite")
        if not self.nugget > 0:
            raise ValueError("nugget must be positive")

    @property
    def tau2(self) -> float:
        return float(np.exp(self.log_scale))

    @property
    def inv_lengthscales(self) -> np.ndarray:
        return np.exp(self.log_inv_lengthscales)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.log_inv_lengthscales, [self.log_scale, np.log(self.nugget)]])

    @classmethod
    def from_vector(cls, rho) -> "KernelParams":
        rho = np.asarray(rho, dtype=float)
        return cls(rho[:-2].copy(), float(rho[-2]), float(np.exp(rho[-1])))


def _correlation(A, B, inv_ls):
    """Separable Matern-1.5 correlation between the rows of A and B."""
    prod = np.ones((A.shape[0], B.shape[0]))
    expo = np.zeros_like(prod)
    for l, a in enumerate(inv_ls):
        r = a * np.abs(A[:, l, None] - B[None, :, l])
        prod *= 1.0 + r
        expo += r
    return prod * np.exp(-expo)


def matern15(z, z2, k: KernelParams) -> float:
    """Kernel value between two joint inputs."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    z2 = np.atleast_1d(np.asarray(z2, dtype=float))
    if z.shape != z2.shape or z.shape != k.log_inv_lengthscales.shape:
        raise ValueError(
            f"dimension mismatch: {z.shape}, {z2.shape}, kernel {k.log_inv_lengthscales.shape}"
        )
    return float(k.tau2 * _correlation(z[None, :], z2[None, :], k.inv_lengthscales)[0, 0])


def kernel_matrix(A, B, k: KernelParams) -> np.ndarray:
    """Kernel matrix ``tau2 * C(A, B)`` (no nugget)."""
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    if A.shape[1] != B.shape[1] or A.shape[1] != k.log_inv_lengthscales.size:
        raise ValueError("dimension mismatch between inputs and kernel")
    return k.tau2 * _correlation(A, B, k.inv_lengthscales)


class SimDataset:
    """Append-only store of simulation records ``(z, eta)``.

    Joint inputs are stored as rows ``(x_1..x_q, theta_1..theta_p)`` on the
    unit cube.
    """

    def __init__(self, q: int, p: int, X=None, y=None):
        if q < 1 or p < 1:
            raise ValueError("q and p must be >= 1")
        self.q = int(q)
        self.p = int(p)
        self._X = np.empty((0, q + p))
        self._y = np.empty(0)
        if X is not None:
            self.extend(X, y)

    def __len__(self):
        return self._y.size

    @property
    def X(self) -> np.ndarray:
        return self._X.copy()

    @property
    def y(self) -> np.ndarray:
        return self._y.copy()

    def append(self, z, eta: float):
        z = np.asarray(z, dtype=float).reshape(1, -1)
        if z.shape[1] != self.q + self.p:
            raise ValueError(f"expected a joint input of size {self.q + self.p}")
        self._X = np.vstack([self._X, z])
        self._y = np.append(self._y, float(eta))

    def extend(self, X, y):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if X.shape[0] != y.size:
            raise ValueError("X and y lengths differ")
        for z, eta in zip(X, y):
            self.append(z, eta)

    def copy(self) -> "SimDataset":
        return SimDataset(self.q, self.p, self._X, self._y)


@dataclass
class FieldEmulatorMoments:
    """Emulator mean and covariance of the outputs at ``(x_i^f, theta)``."""

    mean: np.ndarray
    cov: np.ndarray


@dataclass
class FitConfig:
    """Options for hyperparameter estimation.

    ``n_starts`` counts every optimizer start, including the warm start when
    one is supplied.
    """

    n_starts: int = 8
    seed: int = 0
    maxiter: int = 200
    nugget_floor: float = NUGGET_FLOOR
    standardize: bool = True
    extra: dict = field(default_factory=dict)


def _factorize(K, nugget):
    """Cholesky of K + nugget*I with jitter escalation; returns (L, nugget)."""
    n = K.shape[0]
    nug = nugget
    while True:
        try:
            L = np.linalg.cholesky(K + nug * np.eye(n))
            return L, nug
        except np.linalg.LinAlgError:
            if nug >= JITTER_CEIL:
                raise EmulatorSingular(f"kernel matrix not SPD with nugget {nug:g}")
            nug = min(nug * 10.0, JITTER_CEIL)


class Emulator:
    """A GP conditioned on a fixed training set at fixed hyperparameters.

    Instances are immutable after construction. ``condition`` returns a new
    emulator with an extra training point and the same hyperparameters and
    output scaling.
    """

    def __init__(self, X, y, kernel: KernelParams, offset: float = 0.0, scale: float = 1.0):
        self.X = np.atleast_2d(np.array(X, dtype=float))
        self.y = np.array(y, dtype=float).ravel()
        if self.X.shape[0] != self.y.size:
            raise ValueError("X and y lengths differ")
        if self.X.shape[1] != kernel.log_inv_lengthscales.size:
            raise ValueError("kernel dimension does not match inputs")
        self.offset = float(offset)
        self.scale = float(scale)
        self._ys = (self.y - self.offset) / self.scale
        K = kernel_matrix(self.X, self.X, kernel)
        L, nug = _factorize(K, kernel.nugget)
        if nug != kernel.nugget:
            kernel = KernelParams(kernel.log_inv_lengthscales, kernel.log_scale, nug)
        self.kernel = kernel
        self.chol_K = L
        self.alpha = cho_solve((L, True), self._ys)
        self.X.flags.writeable = False
        self.y.flags.writeable = False

    def __repr__(self):
        return (
            f"Emulator(n={self.n}, tau2={self.tau2:.4g}, nugget={self.nugget:.3g}, "
            f"inv_ls={np.round(self.kernel.inv_lengthscales, 3)})"
        )

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def tau2(self) -> float:
        """Prior variance in original output units."""
        return self.kernel.tau2 * self.scale**2

    @property
    def nugget(self) -> float:
        """Nugget in original output units."""
        return self.kernel.nugget * self.scale**2

    @property
    def prior_mean(self) -> float:
        return self.offset

    def _whiten(self, Z):
        kz = kernel_matrix(self.X, Z, self.kernel)
        return kz, solve_triangular(self.chol_K, kz, lower=True)

    def _clip_var(self, var):
        tol = VAR_TOL * self.tau2
        if np.any(var < -tol):
            raise EmulatorSingular(f"predictive variance {var.min():.3g} below -{tol:.3g}")
        return np.maximum(var, 0.0)

    def predict(self, Z, return_var: bool = True):
        """Predictive mean and variance at the rows of Z (original units)."""
        Z = np.asarray(Z, dtype=float)
        single = Z.ndim == 1
        Z = np.atleast_2d(Z)
        kz, V = self._whiten(Z)
        mean = self.offset + self.scale * (kz.T @ self.alpha)
        if not return_var:
            return mean[0] if single else mean
        var = self.scale**2 * (self.kernel.tau2 - np.einsum("ij,ij->j", V, V))
        var = self._clip_var(var)
        if single:
            return float(mean[0]), float(var[0])
        return mean, var

    def whiten(self, Z) -> np.ndarray:
        """``L^-1 k(X, Z)`` for reuse across many covariance evaluations."""
        return self._whiten(np.atleast_2d(np.asarray(Z, dtype=float)))[1]

    def cov_whitened(self, Za, Va, Zb, Vb) -> np.ndarray:
        """``cov`` from precomputed ``whiten`` outputs."""
        return self.scale**2 * (kernel_matrix(Za, Zb, self.kernel) - Va.T @ Vb)

    def var_whitened(self, V) -> np.ndarray:
        return self._clip_var(self.scale**2 * (self.kernel.tau2 - np.einsum("ij,ij->j", V, V)))

    def cov(self, Za, Zb) -> np.ndarray:
        """Posterior cross-covariance matrix ``cov_t(Za_i, Zb_j)``."""
        Za = np.atleast_2d(np.asarray(Za, dtype=float))
        Zb = np.atleast_2d(np.asarray(Zb, dtype=float))
        _, Va = self._whiten(Za)
        _, Vb = self._whiten(Zb)
        prior = kernel_matrix(Za, Zb, self.kernel)
        return self.scale**2 * (prior - Va.T @ Vb)

    def predict_field(self, theta, field_x) -> FieldEmulatorMoments:
        """Mean vector and PSD-clipped covariance at ``(x_i^f, theta)``."""
        Zf = joint(field_x, theta)
        mean, _ = self.predict(Zf)
        S = self.cov(Zf, Zf)
        return FieldEmulatorMoments(mean, psd_clip(S, self.tau2))

    def fantasy_cross_cov(self, z_star, theta, field_x) -> np.ndarray:
        """Covariance reduction ``phi`` at ``(x_i^f, theta)`` from observing z*."""
        Zf = joint(field_x, theta)
        z_star = np.atleast_2d(z_star)
        c = self.cov(Zf, z_star)[:, 0]
        _, v = self.predict(z_star)
        denom = v[0] + self.nugget
        assert denom > 0
        return np.outer(c, c) / denom

    def fantasy_update_mean(self, z, z_star, eta_star: float):
        """Predictive mean at z after a hypothetical observation ``(z*, eta*)``."""
        z = np.asarray(z, dtype=float)
        single = z.ndim == 1
        Z = np.atleast_2d(z)
        z_star = np.atleast_2d(z_star)
        m = self.predict(Z, return_var=False)
        m_star, v_star = self.predict(z_star)
        c = self.cov(Z, z_star)[:, 0]
        out = m + c * (eta_star - m_star[0]) / (v_star[0] + self.nugget)
        return float(out[0]) if single else out

    def fantasy_update_var(self, z, z_star):
        """Predictive variance at z after observing anything at z*."""
        z = np.asarray(z, dtype=float)
        single = z.ndim == 1
        Z = np.atleast_2d(z)
        z_star = np.atleast_2d(z_star)
        _, v = self.predict(Z)
        _, v_star = self.predict(z_star)
        c = self.cov(Z, z_star)[:, 0]
        out = v - c**2 / (v_star[0] + self.nugget)
        return float(out[0]) if single else out

    def condition(self, z_new, eta_new) -> "Emulator":
        """Refit with extra data at fixed hyperparameters and output scaling."""
        z_new = np.atleast_2d(z_new)
        X = np.vstack([self.X, z_new])
        y = np.concatenate([self.y, np.atleast_1d(eta_new)])
        return Emulator(X, y, self.kernel, self.offset, self.scale)


def joint(field_x, theta) -> np.ndarray:
    """Stack design rows with a common parameter vector."""
    Xf = np.asarray(field_x, dtype=float)
    if Xf.ndim == 1:
        # a flat list is read as d scalar design inputs (q = 1)
        Xf = Xf.reshape(-1, 1)
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    return np.hstack([Xf, np.broadcast_to(theta, (Xf.shape[0], theta.size))])


def psd_clip(S, tau2: float = 1.0) -> np.ndarray:
    """Symmetrize S and floor its eigenvalues at zero."""
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    if w.min() >= 0:
        return S
    if w.min() < -1e-6 * max(tau2, np.abs(w).max()):
        raise EmulatorSingular(f"field covariance has eigenvalue {w.min():.3g}")
    return (V * np.maximum(w, 0.0)) @ V.T


def predict(e: Emulator, z):
    return e.predict(z)


def predict_field(e: Emulator, theta, field_x) -> FieldEmulatorMoments:
    return e.predict_field(theta, field_x)


def fantasy_cross_cov(e: Emulator, z_star, theta, field_x) -> np.ndarray:
    return e.fantasy_cross_cov(z_star, theta, field_x)


def fantasy_update_mean(e: Emulator, z, z_star, eta_star):
    return e.fantasy_update_mean(z, z_star, eta_star)


# -- hyperparameter fitting ------------------------------------------------


def _bounds(dim, nugget_floor):
    b = [ZETA_BOUNDS] * dim
    b.append(LOG_TAU2_BOUNDS)
    b.append((np.log(nugget_floor), np.log(NUGGET_CEIL)))
    return b


def _pair_diffs(X):
    """Absolute coordinate differences over the strict upper triangle."""
    iu, ju = np.triu_indices(X.shape[0], k=1)
    return iu, ju, np.ascontiguousarray(np.abs(X[iu] - X[ju]).T)


def _negloglik(rho, pairs, ys):
    """Negative log marginal likelihood and its gradient.

    ``pairs`` is the output of ``_pair_diffs`` (differences stored as a
    ``(dim, n_pairs)`` array); the diagonal of the
    correlation matrix is 1 and contributes nothing to the lengthscale
    gradient, so only the upper triangle is touched.
    """
    iu, ju, absdiff = pairs
    n = ys.size
    dim = absdiff.shape[0]
    a = np.exp(rho[:dim])
    tau2 = np.exp(rho[dim])
    nug = np.exp(rho[dim + 1])
    R = absdiff * a[:, None]
    onep = 1.0 + R
    c = np.prod(onep, axis=0) * np.exp(-(a @ absdiff))
    K = np.empty((n, n))
    K[iu, ju] = tau2 * c
    K[ju, iu] = tau2 * c
    K[np.diag_indices(n)] = tau2 + nug
    L, info = dpotrf(K, lower=1, clean=1)
    if info != 0:
        return 1e25, np.zeros_like(rho)
    alpha = cho_solve((L, True), ys)
    nll = 0.5 * ys @ alpha + np.log(np.diag(L)).sum() + 0.5 * n * np.log(2 * np.pi)
    Kinv, info = dpotri(L, lower=1)
    if info != 0:
        return 1e25, np.zeros_like(rho)
    # dpotri fills the lower triangle only
    w_off = alpha[iu] * alpha[ju] - Kinv[ju, iu]
    w_diag = alpha**2 - np.diag(Kinv)
    tcw = tau2 * c * w_off
    grad = np.empty_like(rho)
    grad[:dim] = -2.0 * ((R * R / onep) @ tcw)
    grad[dim] = 2.0 * tcw.sum() + tau2 * w_diag.sum()
    grad[dim + 1] = nug * w_diag.sum()
    return nll, -0.5 * grad


def _random_start(rng, dim, nugget_floor):
    zeta = rng.uniform(np.log(0.5), np.log(20.0), size=dim)
    log_tau2 = rng.uniform(np.log(0.3), np.log(3.0))
    log_nug = rng.uniform(np.log(max(nugget_floor, 1e-7)), np.log(1e-2))
    return np.concatenate([zeta, [log_tau2, log_nug]])


def fit(data, config: FitConfig | None = None, warm_start: KernelParams | None = None) -> Emulator:
    """Fit hyperparameters by multi-start L-BFGS-B on the log marginal likelihood.

    ``data`` is a SimDataset or an ``(X, y)`` pair.
    """
    config = config or FitConfig()
    if isinstance(data, SimDataset):
        X, y = data.X, data.y
    else:
        X, y = (np.asarray(a, dtype=float) for a in data)
        X = np.atleast_2d(X)
    n, dim = X.shape
    if n < 2:
        raise ValueError("need at least two simulation records to fit")

    offset = float(np.mean(y)) if config.standardize else 0.0
    scale = float(np.std(y)) if config.standardize else 1.0
    if np.ptp(y) == 0.0:
        # every output identical: pin the prior at the floor so the emulator is flat
        scale = 1.0
        k = KernelParams(np.zeros(dim), np.log(config.nugget_floor), config.nugget_floor)
        return Emulator(X, y, k, float(y[0]), scale)
    if scale == 0.0:
        scale = 1.0
    ys = (y - offset) / scale

    pairs = _pair_diffs(X)
    bounds = _bounds(dim, config.nugget_floor)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    rng = np.random.default_rng(config.seed)
    starts = []
    if warm_start is not None:
        starts.append(np.clip(warm_start.to_vector(), lo, hi))
    while len(starts) < max(config.n_starts, 1):
        starts.append(_random_start(rng, dim, config.nugget_floor))

    best_f, best_x = np.inf, None
    for x0 in starts:
        res = minimize(
            _negloglik, x0, args=(pairs, ys), jac=True, method="L-BFGS-B",
            bounds=bounds, options={"maxiter": config.maxiter},
        )
        if np.isfinite(res.fun) and res.fun < best_f:
            best_f, best_x = float(res.fun), res.x
    if best_x is None:
        raise EmulatorSingular("hyperparameter optimization failed from every start")
    return Emulator(X, y, KernelParams.from_vector(best_x), offset, scale)
