"""Acquisition scores over a discrete candidate list.

Every score is oriented so that larger is better. The two EIVAR criteria
(``score_Ap`` and ``score_Ay``) are evaluated for a whole candidate list at
once: the per-parameter field moments and their Cholesky factors are built
once per iteration, and each candidate only contributes a rank-1 term

    phi = u u^T,  u_i = cov_t(z_i^f, z*) / sqrt(var_t(z*) + nugget),

so with ``A = Sigma + S`` every determinant and quadratic form follows from
``s = u^T A^-1 u`` and ``h = u^T A^-1 r`` (matrix determinant lemma and
Sherman-Morrison).

The EIVAR scores are averages of densities that can underflow, so the
vectorized scorers return log scores; ``select`` only needs the ordering.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.spatial.distance import pdist
from scipy.special import logsumexp
from scipy.stats import qmc

from .errors import AcquisitionFailed
from .gp import Emulator, joint, kernel_matrix, psd_clip
from .posterior import FieldExperiment, PriorSpec

LOG2 = np.log(2.0)
LOGPI = np.log(np.pi)
LOG2PI = np.log(2.0 * np.pi)
SINGULAR_REL = 1e-10


@dataclass
class AcquisitionContext:
    """Candidates and reference sets for one iteration (scaled units)."""

    candidates: np.ndarray
    theta_ref: np.ndarray | None = None
    x_ref: np.ndarray | None = None
    theta_hat: np.ndarray | None = None
    prior: PriorSpec | None = None
    z_ref: np.ndarray | None = None

    def __post_init__(self):
        self.candidates = np.atleast_2d(np.asarray(self.candidates, dtype=float))
        if self.theta_ref is not None:
            self.theta_ref = _rows(self.theta_ref)
        if self.x_ref is not None:
            self.x_ref = _rows(self.x_ref)
        if self.z_ref is not None:
            self.z_ref = np.atleast_2d(np.asarray(self.z_ref, dtype=float))
        if self.theta_hat is not None:
            self.theta_hat = np.atleast_1d(np.asarray(self.theta_hat, dtype=float))


def _rows(a):
    a = np.asarray(a, dtype=float)
    return a.reshape(-1, 1) if a.ndim == 1 else a


def _chol(M):
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        return None


def _solve(L, B):
    return solve_triangular(L, B, lower=True, check_finite=False)


def _log_term2(d, logdetA, q, s, h):
    """log f_N(r; 0, (A + uu^T)/2) - log(2^d pi^(d/2) |A - uu^T|^(1/2)).

    Vectorized over candidates (``s`` and ``h``). Returns NaN where
    ``A - uu^T`` is numerically singular, so the caller can substitute.
    """
    one_minus = 1.0 - s
    bad = one_minus <= SINGULAR_REL
    one_minus = np.where(bad, 1.0, one_minus)
    logdetN = -d * LOG2 + logdetA + np.log1p(s)
    quad = 2.0 * (q - h**2 / (1.0 + s))
    logdetM = logdetA + np.log(one_minus)
    out = (
        -0.5 * d * LOG2PI - 0.5 * logdetN - 0.5 * quad
        - d * LOG2 - 0.5 * d * LOGPI - 0.5 * logdetM
    )
    return np.where(bad, np.nan, out)


def _log_first_term(d, r, L_half, logdet_sigma):
    """log f_N(r; 0, Sigma/2 + S) - log(2^d pi^(d/2) |Sigma|^(1/2)); L_half factors Sigma/2 + S."""
    g = _solve(L_half, r)
    return (
        -0.5 * d * LOG2PI - np.log(np.diag(L_half)).sum() - 0.5 * g @ g
        - d * LOG2 - 0.5 * d * LOGPI - 0.5 * logdet_sigma
    )


class _Candidates:
    """Whitened candidate inputs and their predictive variances."""

    def __init__(self, e: Emulator, Z):
        self.Z = np.atleast_2d(np.asarray(Z, dtype=float))
        self.V = e.whiten(self.Z)
        self.var = e.var_whitened(self.V)
        self.denom = self.var + e.nugget
        self.inv_sd = 1.0 / np.sqrt(self.denom)


class ThetaCache:
    """Per-parameter field moments over Theta_ref, built once per iteration.

    For each reference parameter this holds the factor of ``Sigma + S(theta)``,
    the whitened residual and the log of the no-information first term. Field
    design rows are handled through their unique values and expanded back to
    all d rows, so replicated designs cost nothing extra.
    """

    def __init__(self, e: Emulator, fe: FieldExperiment, theta_ref, prior: PriorSpec | None = None):
        self.e = e
        self.fe = fe
        self.theta_ref = _rows(theta_ref)
        prior = prior or fe.prior
        uniq, self.inv = fe.unique_design()
        self.nu = uniq.shape[0]
        d = fe.d
        T = self.theta_ref.shape[0]
        self.Zu = np.vstack([joint(uniq, th) for th in self.theta_ref])
        self.Vu = e.whiten(self.Zu)
        mean_u = e.offset + e.scale * (kernel_cross(e, self.Zu).T @ e.alpha)
        logdet_sigma = 2.0 * np.log(np.diag(np.linalg.cholesky(fe.Sigma))).sum()
        with np.errstate(divide="ignore"):
            self.log_prior2 = 2.0 * np.log(np.atleast_1d(prior.density(self.theta_ref)))
        self.L = np.empty((T, d, d))
        self.g = np.empty((T, d))
        self.logdetA = np.empty(T)
        self.q = np.empty(T)
        self.log_first = np.empty(T)
        self.valid = np.ones(T, dtype=bool)
        for t in range(T):
            sl = slice(t * self.nu, (t + 1) * self.nu)
            Su = e.cov_whitened(self.Zu[sl], self.Vu[:, sl], self.Zu[sl], self.Vu[:, sl])
            S = psd_clip(Su[np.ix_(self.inv, self.inv)], e.tau2)
            r = fe.y - mean_u[sl][self.inv]
            L = _chol(fe.Sigma + S)
            Lh = _chol(0.5 * fe.Sigma + S)
            if L is None or Lh is None or not np.isfinite(self.log_prior2[t]):
                self.valid[t] = False
                continue
            self.L[t] = L
            self.g[t] = _solve(L, r)
            self.logdetA[t] = 2.0 * np.log(np.diag(L)).sum()
            self.q[t] = self.g[t] @ self.g[t]
            self.log_first[t] = _log_first_term(d, r, Lh, logdet_sigma)

    def log_terms(self, cands: _Candidates) -> np.ndarray:
        """(T, m) array of log p(theta)^2 + log second term, NaN for skipped theta."""
        e, d = self.e, self.fe.d
        C = e.cov_whitened(self.Zu, self.Vu, cands.Z, cands.V) * cands.inv_sd
        out = np.full((self.theta_ref.shape[0], cands.Z.shape[0]), np.nan)
        for t in np.flatnonzero(self.valid):
            U = C[t * self.nu:(t + 1) * self.nu][self.inv]
            W = _solve(self.L[t], U)
            s = np.einsum("ij,ij->j", W, W)
            h = self.g[t] @ W
            lt = _log_term2(d, self.logdetA[t], self.q[t], s, h)
            # phi never exceeds S, so the first term bounds the second from above
            lt = np.where(np.isnan(lt), self.log_first[t], np.minimum(lt, self.log_first[t]))
            out[t] = lt + self.log_prior2[t]
        return out


def kernel_cross(e: Emulator, Z):
    return kernel_matrix(e.X, Z, e.kernel)


def _log_mean_exp(terms):
    """Mean over axis 0 in log space, ignoring NaN rows."""
    rows = ~np.all(np.isnan(terms), axis=1)
    if not rows.any():
        return np.full(terms.shape[1], np.nan)
    t = terms[rows]
    return logsumexp(t, axis=0) - np.log(t.shape[0])


def log_scores_Ap(e: Emulator, fe: FieldExperiment, ctx: AcquisitionContext,
                  cache: ThetaCache | None = None, candidates=None) -> np.ndarray:
    """Log of the Theta_ref average of p(theta)^2 times the fantasy second term."""
    if ctx.theta_ref is None or ctx.theta_ref.shape[0] == 0:
        raise ValueError("score_Ap needs a nonempty theta_ref")
    cache = cache or ThetaCache(e, fe, ctx.theta_ref, ctx.prior)
    cands = _Candidates(e, ctx.candidates if candidates is None else candidates)
    return _log_mean_exp(cache.log_terms(cands))


class XCache:
    """Augmented (d+1)-dimensional systems at theta_hat for every x in X_ref.

    The field block is factored once; each reference x adds one row, handled
    by a bordered Cholesky update. The plug-in observation at x equals the
    emulator mean, so its residual is zero.
    """

    def __init__(self, e: Emulator, fe: FieldExperiment, x_ref, theta_hat):
        self.e = e
        self.fe = fe
        x_ref = _rows(x_ref)
        uniq, inv = fe.unique_design()
        self.inv = inv
        d = fe.d
        self.d1 = d + 1
        self.Zf = joint(uniq, theta_hat)
        self.Vf = e.whiten(self.Zf)
        self.Zx = joint(x_ref, theta_hat)
        self.Vx = e.whiten(self.Zx)
        mean_f = e.offset + e.scale * (kernel_cross(e, self.Zf).T @ e.alpha)
        r = fe.y - mean_f[inv]
        Su = e.cov_whitened(self.Zf, self.Vf, self.Zf, self.Vf)
        S = psd_clip(Su[np.ix_(inv, inv)], e.tau2)
        Sx = e.cov_whitened(self.Zf, self.Vf, self.Zx, self.Vx)[inv]  # (d, X)
        vx = e.var_whitened(self.Vx)
        noise_cross, noise_var = fe.augmented_noise(x_ref)
        noise_cross = noise_cross.T  # (d, X)

        def bordered(M, col, diag):
            L = np.linalg.cholesky(M)
            l = _solve(L, col)
            piv2 = diag - np.einsum("ij,ij->j", l, l)
            return L, l, piv2

        # Sigma^x, A^x = Sigma^x + S^x and B^x = Sigma^x / 2 + S^x
        Ls, ls, ps2 = bordered(fe.Sigma, noise_cross, noise_var)
        La, la, pa2 = bordered(fe.Sigma + S, noise_cross + Sx, noise_var + vx)
        Lb, lb, pb2 = bordered(0.5 * fe.Sigma + S, 0.5 * noise_cross + Sx, 0.5 * noise_var + vx)
        tol = SINGULAR_REL * (noise_var + vx)
        self.valid = (ps2 > tol) & (pa2 > tol) & (pb2 > tol)
        ps, pa, pb = (np.sqrt(np.where(self.valid, v, 1.0)) for v in (ps2, pa2, pb2))

        ga = _solve(La, r)
        ga_last = -(la.T @ ga) / pa
        gb = _solve(Lb, r)
        gb_last = -(lb.T @ gb) / pb
        logdet_s = 2.0 * np.log(np.diag(Ls)).sum() + 2.0 * np.log(ps)
        self.logdetA = 2.0 * np.log(np.diag(La)).sum() + 2.0 * np.log(pa)
        logdet_b = 2.0 * np.log(np.diag(Lb)).sum() + 2.0 * np.log(pb)
        self.q = ga @ ga + ga_last**2
        d1 = self.d1
        self.log_first = (
            -0.5 * d1 * LOG2PI - 0.5 * logdet_b - 0.5 * (gb @ gb + gb_last**2)
            - d1 * LOG2 - 0.5 * d1 * LOGPI - 0.5 * logdet_s
        )
        self.La, self.la, self.pa = La, la, pa
        self.ga, self.ga_last = ga, ga_last

    def log_terms(self, cands: _Candidates) -> np.ndarray:
        e = self.e
        Uf = (e.cov_whitened(self.Zf, self.Vf, cands.Z, cands.V) * cands.inv_sd)[self.inv]
        Ux = e.cov_whitened(self.Zx, self.Vx, cands.Z, cands.V) * cands.inv_sd  # (X, m)
        Wf = _solve(self.La, Uf)  # (d, m)
        w_last = (Ux - self.la.T @ Wf) / self.pa[:, None]
        s = np.einsum("ij,ij->j", Wf, Wf)[None, :] + w_last**2
        h = (self.ga @ Wf)[None, :] + self.ga_last[:, None] * w_last
        lt = _log_term2(self.d1, self.logdetA[:, None], self.q[:, None], s, h)
        lf = self.log_first[:, None]
        lt = np.where(np.isnan(lt), lf, np.minimum(lt, lf))
        lt[~self.valid] = np.nan
        return lt


def log_scores_Ay(e: Emulator, fe: FieldExperiment, ctx: AcquisitionContext,
                  cache: XCache | None = None, candidates=None) -> np.ndarray:
    """Log of the X_ref average of the augmented fantasy second term at theta_hat."""
    if ctx.theta_hat is None:
        raise ValueError("score_Ay needs theta_hat")
    if ctx.x_ref is None or ctx.x_ref.shape[0] == 0:
        raise ValueError("score_Ay needs a nonempty x_ref")
    cache = cache or XCache(e, fe, ctx.x_ref, ctx.theta_hat)
    cands = _Candidates(e, ctx.candidates if candidates is None else candidates)
    return _log_mean_exp(cache.log_terms(cands))


def score_Ap(e: Emulator, fe: FieldExperiment, ctx: AcquisitionContext, z_star) -> float:
    return float(np.exp(log_scores_Ap(e, fe, ctx, candidates=np.atleast_2d(z_star))[0]))


def score_Ay(e: Emulator, fe: FieldExperiment, ctx: AcquisitionContext, z_star) -> float:
    return float(np.exp(log_scores_Ay(e, fe, ctx, candidates=np.atleast_2d(z_star))[0]))


def scores_maxvar(e: Emulator, candidates) -> np.ndarray:
    _, var = e.predict(np.atleast_2d(candidates))
    return var


def score_maxvar(e: Emulator, z_star) -> float:
    return float(scores_maxvar(e, z_star)[0])


def scores_imspe(e: Emulator, ctx: AcquisitionContext, candidates=None) -> np.ndarray:
    """Negated total fantasy variance over z_ref after each candidate."""
    if ctx.z_ref is None or ctx.z_ref.shape[0] == 0:
        raise ValueError("score_imspe needs a nonempty z_ref")
    cands = _Candidates(e, ctx.candidates if candidates is None else candidates)
    Vr = e.whiten(ctx.z_ref)
    total = e.var_whitened(Vr).sum()
    C = e.cov_whitened(ctx.z_ref, Vr, cands.Z, cands.V)
    reduction = np.einsum("ij,ij->j", C, C) / cands.denom
    return -(total - reduction)


def score_imspe(e: Emulator, ctx: AcquisitionContext, z_star) -> float:
    return float(scores_imspe(e, ctx, np.atleast_2d(z_star))[0])


def select(scores) -> int:
    """Index of the largest non-NaN score; ties go to the lowest index."""
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise AcquisitionFailed("no candidates to select from")
    if np.all(np.isnan(scores)):
        raise AcquisitionFailed("every candidate score is NaN")
    return int(np.nanargmax(scores))


def build_candidates(fe: FieldExperiment, prior: PriorSpec, n_pair: int, n_explore: int,
                     rng) -> np.ndarray:
    """Candidate list of paired and exploratory joint inputs.

    Each unique field design input is paired with the same ``n_pair`` prior
    draws of theta; ``n_explore`` further points are drawn uniformly over the
    design box and from the prior.
    """
    if n_pair < 0 or n_explore < 0:
        raise ValueError("candidate counts must be nonnegative")
    uniq, _ = fe.unique_design()
    q, p = uniq.shape[1], prior.p
    parts = []
    if n_pair:
        thetas = prior.sample(rng, n_pair)
        parts.append(np.vstack([joint(uniq, th) for th in thetas]))
    if n_explore:
        parts.append(np.hstack([rng.uniform(size=(n_explore, q)), prior.sample(rng, n_explore)]))
    if not parts:
        return np.empty((0, q + p))
    return np.vstack(parts)


def lhs_sample(n: int, dims: int, rng, n_tries: int = 10) -> np.ndarray:
    """Best of ``n_tries`` random Latin hypercube samples by minimum pairwise distance."""
    if n < 1:
        raise ValueError("n must be >= 1")
    best, best_d = None, -np.inf
    for _ in range(n_tries):
        X = qmc.LatinHypercube(d=dims, rng=rng).random(n)
        md = pdist(X).min() if n > 1 else 0.0
        if md > best_d:
            best, best_d = X, md
    return best
