"""The sequential design loop.

Each iteration fits the emulator to all simulation data so far, estimates
theta_hat by least squares against the field data, optionally refits the
discrepancy covariance, scores a fresh candidate list and evaluates the
simulator at the best candidate.
"""
from __future__ import annotations

import enum
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.optimize import minimize

from . import acquisition as acq
from .errors import ConfigError, EmulatorSingular, SeqCalError, SimulatorError
from .gp import Emulator, FitConfig, KernelParams, SimDataset, fit, joint
from .posterior import DiscrepancyParams, FieldExperiment, fit_discrepancy

log = logging.getLogger(__name__)


class Method(str, enum.Enum):
    Ap = "Ap"
    Ay = "Ay"
    AyFixed = "AyFixed"
    Rnd = "Rnd"
    Lhs = "Lhs"
    Var = "Var"
    Imspe = "Imspe"

    @property
    def code(self) -> int:
        return list(Method).index(self) + 1

    @property
    def space_filling(self) -> bool:
        return self in (Method.Rnd, Method.Lhs)


class DiscrepancyMode(str, enum.Enum):
    KnownSigma = "KnownSigma"
    FitDiscrepancy = "FitDiscrepancy"


@dataclass
class DesignConfig:
    """Settings for one sequential design run.

    ``theta_ref`` and ``x_ref`` are scaled reference sets. ``z_ref_size``
    sets the size of the joint LHS used by ``Imspe`` (default
    ``len(theta_ref)``). ``fit_space_filling=False`` skips emulator fits for
    ``Rnd``/``Lhs`` when only the acquired inputs are of interest.
    """

    n0: int
    n: int
    acquisition: Method = Method.Ap
    n_pair: int = 100
    n_explore: int = 500
    theta_ref: np.ndarray | None = None
    x_ref: np.ndarray | None = None
    z_ref_size: int | None = None
    discrepancy: DiscrepancyMode = DiscrepancyMode.KnownSigma
    seed: int = 0
    init: str = "uniform"
    fit: FitConfig = field(default_factory=FitConfig)
    n_starts_warm: int = 3
    theta_fixed: np.ndarray | None = None
    fit_space_filling: bool = True
    theta_seeds: int = 3
    theta_evals: int = 200

    def __post_init__(self):
        self.acquisition = Method(self.acquisition)
        self.discrepancy = DiscrepancyMode(self.discrepancy)
        if self.theta_ref is not None:
            self.theta_ref = acq._rows(self.theta_ref)
        if self.x_ref is not None:
            self.x_ref = acq._rows(self.x_ref)
        self.validate()

    def validate(self):
        if self.n0 < 2:
            raise ConfigError("n0 must be >= 2")
        if self.n < 1:
            raise ConfigError("n must be >= 1")
        if self.n_pair < 0 or self.n_explore < 0:
            raise ConfigError("candidate counts must be nonnegative")
        m = self.acquisition
        if m in (Method.Ap, Method.Ay, Method.AyFixed, Method.Var, Method.Imspe):
            if self.n_pair + self.n_explore < 1:
                raise ConfigError(f"{m.value} needs a nonempty candidate list")
        if self.needs_emulator and (self.theta_ref is None or len(self.theta_ref) == 0):
            raise ConfigError("theta_ref is required whenever the emulator is fitted")
        if m in (Method.Ay, Method.AyFixed) and (self.x_ref is None or len(self.x_ref) == 0):
            raise ConfigError(f"{m.value} needs x_ref")
        if m is Method.AyFixed and self.theta_fixed is None:
            raise ConfigError("AyFixed needs theta_fixed")
        if self.init not in ("uniform", "lhs"):
            raise ConfigError("init must be 'uniform' or 'lhs'")
        if self.n_starts_warm < 1:
            raise ConfigError("n_starts_warm must be >= 1")

    @property
    def needs_emulator(self) -> bool:
        return not self.acquisition.space_filling or self.fit_space_filling


@dataclass
class IterationRecord:
    t: int
    z: np.ndarray
    eta: float
    theta_hat: np.ndarray | None
    kernel: KernelParams | None
    score: float
    wall_time: float
    discrepancy: DiscrepancyParams | None = None


@dataclass
class RunHistory:
    records: list
    data: SimDataset
    emulator: Emulator | None = None
    theta_hat: np.ndarray | None = None
    status: str = "ok"
    error: str | None = None
    failures: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def acquired(self) -> np.ndarray:
        if not self.records:
            return np.empty((0, self.data.q + self.data.p))
        return np.vstack([r.z for r in self.records])

    @property
    def acquired_x(self) -> np.ndarray:
        return self.acquired[:, :self.data.q]

    @property
    def acquired_theta(self) -> np.ndarray:
        return self.acquired[:, self.data.q:]


# -- theta_hat ---------------------------------------------------------------


def _sse_factory(e, fe: FieldExperiment):
    uniq, inv = fe.unique_design()

    def sse_many(thetas):
        thetas = np.atleast_2d(thetas)
        Z = np.vstack([joint(uniq, th) for th in thetas])
        m = np.asarray(e.predict(Z, return_var=False)).reshape(len(thetas), -1)[:, inv]
        return np.sum((fe.y[None, :] - m) ** 2, axis=1)

    return sse_many


def theta_hat_search(e, fe: FieldExperiment, theta_ref, n_seeds: int = 3, max_evals: int = 200):
    """Least-squares theta and its objective value.

    The objective is evaluated on ``theta_ref``; the best ``n_seeds`` points
    (stable order) are polished with bounded Nelder-Mead. A polished point is
    kept only when it strictly improves on the incumbent, so a flat objective
    returns the first reference point.
    """
    theta_ref = acq._rows(theta_ref)
    sse_many = _sse_factory(e, fe)
    vals = sse_many(theta_ref)
    order = np.argsort(vals, kind="stable")
    best_i = int(order[0])
    best_x, best_f = theta_ref[best_i].copy(), float(vals[best_i])
    p = theta_ref.shape[1]
    for i in order[:n_seeds]:
        res = minimize(lambda th: float(sse_many(th)[0]), theta_ref[i], method="Nelder-Mead",
                       bounds=[(0.0, 1.0)] * p,
                       options={"maxfev": max_evals, "xatol": 1e-8, "fatol": 1e-12})
        if res.fun < best_f:
            best_x, best_f = np.clip(res.x, 0.0, 1.0), float(res.fun)
    return best_x, best_f


def estimate_theta_hat(e, fe: FieldExperiment, theta_ref, n_seeds: int = 3,
                       max_evals: int = 200) -> np.ndarray:
    return theta_hat_search(e, fe, theta_ref, n_seeds, max_evals)[0]


# -- the loop ----------------------------------------------------------------


def initial_design(fe: FieldExperiment, n0: int, rng, kind: str = "uniform") -> np.ndarray:
    q, p = fe.q, fe.prior.p
    if kind == "lhs":
        U = acq.lhs_sample(n0, q + p, rng)
        lo, hi = fe.prior.lower, fe.prior.upper
        U[:, q:] = lo + U[:, q:] * (hi - lo)
        return U
    return np.hstack([rng.uniform(size=(n0, q)), fe.prior.sample(rng, n0)])


def _evaluate(sim, z, history: RunHistory, t: int) -> float:
    """Run the simulator with one retry; raises SimulatorError after two failures."""
    last = None
    for attempt in range(2):
        try:
            eta = float(sim(z))
        except Exception as err:  # user simulators may raise anything
            last = err
        else:
            if np.isfinite(eta):
                return eta
            last = SimulatorError(f"non-finite output {eta!r}")
        history.failures.append({"t": t, "attempt": attempt + 1, "z": np.array(z), "error": repr(last)})
        log.warning("simulator failed at t=%d (attempt %d): %r", t, attempt + 1, last)
    if isinstance(last, SimulatorError):
        raise last
    raise SimulatorError(repr(last)) from last


class _State:
    """Emulator, theta_hat and field experiment for the current data."""

    def __init__(self, e, theta_hat, fe, disc):
        self.e = e
        self.theta_hat = theta_hat
        self.fe = fe
        self.disc = disc


def run(sim: Callable, fe: FieldExperiment, cfg: DesignConfig, init_design=None,
        init_outputs=None, monitor: Callable | None = None) -> RunHistory:
    """Run ``cfg.n`` acquisitions starting from an initial design.

    ``sim`` maps one scaled joint input to a scalar. ``init_design`` (and
    optionally its ``init_outputs``) lets several methods share one start.
    ``monitor(t, state)`` is called after every acquisition once the
    emulator has been refit, with ``t = 0`` for the initial data.
    """
    cfg.validate()
    ss = np.random.SeedSequence(cfg.seed)
    rng_init, rng_cand, rng_fit = (np.random.default_rng(s) for s in ss.spawn(3))
    q, p = fe.q, fe.prior.p
    method = cfg.acquisition

    if init_design is None:
        init_design = initial_design(fe, cfg.n0, rng_init, cfg.init)
    init_design = np.atleast_2d(np.asarray(init_design, dtype=float))
    if init_design.shape != (cfg.n0, q + p):
        raise ConfigError(f"initial design must have shape {(cfg.n0, q + p)}")

    data = SimDataset(q, p)
    history = RunHistory([], data)
    try:
        if init_outputs is None:
            init_outputs = [_evaluate(sim, z, history, 0) for z in init_design]
        data.extend(init_design, init_outputs)
    except SimulatorError as err:
        history.status, history.error = "aborted", f"initial design: {err!r}"
        return history

    lhs_plan = acq.lhs_sample(cfg.n, q + p, rng_cand) if method is Method.Lhs else None
    z_ref = None
    if method is Method.Imspe:
        size = cfg.z_ref_size or len(cfg.theta_ref)
        z_ref = acq.lhs_sample(size, q + p, rng_cand)

    kernel = None

    def refresh(t):
        nonlocal kernel
        if not cfg.needs_emulator:
            return _State(None, None, fe, None)
        fc = replace(cfg.fit, seed=int(rng_fit.integers(2**31)))
        if kernel is not None:
            fc = replace(fc, n_starts=cfg.n_starts_warm)
        e = fit(data, fc, warm_start=kernel)
        kernel = e.kernel
        th, _ = theta_hat_search(e, fe, cfg.theta_ref, cfg.theta_seeds, cfg.theta_evals)
        fe_t, disc = fe, None
        if cfg.discrepancy is DiscrepancyMode.FitDiscrepancy:
            resid = fe.y - np.asarray(e.predict(joint(fe.field_x, th), return_var=False))
            disc = fit_discrepancy(fe, resid, seed=t)
            fe_t = fe.with_discrepancy(disc)
        return _State(e, th, fe_t, disc)

    try:
        state = refresh(0)
    except SeqCalError as err:
        history.status, history.error = "aborted", repr(err)
        return history
    if monitor is not None:
        monitor(0, state)

    for t in range(1, cfg.n + 1):
        t0 = time.perf_counter()
        score = np.nan
        try:
            if method is Method.Lhs:
                z = lhs_plan[t - 1].copy()
                z[q:] = fe.prior.lower + z[q:] * (fe.prior.upper - fe.prior.lower)
            elif method is Method.Rnd:
                z = np.concatenate([rng_cand.uniform(size=q), fe.prior.sample(rng_cand, 1)[0]])
            else:
                z, score = _acquire(state, cfg, rng_cand, z_ref)
            eta = _evaluate(sim, z, history, t)
        except SeqCalError as err:
            history.status, history.error = "aborted", f"iteration {t}: {err!r}"
            break
        data.append(z, eta)
        history.records.append(IterationRecord(
            t, z, eta, state.theta_hat, state.e.kernel if state.e else None,
            float(score), time.perf_counter() - t0, state.disc,
        ))
        try:
            state = refresh(t)
        except EmulatorSingular as err:
            history.status, history.error = "aborted", f"refit after iteration {t}: {err!r}"
            break
        history.records[-1].wall_time = time.perf_counter() - t0
        if monitor is not None:
            monitor(t, state)

    history.emulator = state.e
    history.theta_hat = state.theta_hat
    return history


def _acquire(state: _State, cfg: DesignConfig, rng, z_ref):
    e, fe = state.e, state.fe
    cands = acq.build_candidates(fe, fe.prior, cfg.n_pair, cfg.n_explore, rng)
    m = cfg.acquisition
    ctx = acq.AcquisitionContext(cands, theta_ref=cfg.theta_ref, x_ref=cfg.x_ref,
                                 prior=fe.prior, z_ref=z_ref)
    if m is Method.Ap:
        scores = acq.log_scores_Ap(e, fe, ctx)
    elif m in (Method.Ay, Method.AyFixed):
        ctx.theta_hat = np.atleast_1d(cfg.theta_fixed if m is Method.AyFixed else state.theta_hat)
        scores = acq.log_scores_Ay(e, fe, ctx)
    elif m is Method.Var:
        scores = acq.scores_maxvar(e, cands)
    elif m is Method.Imspe:
        scores = acq.scores_imspe(e, ctx)
    else:
        raise ConfigError(f"no scorer for {m}")
    i = acq.select(scores)
    return cands[i].copy(), float(scores[i])
