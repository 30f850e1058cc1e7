"""Synthetic simulation models and field-data generators.

Evaluators take natural units. A :class:`Box` maps between natural units
and the unit cube the designer works on.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import minimize, minimize_scalar

from .acquisition import lhs_sample
from .posterior import FieldExperiment, PriorSpec

SINE_FIELD_X = (0.1, 0.3, 0.5, 0.7, 0.9)
HIGHDIM_NOISE_VAR = {2: 25.0, 6: 5.0, 10: 1.0}
HIGHDIM_N0 = {2: 50, 6: 30, 10: 30}


def eval_sine2d(x, theta):
    return np.sin(10.0 * np.asarray(x) - 5.0 * np.asarray(theta))


def eval_ranjan3d(x1, x2, theta):
    x1 = np.asarray(x1)
    return (30.0 + 5.0 * x1 * np.sin(5.0 * x1)) * (6.0 * np.asarray(theta) + 1.0 + np.exp(-5.0 * np.asarray(x2)))


def eval_highdim(scenario, x, theta):
    """sqrt(sum x) * (sum theta)^2; ``scenario`` is ``(q, p)`` and only checks shapes."""
    x = np.asarray(x, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if scenario is not None:
        q, p = scenario
        if x.shape[-1] != q or theta.shape[-1] != p:
            raise ValueError(f"expected q={q}, p={p}")
    return np.sqrt(x.sum(axis=-1)) * theta.sum(axis=-1) ** 2


def bias_sine(x):
    x = np.asarray(x)
    return 1.0 - x / 3.0 - 2.0 * x**2 / 3.0


def bias_ranjan(x1, x2):
    return -50.0 * np.exp(-0.2 * np.asarray(x1) - 0.1 * np.asarray(x2))


@dataclass(frozen=True)
class Box:
    """Axis-aligned box with an exact affine map to and from [0, 1]^k."""

    lower: tuple
    upper: tuple

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise ValueError("box bounds must have equal length and upper > lower")
        object.__setattr__(self, "lower", tuple(lo))
        object.__setattr__(self, "upper", tuple(hi))

    @classmethod
    def unit(cls, k: int) -> "Box":
        return cls((0.0,) * k, (1.0,) * k)

    @property
    def dim(self) -> int:
        return len(self.lower)

    def to_unit(self, v):
        lo, hi = np.array(self.lower), np.array(self.upper)
        return (np.asarray(v, dtype=float) - lo) / (hi - lo)

    def from_unit(self, u):
        lo, hi = np.array(self.lower), np.array(self.upper)
        return lo + np.asarray(u, dtype=float) * (hi - lo)


@dataclass
class SyntheticModel:
    """A synthetic calibration problem in natural units.

    ``eta(x, theta)`` accepts row-stacked arrays of shape (m, q) and (m, p) and
    returns (m,). ``bias(x)`` is the optional discrepancy on the same rows.
    """

    id: str
    q: int
    p: int
    eta: Callable
    x_box: Box
    theta_box: Box
    theta_true: np.ndarray
    sigma: float
    field_x: np.ndarray
    replicates: int = 2
    bias: Callable | None = None
    theta_ref_size: int = 100
    x_ref_grid: int | None = None
    ref_lhs: int | None = None
    n_pair: int = 100
    n_explore: int | None = None
    n0: int = 10
    n: int = 90
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta_true = np.atleast_1d(np.asarray(self.theta_true, dtype=float))
        self.field_x = np.atleast_2d(np.asarray(self.field_x, dtype=float))
        if self.field_x.shape[1] != self.q or self.theta_true.size != self.p:
            raise ValueError("field design or theta_true does not match (q, p)")
        if not self.sigma > 0:
            raise ValueError("noise sd must be positive")

    # -- evaluation in scaled units ---------------------------------------
    def eval_scaled(self, Z) -> np.ndarray:
        Z = np.atleast_2d(Z)
        x = self.x_box.from_unit(Z[:, :self.q])
        th = self.theta_box.from_unit(Z[:, self.q:])
        return np.asarray(self.eta(x, th), dtype=float).reshape(-1)

    def simulator(self) -> Callable[[np.ndarray], float]:
        """Scalar simulator on one scaled joint input."""
        return lambda z: float(self.eval_scaled(np.atleast_2d(z))[0])

    def field_mean_scaled(self, x_unit, theta_unit=None) -> np.ndarray:
        """Noiseless field mean eta(x, theta_true) + b(x) at scaled design rows."""
        x_unit = np.atleast_2d(x_unit)
        x = self.x_box.from_unit(x_unit)
        th = np.broadcast_to(self.theta_true if theta_unit is None
                             else self.theta_box.from_unit(theta_unit), (x.shape[0], self.p))
        out = np.asarray(self.eta(x, th), dtype=float).reshape(-1)
        if self.bias is not None:
            out = out + np.asarray(self.bias(x), dtype=float).reshape(-1)
        return out

    @property
    def theta_true_scaled(self) -> np.ndarray:
        return self.theta_box.to_unit(self.theta_true)

    @property
    def noise_var(self) -> float:
        return self.sigma**2

    # -- reference sets (scaled) -------------------------------------------
    def theta_ref(self, rng=None) -> np.ndarray:
        if self.ref_lhs:
            return lhs_sample(self.ref_lhs, self.p, rng if rng is not None else np.random.default_rng(0))
        if self.p != 1:
            raise ValueError("equally spaced theta_ref needs p = 1")
        return np.linspace(0.0, 1.0, self.theta_ref_size).reshape(-1, 1)

    def x_ref(self, rng=None) -> np.ndarray:
        if self.ref_lhs:
            return lhs_sample(self.ref_lhs, self.q, rng if rng is not None else np.random.default_rng(1))
        g = np.linspace(0.0, 1.0, self.x_ref_grid or 100)
        if self.q == 1:
            return g.reshape(-1, 1)
        mesh = np.meshgrid(*([g] * self.q), indexing="ij")
        return np.column_stack([m.ravel() for m in mesh])

    def least_squares_theta(self, fe: FieldExperiment) -> np.ndarray:
        """Best-fit scaled theta of the true simulator to the field data."""
        def sse(th):
            th = np.atleast_1d(th)
            Z = np.hstack([fe.field_x, np.broadcast_to(th, (fe.d, self.p))])
            return float(np.sum((fe.y - self.eval_scaled(Z)) ** 2))

        if self.p == 1:
            grid = np.linspace(0.0, 1.0, 2001)
            vals = [sse(t) for t in grid]
            i = int(np.argmin(vals))
            lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
            res = minimize_scalar(sse, bounds=(lo, hi), method="bounded",
                                  options={"xatol": 1e-10})
            best = res.x if res.fun <= vals[i] else grid[i]
            return np.array([best])
        res = minimize(sse, self.theta_true_scaled, method="Nelder-Mead",
                       bounds=[(0.0, 1.0)] * self.p)
        return np.asarray(res.x)


def sine2d(discrepancy: bool = False, sigma: float = 0.2) -> SyntheticModel:
    return SyntheticModel(
        id="sine2d", q=1, p=1,
        eta=lambda x, th: eval_sine2d(x[:, 0], th[:, 0]),
        x_box=Box.unit(1), theta_box=Box.unit(1),
        theta_true=[np.pi / 5], sigma=sigma,
        field_x=np.array(SINE_FIELD_X).reshape(-1, 1), replicates=2,
        bias=(lambda x: bias_sine(x[:, 0])) if discrepancy else None,
        theta_ref_size=100, x_ref_grid=100, n_pair=100, n_explore=500, n0=10, n=90,
    )


def ranjan3d(discrepancy: bool = False, sigma: float = 0.5) -> SyntheticModel:
    g = np.array([0.1, 0.5, 0.9])
    fx = np.array([(a, b) for a in g for b in g])
    return SyntheticModel(
        id="ranjan3d", q=2, p=1,
        eta=lambda x, th: eval_ranjan3d(x[:, 0], x[:, 1], th[:, 0]),
        x_box=Box.unit(2), theta_box=Box.unit(1),
        theta_true=[0.5], sigma=sigma, field_x=fx, replicates=2,
        bias=(lambda x: bias_ranjan(x[:, 0], x[:, 1])) if discrepancy else None,
        theta_ref_size=100, x_ref_grid=20, n_pair=100, n_explore=900, n0=30, n=150,
    )


def highdim(q: int, p: int | None = None) -> SyntheticModel:
    """Scenario with q design inputs and p = 12 - q parameters on [-5, 5]^p."""
    p = 12 - q if p is None else p
    if q not in HIGHDIM_NOISE_VAR or q + p != 12:
        raise ValueError("high-dimensional scenarios are (q, p) in {(2, 10), (6, 6), (10, 2)}")
    return SyntheticModel(
        id=f"highdim_q{q}p{p}", q=q, p=p,
        eta=lambda x, th: eval_highdim((q, p), x, th),
        x_box=Box.unit(q), theta_box=Box((-5.0,) * p, (5.0,) * p),
        theta_true=np.zeros(p), sigma=float(np.sqrt(HIGHDIM_NOISE_VAR[q])),
        field_x=np.full((1, q), 0.5), replicates=4,
        ref_lhs=1500, n_pair=500, n_explore=1000, n0=HIGHDIM_N0[q], n=150,
    )


TESTBEDS = {
    "sine2d": lambda **kw: sine2d(**kw),
    "ranjan3d": lambda **kw: ranjan3d(**kw),
    "highdim_q2p10": lambda **kw: highdim(2),
    "highdim_q6p6": lambda **kw: highdim(6),
    "highdim_q10p2": lambda **kw: highdim(10),
}


def get_testbed(name: str, **options) -> SyntheticModel:
    try:
        factory = TESTBEDS[name]
    except KeyError:
        raise KeyError(f"unknown testbed {name!r}; known: {sorted(TESTBEDS)}") from None
    return factory(**options)


def make_field_data(model: SyntheticModel, rng) -> FieldExperiment:
    """Noisy replicated field observations in scaled design units."""
    x_unit = model.x_box.to_unit(np.repeat(model.field_x, model.replicates, axis=0))
    mean = model.field_mean_scaled(x_unit)
    y = mean + model.sigma * rng.standard_normal(mean.size)
    return FieldExperiment.with_noise(x_unit, y, model.noise_var, PriorSpec.unit(model.p))
