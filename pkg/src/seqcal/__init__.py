"""Sequential design of simulation experiments for Bayesian calibration."""
from .acquisition import (
    AcquisitionContext, build_candidates, lhs_sample, score_Ap, score_Ay, score_imspe,
    score_maxvar, select,
)
from .designer import DesignConfig, DiscrepancyMode, Method, RunHistory, estimate_theta_hat, run
from .errors import (
    AcquisitionFailed, ConfigError, CovarianceSingular, EmulatorSingular, NonPositiveDeterminant,
    SeqCalError, SimCrashed, SimProtocol, SimTimeout, SimulatorError,
)
from .gp import Emulator, FitConfig, KernelParams, SimDataset, fit, matern15
from .posterior import (
    DiscrepancyParams, FieldExperiment, PosteriorMoments, PriorSpec, expected_posterior_var,
    fit_discrepancy, posterior_mean, posterior_var,
)

__version__ = "0.1.0"
