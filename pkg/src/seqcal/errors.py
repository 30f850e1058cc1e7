"""Exception types raised across the package."""


class SeqCalError(Exception):
    """Base class for all package errors."""


class EmulatorSingular(SeqCalError):
    """Kernel matrix could not be factorized even after jitter escalation."""


class CovarianceSingular(SeqCalError):
    """A covariance matrix required by a density evaluation is not SPD."""


class NonPositiveDeterminant(SeqCalError):
    """|Sigma + S - phi| is numerically zero for a fantasy candidate."""


class AcquisitionFailed(SeqCalError):
    """No finite acquisition score was available to select from."""


class ConfigError(SeqCalError, ValueError):
    """Invalid design or experiment configuration."""


class SimulatorError(SeqCalError):
    """Base class for external simulator failures."""


class SimTimeout(SimulatorError):
    pass


class SimProtocol(SimulatorError):
    pass


class SimCrashed(SimulatorError):
    pass
