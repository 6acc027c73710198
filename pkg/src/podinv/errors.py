"""Exception types raised by podinv."""


class PodInvError(Exception):
    """Base class for all package errors."""

    code = "error"


class InvalidArgumentError(PodInvError, ValueError):
    code = "invalid-argument"


class CoefficientError(PodInvError, ValueError):
    code = "coefficient-violation"


class OutOfDomainError(PodInvError, ValueError):
    code = "out-of-domain"


class IncompatibleOperandsError(PodInvError, ValueError):
    code = "incompatible-operands"


class SolverFailureError(PodInvError, RuntimeError):
    code = "solver-failure"


class NumericFailureError(PodInvError, RuntimeError):
    code = "numeric-failure"


class DegenerateSpectrumError(PodInvError, ValueError):
    code = "degenerate-spectrum"


class RankDeficiencyError(PodInvError, ValueError):
    code = "rank-deficiency"


class StepSizeTooLargeError(PodInvError, RuntimeError):
    code = "step-size-too-large"


class DegenerateIterateError(PodInvError, RuntimeError):
    code = "degenerate-iterate"


class AssetNotFoundError(PodInvError, FileNotFoundError):
    code = "asset-not-found"


class ConfigError(PodInvError, ValueError):
    code = "config-error"


class ExportError(PodInvError, OSError):
    code = "io-error"
