"""Exception hierarchy shared by all modules."""


class SelfTuneError(Exception):
    """Base class for every error raised by the package."""


class NonFiniteState(SelfTuneError):
    """An integration step produced NaN or Inf."""


class DomainViolation(SelfTuneError):
    """A state left the admissible domain (x <= 0, or the oscillator origin)."""


class StepUnderflow(SelfTuneError):
    """The adaptive step size fell below the minimum allowed step."""


class JacobianMismatch(SelfTuneError):
    """A user supplied Jacobian disagrees with finite differences of the field."""


class ChartMismatch(SelfTuneError):
    """A coordinate chart was used with a system or trajectory it does not fit."""


class NotInImage(SelfTuneError):
    """No x with f(x) = g(mu0) could be bracketed."""


class Infeasible(SelfTuneError):
    """The storage-function search could not certify feasibility."""


class HypothesisViolation(SelfTuneError):
    """A theorem hypothesis required by an analysis does not hold."""


class ConfigError(SelfTuneError):
    """A scenario file or command line request failed validation."""


class ExpressionError(ConfigError):
    """An expression string is outside the supported grammar."""
