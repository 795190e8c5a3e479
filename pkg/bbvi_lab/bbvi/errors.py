class BBVIError(Exception):
    """Base class for every error raised by the bbvi package."""


class ContractViolation(BBVIError, ValueError):
    """A caller broke a precondition (shapes, signs, counts)."""


class DomainViolation(BBVIError, ValueError):
    """Variational parameters left their domain, e.g. s_i <= 0 under the identity conditioner."""


class UnsupportedConfiguration(BBVIError, ValueError):
    """The requested combination of family, conditioner and algorithm is not supported."""


class NumericFailure(BBVIError, RuntimeError):
    """Non-finite values or a failed factorization during a computation."""


class ConfigurationError(BBVIError, ValueError):
    """The experiment configuration file or a command-line value is invalid."""
