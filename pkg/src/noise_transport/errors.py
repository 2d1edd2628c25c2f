"""Exception hierarchy shared across the package."""


class TransportError(Exception):
    """Base class for all package errors."""


class InvalidNetwork(TransportError, ValueError):
    pass


class DimensionMismatch(TransportError, ValueError):
    pass


class FormatError(TransportError, ValueError):
    """A network or config file could not be parsed."""


class ValidationError(TransportError, ValueError):
    """Input parsed but violates a structural invariant (symmetry, PSD, ...)."""


class InvalidPair(TransportError, ValueError):
    pass


class CapacityError(TransportError):
    """Requested mode-extended space exceeds the configured dimension cap."""


class BasisError(TransportError):
    pass


class NumericalInstability(TransportError):
    """Integration produced a state violating positivity/trace/Hermiticity."""


class StepTooLarge(TransportError):
    """Step-halving guard rejected the run."""


class ConfigError(TransportError, ValueError):
    pass
