"""Exception hierarchy shared by every module."""


class EcnError(Exception):
    """Base class for all engine errors."""


class ConfigurationError(EcnError, ValueError):
    pass


class InputError(EcnError, ValueError):
    pass


class StateError(EcnError, RuntimeError):
    pass


class FormatError(EcnError, ValueError):
    """Malformed checkpoint or record file."""


class NumericError(EcnError, ArithmeticError):
    """Non-finite values encountered during training."""


class WarmStartError(EcnError):
    """Fine-tuning refused because the warm checkpoint is too converged."""
