"""Exception types shared across the package."""


class DynLightError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgument(DynLightError, ValueError):
    pass


class FormatError(DynLightError, ValueError):
    """A data file could not be parsed.

    ``context`` carries the location (line number or field path) when known.
    """

    def __init__(self, message, context=None):
        self.context = context
        if context:
            message = f"{message} ({context})"
        super().__init__(message)


class ValidationError(DynLightError, ValueError):
    """Parsed content violates a structural invariant; ``entity`` names the offender."""

    def __init__(self, message, entity=None):
        self.entity = entity
        super().__init__(message)


class SimulationStateError(DynLightError, RuntimeError):
    pass


class ConfigError(DynLightError, ValueError):
    pass


class NumericError(DynLightError, ArithmeticError):
    pass


class TrainingDiverged(DynLightError, RuntimeError):
    pass


class UndefinedMetric(DynLightError, ValueError):
    pass
