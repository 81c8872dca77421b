"""Exception hierarchy shared by every module."""


class AggmarkError(Exception):
    """Base class for all errors raised by aggmark."""


class DomainError(AggmarkError, ValueError):
    """An argument lies outside the domain of the operation (e.g. t > s)."""


class NumericalBlowupError(AggmarkError, ArithmeticError):
    """An ODE sweep produced non-finite or exploding entries."""

    def __init__(self, time, detail=""):
        self.time = float(time)
        msg = f"numerical blow-up in product integral sweep at t={self.time:.10g}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class ValidationError(AggmarkError, ValueError):
    """A representation or model violates its structural invariants."""


class InconsistentModelError(ValidationError):
    """Exit rates computed two ways disagree."""


class ConditioningError(AggmarkError, ArithmeticError):
    """Conditioning on an event of (numerically) zero probability."""


class ImpossibleHistoryError(ConditioningError):
    """The observed jump history has zero likelihood under the model."""


class NoJumpPossibleError(ConditioningError):
    """The exit rate is zero, so no jump can occur at the requested time."""


class StructuralError(ValidationError):
    """A behaviour partition does not match the block structure of the model."""


class BoundViolationError(AggmarkError, RuntimeError):
    """A thinning bound was exceeded by the actual intensity."""


class InfeasibleConditioningError(AggmarkError, RuntimeError):
    """Rejection sampling accepted too small a fraction of paths."""


class ConfigError(AggmarkError, ValueError):
    """A run configuration could not be parsed or is inconsistent."""

    def __init__(self, message, line=None, source=None):
        self.line = line
        self.source = source
        where = ""
        if source is not None:
            where = f"{source}"
            if line is not None:
                where += f":{line}"
            where += ": "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)


class UsageError(AggmarkError, ValueError):
    """A function was called in a mode its inputs do not support."""
