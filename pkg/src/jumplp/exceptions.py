"""Exception hierarchy shared by every module."""


class JumpLPError(Exception):
    """Base class for all package errors."""


class ValidationError(JumpLPError, ValueError):
    """A model object violates one of its invariants."""


class DomainError(JumpLPError, ValueError):
    """A requested integral or moment does not exist."""


class ConfigurationError(JumpLPError, ValueError):
    """A numerical knob is set to an unusable value."""


class DivergenceError(JumpLPError, RuntimeError):
    """A simulated path left every reasonable bound."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ConvergenceError(JumpLPError, RuntimeError):
    """An iterative solver hit its iteration cap."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])


class WeakDualityError(JumpLPError, AssertionError):
    """A dual bound exceeded the primal value beyond its budget."""


class MonotonicityError(JumpLPError, AssertionError):
    """A quantity expected to improve under refinement got worse."""


class StageError(JumpLPError, RuntimeError):
    """A benchmark stage failed; ``stage`` names it."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
