"""Exception types shared across the simulator."""


class ConfigurationError(ValueError):
    """Invalid or infeasible configuration (shapes, schemes, weights)."""


class ProtocolError(RuntimeError):
    """A federation step was invoked with inputs the protocol does not allow."""


class NumericOverflowError(FloatingPointError):
    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer


class UnsupportedModelError(ConfigurationError):
    """Requested an analysis that only exists for a narrower model family."""


class InsufficientDataError(ValueError):
    pass


class ComparisonError(ValueError):
    pass


class RunError(RuntimeError):
    """Wraps any failure inside a scenario run with the round and phase it happened in."""

    def __init__(self, round_: int, phase: str, cause: BaseException):
        super().__init__(f"round {round_} [{phase}]: {type(cause).__name__}: {cause}")
        self.round = round_
        self.phase = phase
        self.cause = cause
