"""Exception types shared across the package."""


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    """Input outside the mathematical domain of an operation (e.g. zero norm)."""


class ContractError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class LengthError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class TrialFailure(RuntimeError):
    """Training diverged; carries the step index where it happened."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class SelectionError(RuntimeError):
    pass


class ReportError(RuntimeError):
    pass


class FingerprintMismatch(RuntimeError):
    pass


class FormatError(ValueError):
    """Malformed on-disk artifact."""
