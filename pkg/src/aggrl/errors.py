"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An argument broke a shape or call-order precondition."""


class ConfigurationError(ValueError):
    """Inconsistent settings: widths, modes, out-of-range hyperparameters."""


class TrainingDivergenceError(FloatingPointError):
    """A loss or gradient became non-finite."""


class GenerationError(RuntimeError):
    """Scenario sampling could not place obstacles within the retry budget."""


class TrajectoryParseError(ValueError):
    """A trajectory log could not be parsed."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
