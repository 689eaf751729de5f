"""Exception types shared across the runtime."""


class DimensionError(ValueError):
    """Operand shapes do not line up for the requested kernel."""


class ConfigurationError(ValueError):
    """A config value violates an invariant or an operation precondition."""


class BudgetError(ConfigurationError):
    """The weight bit budget cannot be satisfied."""


class TraceFormatError(ValueError):
    """A trace file line is malformed or violates a record invariant."""

    def __init__(self, line_number, message):
        self.line_number = line_number
        super().__init__(f"trace line {line_number}: {message}")
