"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ConfigError(ValueError):
    """A named option, schema key or settings value is not recognised."""


class SpaceTooLarge(RuntimeError):
    """Exhaustive enumeration was requested over a space above the guard limit."""

    def __init__(self, count: int, limit: int):
        super().__init__(
            f"configuration space has {count} entries, above the guard limit "
            f"of {limit}; raise the limit explicitly or use the sampled estimator"
        )
        self.count = count
        self.limit = limit


class TrainingError(RuntimeError):
    """Weight training produced a non-finite loss."""
