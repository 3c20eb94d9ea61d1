"""Exception types shared across the package."""


class ModelValidationError(ValueError):
    """A model, dataset, or configuration violates a structural invariant."""


class NumericalError(RuntimeError):
    """Arithmetic broke down: singular covariance, vanished probability mass,
    or non-finite values where finite ones are required."""


class EnumerationSizeError(RuntimeError):
    """The exhaustive state-sequence expansion would exceed the size guard."""

    def __init__(self, num_sequences: int, limit: int):
        self.num_sequences = num_sequences
        self.limit = limit
        super().__init__(
            f"state-sequence expansion has {num_sequences} components, "
            f"above the limit of {limit}"
        )
