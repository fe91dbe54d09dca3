"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array or vertex counts do not line up."""


class ValidationError(ValueError):
    """Input values violate a documented invariant."""


class CapacityError(ValueError):
    """Request exceeds an enumeration or size limit."""


class ParseError(ValueError):
    """Malformed text input. ``position`` is a 1-based line (or char offset)."""

    def __init__(self, message, position=None):
        super().__init__(message)
        self.position = position


class UpdateError(FloatingPointError):
    """Non-finite gradient encountered during an optimizer step."""

    def __init__(self, block, message=None):
        super().__init__(message or f"non-finite gradient in block {block!r}")
        self.block = block


class TrainingError(RuntimeError):
    """Inner training diverged."""

    def __init__(self, step, message=None):
        super().__init__(message or f"training diverged (NaN loss) at step {step}")
        self.step = step
