"""Exception types shared across the package."""


class ContractError(ValueError):
    """An input violates a documented precondition (shape, sign, range)."""


class DegenerateInputError(ContractError):
    """The input is too small for the requested stencil or reduction."""


class InvalidDepthError(ContractError):
    pass


class FormatError(ValueError):
    """Malformed or truncated image file."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class NumericError(FloatingPointError):
    """A non-finite value appeared in a loss or gradient."""

    def __init__(self, message: str, iteration: int | None = None, block: str | None = None):
        super().__init__(message)
        self.iteration = iteration
        self.block = block


class EvaluationError(ValueError):
    pass


class SceneSpecError(ValueError):
    pass
