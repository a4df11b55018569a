"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """An argument violates a documented precondition."""


class CapacityError(ValueError):
    """A size limit (tree leaves, assignment size, pairwise cap) was exceeded."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values or an unsolvable system."""


class UnsupportedOperationError(NotImplementedError):
    """The requested operation is not defined for this configuration."""
