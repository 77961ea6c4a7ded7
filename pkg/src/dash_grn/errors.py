"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class ConfigurationError(ValueError):
    """Inconsistent configuration (priors, chain shapes, infeasible requests)."""


class DivergenceError(ArithmeticError):
    """Integration or training produced non-finite values."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
