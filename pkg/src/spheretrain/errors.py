"""Exception types shared across the package."""


class ContractError(ValueError):
    """An operation was called outside its documented preconditions."""


class ShapeError(ContractError):
    """Dimensions are inconsistent or not divisible as required."""


class OracleError(ArithmeticError):
    """A finite-difference probe evaluated to a non-finite value."""


class RetractionError(ArithmeticError):
    """A row could not be mapped back onto the sphere (zero or non-finite norm)."""


class NonFiniteGradientError(ArithmeticError):
    """An optimizer step was rejected because the gradient had inf/nan entries."""


class ConfigError(ValueError):
    """A configuration or rule set cannot be applied."""


class InitializationError(ValueError):
    """k-means seeding is impossible for the given data."""


class DivergenceError(ArithmeticError):
    """Training produced a non-finite loss."""
