"""Error taxonomy shared by all modules.

Exit-code mapping used by the CLI: usage/config -> 1, ContractError -> 2,
I/O failures -> 3.
"""


class ContractError(ValueError):
    """A documented precondition or invariant was violated by the caller."""


class DimensionError(ContractError):
    """Tensor shapes incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """Non-finite values encountered where finite ones are required."""


class ConfigError(ValueError):
    """Invalid or unknown configuration keys/values."""
