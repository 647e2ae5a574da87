"""Error taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, OSError (including
FormatError) -> 3, ShapeError / ContractError / GenerationError -> 4.
"""


class ShapeError(ValueError):
    """An array operation received operands with incompatible extents."""


class ConfigError(ValueError):
    """A configuration value or CLI argument is invalid."""


class ContractError(RuntimeError):
    """An internal precondition was violated by a caller."""


class GenerationError(RuntimeError):
    """Synthetic data generation could not satisfy its constraints."""


class FormatError(OSError):
    """A binary file does not conform to its declared format."""
