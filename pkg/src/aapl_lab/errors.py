"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateInputError(ValueError):
    """Input is valid in shape but mathematically degenerate (zero norm, single cluster, ...)."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class NumericError(ArithmeticError):
    """A computation produced NaN or Inf from finite inputs."""


class ConfigError(ValueError):
    """Invalid experiment, dataset or sampling configuration."""


class VersionError(ValueError):
    """A serialized document carries an unsupported schema version."""
