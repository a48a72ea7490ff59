"""Exception types raised across the package."""


class FactorTransferError(Exception):
    """Base class for all package errors."""


class DimensionError(FactorTransferError, ValueError):
    """Tensor shapes do not satisfy an operation's contract."""


class ConfigurationError(FactorTransferError, ValueError):
    """Invalid hyperparameter, architecture or run configuration."""


class ContractError(FactorTransferError, ValueError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class DegenerateBatchError(FactorTransferError, ValueError):
    """Batch statistics are undefined for the given input."""


class DataFormatError(FactorTransferError, ValueError):
    """A dataset file is malformed."""


class CheckpointError(FactorTransferError, ValueError):
    """A checkpoint file is malformed or incompatible."""


class DivergenceError(FactorTransferError, RuntimeError):
    """Training produced a non-finite loss."""
