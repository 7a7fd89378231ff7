"""Exception hierarchy shared by all quadmask modules."""


class QuadmaskError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(QuadmaskError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(QuadmaskError):
    """A documented precondition or internal contract was violated."""


class NumericError(QuadmaskError):
    """A NaN or Inf appeared where only finite values are allowed."""


class InputError(QuadmaskError):
    """Caller-supplied data is malformed (bad image dims, degenerate box, ...)."""


class ConfigError(QuadmaskError):
    """Invalid configuration value or unknown configuration key."""


class DataError(QuadmaskError):
    """A dataset directory or manifest is missing, corrupt, or inconsistent."""


class CheckpointFormatError(QuadmaskError):
    """Checkpoint file does not start with the expected magic string."""


class CheckpointVersionError(QuadmaskError):
    """Checkpoint format version is not supported by this build."""


class CheckpointTruncatedError(QuadmaskError):
    """Checkpoint file is shorter than its header declares."""
