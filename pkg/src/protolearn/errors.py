"""Exception types. CLI exit codes map onto this hierarchy:

parameter/usage problems -> 1, data/format problems -> 2, numeric failures -> 3.
"""


class ProtoLearnError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(ProtoLearnError, ValueError):
    """A caller-supplied parameter violates a precondition."""


class FormatError(ProtoLearnError, ValueError):
    """A file's contents do not match the expected format."""


class NumericError(ProtoLearnError, ArithmeticError):
    """A computation produced non-finite values; the run was aborted."""


class CheckpointError(ProtoLearnError):
    """Base class for checkpoint load failures."""


class CheckpointMagicError(CheckpointError):
    """The file does not start with the checkpoint magic."""


class CheckpointVersionError(CheckpointError):
    """The checkpoint carries an unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    """The file ended before the declared payload was complete."""


class CheckpointCRCError(CheckpointError):
    """The trailing CRC-32 does not match the file contents."""
