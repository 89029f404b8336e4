"""Shared exception types."""


class MuteAsrError(Exception):
    """Base class for all package errors."""


class DimensionError(MuteAsrError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class NumericError(MuteAsrError, ValueError):
    """Non-finite or otherwise invalid numeric input."""


class ContractError(MuteAsrError, ValueError):
    """A documented precondition of an operation was violated."""


class PartitionError(MuteAsrError, ValueError):
    """Parameter-partition discipline was violated (update on a frozen partition)."""


class ParseError(MuteAsrError, ValueError):
    """Malformed input file; message carries the file and line number."""


class ConfigError(MuteAsrError, ValueError):
    """Invalid or unknown configuration key/value."""
