"""Exception hierarchy; the CLI maps these to exit codes."""


class CostGapError(Exception):
    """Base class for all package errors."""


class DataError(CostGapError, ValueError):
    """Bad input data: unreadable image, malformed manifest, wrong shape."""


class FormatError(DataError):
    """Unsupported or corrupt file format."""


class ManifestError(DataError):
    pass


class CodecError(DataError):
    """Bitstream cannot be decoded (corruption, truncation, wrong model)."""


class NumericalError(CostGapError, ArithmeticError):
    """Non-finite loss or weights."""
