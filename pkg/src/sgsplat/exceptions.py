"""Exception hierarchy shared by every module."""


class SplatError(Exception):
    """Base class for package errors."""


class ContractViolation(SplatError, ValueError):
    """An operation was called with inputs outside its precondition."""


class ImageFormatError(SplatError):
    """Unsupported or malformed image / stream format."""


class CorruptionError(ImageFormatError):
    """A stream is truncated or inconsistent with its header.

    Attributes:
        offset: byte offset where decoding failed.
        section: name of the section being read.
    """

    def __init__(self, message, offset=None, section=None):
        super().__init__(message)
        self.offset = offset
        self.section = section


class OverlapError(SplatError, ValueError):
    """Two RD curves share no quality (or rate) interval."""


class NumericFailure(SplatError, ArithmeticError):
    """Optimization produced non-finite values that could not be recovered."""
