"""Exception hierarchy shared by every pcapvision module."""


class PcapVisionError(Exception):
    """Base class for all library errors."""


class NotFound(PcapVisionError, FileNotFoundError):
    pass


class IoError(PcapVisionError, OSError):
    pass


class FormatError(PcapVisionError, ValueError):
    pass


class Unsupported(PcapVisionError, ValueError):
    pass


class InvalidArgument(PcapVisionError, ValueError):
    """Bad caller-supplied parameter (maps to CLI exit code 3)."""


class InvalidDimension(InvalidArgument):
    pass


class InvalidPadding(InvalidArgument):
    pass


class InvalidShape(InvalidArgument):
    pass


class InvalidProbability(InvalidArgument):
    pass


class InvalidLabel(InvalidArgument):
    pass


class EmptyInput(InvalidArgument):
    pass


class NumericError(PcapVisionError, ArithmeticError):
    """A NaN or Inf appeared where finite values are required."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


class SingleClassError(PcapVisionError, ValueError):
    pass


class UnknownVersion(PcapVisionError, KeyError):
    pass


class NoDataToFineTune(PcapVisionError):
    pass


class ModelFormatError(PcapVisionError, ValueError):
    """Model directory does not match its manifest (bad blob length, shapes, ...)."""
