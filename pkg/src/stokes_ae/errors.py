"""Exception hierarchy shared by every module.

All errors derive from :class:`StokesAEError` so the CLI can map them to
exit code 1 in one place.
"""


class StokesAEError(Exception):
    pass


class DegenerateSpectrum(StokesAEError, ValueError):
    pass


class OutOfBounds(StokesAEError, IndexError):
    pass


class InvalidClassParams(StokesAEError, ValueError):
    pass


class ShapeMismatch(StokesAEError, ValueError):
    pass


class InconsistentShapes(StokesAEError, ValueError):
    pass


class NumericalFault(StokesAEError, ArithmeticError):
    pass


class IndivisibleLength(StokesAEError, ValueError):
    pass


class EmptyDataset(StokesAEError, ValueError):
    pass


class AllExcluded(StokesAEError, ValueError):
    pass


class EmptyDirectory(StokesAEError, FileNotFoundError):
    pass


class IoFailure(StokesAEError, OSError):
    pass


# binary formats
class FormatError(StokesAEError, ValueError):
    pass


class Truncated(FormatError):
    pass


class MissingEND(FormatError):
    pass


class UnsupportedBITPIX(FormatError):
    pass


class BadMagic(FormatError):
    pass


class VersionUnsupported(FormatError):
    pass


class ChecksumMismatch(FormatError):
    pass
