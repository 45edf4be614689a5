"""Exception types shared across the package."""


class SisaError(Exception):
    """Base class for all domain errors raised by this package."""


class FormatError(SisaError):
    """A file does not match its expected binary or JSON layout."""


class CorruptRecordError(FormatError):
    """A record inside an otherwise well-formed file is invalid."""


class UnsupportedVersionError(FormatError):
    """A serialized artifact declares a version this code cannot read."""


class IntegrityError(SisaError):
    """A checkpoint or store failed a digest / truncation check."""


class NumericFault(SisaError):
    """Training produced a non-finite loss or gradient."""


class UnknownClassError(SisaError):
    """A request names a class that is not present (or already removed)."""


class InvalidLabelError(SisaError):
    """A sample's label falls outside the model head it was routed to."""


class MissingClassError(SisaError):
    """A class expected by the partition plan has zero samples."""
