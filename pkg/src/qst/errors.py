"""Exception hierarchy shared by all qst modules."""


class QstError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(QstError):
    """Operand shapes are incompatible."""


class ConfigurationError(QstError):
    """A config value, mask, or model pairing is invalid."""


class RangeError(QstError):
    """A code digit, vocabulary index, or target is out of range."""


class NumericalError(QstError):
    """A non-finite value was produced where finite math was required."""


class ArgumentError(QstError):
    """An argument is structurally valid but unusable (e.g. empty dataset)."""


class DataFormatError(QstError):
    """Base class for dataset/checkpoint file parse failures."""


class BadMagicError(DataFormatError):
    """File does not start with the expected magic string."""


class VersionError(DataFormatError):
    """File magic is recognized but the format version is unsupported."""


class TruncatedFileError(DataFormatError):
    """File ends before the payload declared in its header."""
