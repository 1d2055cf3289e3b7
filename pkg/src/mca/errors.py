"""Exception hierarchy shared by the library and the command line."""


class MCAError(Exception):
    """Base class for every error raised by this package."""


class DataError(MCAError):
    """Malformed or inconsistent input data (files, shapes, labels)."""


class TaxonomyError(DataError):
    pass


class NumericError(MCAError):
    """Non-finite values or a violated numerical precondition."""
