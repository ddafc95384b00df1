"""Exception types shared across the package."""


class SDRError(Exception):
    """Base class for all errors raised by sdrselect."""


class DatasetError(SDRError):
    pass


class BadMagicError(DatasetError):
    pass


class UnsupportedVersionError(DatasetError):
    pass


class TruncatedFileError(DatasetError):
    pass


class InvariantViolationError(DatasetError):
    pass


class PolicyDomainError(SDRError, ValueError):
    """A policy was queried on a state it is not defined for."""


class InvalidActionError(SDRError, ValueError):
    pass


class BudgetError(SDRError, ValueError):
    """Selection budget larger than the dataset."""


class MissingColumnError(SDRError, KeyError):
    pass


class ConfigError(SDRError):
    """Bad or incomplete run configuration (CLI exit code 2)."""
