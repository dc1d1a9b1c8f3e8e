"""Exception types raised by emaxmnar."""


class EmaxMnarError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatchError(EmaxMnarError, ValueError):
    """A design row or coefficient vector has an unexpected length."""


class DoseLevelsError(EmaxMnarError, ValueError):
    """Too few distinct dose levels to fit the dose-response curve."""


class SingularInformationError(EmaxMnarError, RuntimeError):
    """An information matrix required for penalization or leverages is singular."""


class DatasetFormatError(EmaxMnarError, ValueError):
    """A dataset file is malformed; the message names the row and column."""


class ConfigError(EmaxMnarError, ValueError):
    """A run configuration is invalid; the message names the offending key."""


class BootstrapError(EmaxMnarError, RuntimeError):
    """Bootstrap resampling failed, e.g. too many nonconverged refits."""
