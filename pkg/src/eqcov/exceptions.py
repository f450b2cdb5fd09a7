"""Exception hierarchy shared by the library and the command line."""


class EqcovError(Exception):
    """Base class for all errors raised by eqcov."""


class ConfigError(EqcovError, ValueError):
    """Invalid parameters: miss levels, fractions, method tags."""


class DataError(EqcovError, ValueError):
    """Unreadable input, schema mismatch, or no usable rows."""


class GuaranteeError(EqcovError):
    """No coverage guarantee can be issued, e.g. a group without calibration data."""
