"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Malformed network, file, or argument."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""


class AttackError(RuntimeError):
    """The attack could not be started, e.g. no starting point exists."""
