"""Exception hierarchy shared by every featinv module.

Each class carries the process exit code the CLI maps it to.
"""


class FeatInvError(Exception):
    exit_code = 1


class ConfigError(FeatInvError, ValueError):
    """Invalid configuration: bad key, type or range. ``key_path`` names the offending key."""

    exit_code = 2

    def __init__(self, message, key_path=None):
        self.key_path = key_path
        if key_path:
            message = f"{key_path}: {message}"
        super().__init__(message)


class InputError(FeatInvError, ValueError):
    exit_code = 2


class ConstructionError(FeatInvError, ValueError):
    exit_code = 2


class NumericError(FeatInvError, ArithmeticError):
    """NaN/inf encountered; ``where`` carries an iteration/epoch index or component name."""

    exit_code = 3

    def __init__(self, message, where=None):
        self.where = where
        super().__init__(message)


class DegenerateLatentError(NumericError):
    pass


class CapabilityError(FeatInvError, RuntimeError):
    exit_code = 4
