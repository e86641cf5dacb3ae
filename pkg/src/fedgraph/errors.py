"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Caller supplied data violating a documented precondition."""


class NumericError(RuntimeError):
    """A numerical routine failed to produce a usable result."""


class DegenerateFitError(NumericError):
    """Model fitting collapsed beyond the allowed recovery attempts."""


class DecodeError(ValueError):
    """A wire payload could not be decoded.

    ``offset`` points at the byte where decoding failed, when known.
    """

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class ConfigError(ValueError):
    """An experiment or federation configuration is inconsistent."""


class RoundIncompleteError(RuntimeError):
    """A federation round is missing one or more client uploads."""
