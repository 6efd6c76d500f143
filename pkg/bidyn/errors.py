"""Exceptions raised by bidyn.

Every error derives from :class:`BidynError` so the command line can report
it in one place. The second base class keeps them catchable with the
builtin exception a caller would naturally expect.
"""


class BidynError(Exception):
    """Base class for all bidyn errors."""


class InputError(BidynError, ValueError):
    """An argument is malformed: wrong shape, non-finite, out of range."""


class PreconditionError(BidynError, ValueError):
    """The operation cannot run on the data it was given yet."""


class StateError(BidynError, RuntimeError):
    """An object is used before it is ready, e.g. an untrained ensemble."""


class NumericalError(BidynError, ArithmeticError):
    """A loss, gradient or parameter became non-finite."""

    def __init__(self, message: str, diagnostic: str = ""):
        super().__init__(f"{message} ({diagnostic})" if diagnostic else message)
        self.diagnostic = diagnostic


class ConfigError(InputError):
    """The configuration file or an override is invalid."""


class CheckpointError(BidynError, OSError):
    """A checkpoint file could not be written or decoded."""
