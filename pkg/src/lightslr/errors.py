"""Exception hierarchy shared by every lightslr module."""


class SLRError(Exception):
    """Base class for all lightslr errors."""


class FormatError(SLRError):
    """A file is malformed (bad magic, header, or truncated payload)."""


class UnsupportedInputError(SLRError):
    """Input is well formed but outside what the engine accepts."""


class InvalidInputError(SLRError, ValueError):
    """An argument violates an operation's precondition."""


class ConfigurationError(SLRError, ValueError):
    pass


class ShapeError(SLRError, ValueError):
    pass


class UsageError(SLRError, RuntimeError):
    """An API was called in a state where it cannot work (e.g. backward on a detached tensor)."""


class CorruptionError(FormatError):
    """A weight file does not match the architecture it claims to describe."""


class ArchitectureMismatchError(SLRError):
    pass


class TrainingDivergedError(SLRError, FloatingPointError):
    pass
