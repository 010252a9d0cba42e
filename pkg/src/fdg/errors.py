"""Exception types raised across the package."""


class FdgError(Exception):
    pass


class ShapeError(FdgError, ValueError):
    pass


class ScheduleError(FdgError, RuntimeError):
    """Packet/graph bookkeeping went wrong; always a scheduler bug."""


class NonFiniteError(FdgError, FloatingPointError):
    pass


class DeadlockError(FdgError, RuntimeError):
    pass


class ConfigError(FdgError, ValueError):
    pass


class IdxFormatError(FdgError, ValueError):
    """Malformed IDX file. ``code`` distinguishes the failure kind."""

    def __init__(self, code, message):
        super().__init__(f"[{code}] {message}")
        self.code = code
