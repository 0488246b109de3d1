"""Exception hierarchy shared across the package."""


class VFLError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(VFLError, ValueError):
    """Invalid configuration: bad key, bad value, or inconsistent dimensions."""


class InputError(VFLError, ValueError):
    """Caller-supplied data violates a precondition (range, shape, emptiness)."""


class ParseError(InputError):
    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class UsageError(VFLError, ValueError):
    """API misuse such as a length mismatch or a stale activation tape."""


class ProtocolError(VFLError, RuntimeError):
    """Message arrived out of order or with the wrong shape."""


class NumericError(VFLError, ArithmeticError):
    """A computation produced a non-finite value.

    ``iteration`` and ``client_id`` locate the offending query when known.
    """

    def __init__(self, message: str, iteration: int | None = None, client_id: int | None = None):
        self.iteration = iteration
        self.client_id = client_id
        where = []
        if iteration is not None:
            where.append(f"t={iteration}")
        if client_id is not None:
            where.append(f"client={client_id}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
