"""Exception hierarchy shared across the package.

Each exception carries an ``exit_code`` used by the command line front end.
"""


class CastreamError(Exception):
    exit_code = 1
    category = "error"


class UsageError(CastreamError, ValueError):
    exit_code = 2
    category = "usage"


class ShapeError(CastreamError, ValueError):
    exit_code = 2
    category = "shape"


class DomainError(CastreamError, ValueError):
    exit_code = 2
    category = "domain"


class GraphStateError(CastreamError, RuntimeError):
    """Raised when a consumed graph is differentiated a second time."""

    exit_code = 5
    category = "graph-state"


class NumericError(CastreamError, FloatingPointError):
    """A forward result contained NaN or Inf."""

    exit_code = 4
    category = "numeric-divergence"


class DivergenceError(NumericError):
    """Training loss became non-finite."""


class InvariantViolation(CastreamError, AssertionError):
    exit_code = 5
    category = "invariant-violation"


class FormatError(CastreamError, ValueError):
    """Malformed or truncated file. ``offset`` is the byte position of the fault."""

    exit_code = 3
    category = "io"

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(FormatError):
    pass


class BadMagicError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class DigestMismatchError(CheckpointError):
    exit_code = 5
    category = "invariant-violation"
