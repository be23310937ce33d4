"""Exception types shared across the package.

Plain I/O failures are left to the builtin OSError family; everything that
is a violation of this package's own contracts derives from ArticfeedError
so callers can catch one base class at the CLI boundary.
"""


class ArticfeedError(Exception):
    """Base class for all errors raised by this package."""


class LengthMismatch(ArticfeedError):
    """Two point lists that must be paired have different lengths."""


class CollinearPoints(ArticfeedError):
    """Points do not span a plane, so no frame/rotation is determined."""


class EmptyMesh(ArticfeedError):
    """A mesh with no faces was given where a surface is required."""


class DimensionMismatch(ArticfeedError):
    """A weight vector or model field has the wrong dimension."""


class FormatError(ArticfeedError):
    """A file or wire payload does not follow its documented format."""


class NonFiniteObjective(ArticfeedError):
    """Objective value or gradient became NaN/inf during minimization."""


class EmptyTrace(ArticfeedError):
    """A palate trace contains no usable points."""


class DegenerateModel(ArticfeedError):
    """A statistical model has no modes to fit (n = 0)."""


class ProtocolError(ArticfeedError):
    """Peer sent bytes that are not valid EMA-RT/1."""


class ConnectionLost(ArticfeedError):
    """Transport dropped without a clean BYE."""


class BiteCoilsMissing(ArticfeedError):
    """Bite-plate coils were not visible often enough during the task."""


class NoBitePlane(ArticfeedError):
    """A task that needs the canonical frame ran before it was recorded."""


class SessionStateError(ArticfeedError):
    """A session task was started out of order."""
