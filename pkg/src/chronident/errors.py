"""Exception hierarchy shared by all chronident modules.

Argument validation raises plain ``ValueError`` (aliased below for callers
that want to catch everything from this package at once); the remaining
classes mark domain conditions the CLI maps to distinct exit codes.
"""


class ChronidentError(Exception):
    """Base class for chronident-specific failures."""


class InvalidCovarianceError(ChronidentError, ValueError):
    """A covariance matrix has an eigenvalue below the allowed tolerance."""


class ChannelUnusableError(ChronidentError, ValueError):
    """More than half of a channel's samples were flagged as outliers."""


class UnidentifiableError(ChronidentError):
    """The regression / moment map is rank deficient.

    ``null_directions`` holds an orthonormal basis of the unidentifiable
    parameter subspace (rows), when available.
    """

    def __init__(self, message, null_directions=None):
        super().__init__(message)
        self.null_directions = null_directions


class NoResidueError(ChronidentError):
    """The stacked observation matrix has a trivial left null space."""


class DriftUnidentifiableError(UnidentifiableError):
    """The residue-mean drift map lost column rank; try a larger window L."""


class DivergedError(ChronidentError):
    """An iterative solver produced a non-finite residual."""
