"""Exception hierarchy shared by the whole package.

The CLI maps these onto exit codes: usage errors exit 2 (argparse),
:class:`DataError` subclasses exit 3, :class:`NonConvergenceError` exits 4.
"""


class SimbaError(Exception):
    """Base class for all package-specific errors."""


class DataError(SimbaError):
    """Invalid or inconsistent data (shapes, values, file contents)."""


class NonFiniteError(DataError):
    """NaN or Inf encountered where solver state must stay finite."""


class DimensionMismatchError(DataError):
    """Array dimensions inconsistent with the associated operator."""


class BadMagicError(DataError):
    """Container file does not start with the expected magic bytes."""


class ContainerVersionError(DataError):
    """Container format version is not supported."""


class TruncatedPayloadError(DataError):
    """Container payload is shorter than its descriptor claims."""


class ArchitectureError(DataError):
    """CNN weight file violates a denoiser architecture invariant."""


class NonConvergenceError(SimbaError):
    """An iterative solve failed to reach its tolerance within its cap."""
