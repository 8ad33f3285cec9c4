"""
Exception classes raised by the reconstruction engine.

Every error derives from FdkError and from the builtin exception it refines, so
callers can catch either.
"""

from typing import Tuple


class FdkError(Exception):
    """Base class for all dls_fdk errors."""


class GeometryError(FdkError, ValueError):
    """Scan parameters that do not describe a valid cone-beam geometry."""


class DegenerateGeometryError(GeometryError):
    """A point projects with (almost) zero depth."""


class ViewIndexError(FdkError, IndexError):
    """View index outside [0, n_p)."""


class ShapeError(FdkError, ValueError):
    """Arrays, stacks or lists whose dimensions do not agree."""


class UnsupportedShapeError(ShapeError):
    """A shape the symmetric kernel cannot handle, e.g. odd n_z."""


class LayoutError(FdkError, ValueError):
    """Volume layout does not match what the operation needs."""


class PlanningError(FdkError, ValueError):
    """No rank grid satisfies the divisibility and memory constraints."""


class ValidationError(FdkError, ValueError):
    """Invalid performance model parameter or timing."""


class PipelineError(FdkError, RuntimeError):
    """Failure inside a rank of the pipelined executor."""

    def __init__(self, message: str, rank: Tuple[int, int] | None = None) -> None:
        self.rank = rank
        if rank is not None:
            message = f"rank (row={rank[0]}, col={rank[1]}): {message}"
        super().__init__(message)


class PipelineAborted(PipelineError):
    """A rank stopped because another rank or stage failed first."""


class CollectiveTimeout(PipelineError):
    """A member of a collective never delivered its contribution."""


class DatasetError(FdkError, OSError):
    """Malformed or unreadable dataset file."""

    def __init__(self, message: str, path: object = None) -> None:
        self.path = path
        if path is not None:
            message = f"{path}: {message}"
        super().__init__(message)


class MissingMetadataError(DatasetError):
    """The dataset.meta sidecar is absent."""


class SizeMismatchError(DatasetError):
    """A raw file holds the wrong number of bytes."""
