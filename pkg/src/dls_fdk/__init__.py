"""Top level API.

.. data:: __version__
    :type: str

    Version number as calculated by https://github.com/pypa/setuptools_scm
"""

from ._version import __version__
from .backprojection import (
    Volume,
    VolumeLayout,
    backproject_optimized,
    backproject_standard,
    interp2,
    reshape_volume,
)
from .filtering import Projection, ProjectionKind, filter_projection
from .geometry import CbctGeometry, build_projection_matrix, project_point
from .phantom import forward_project, sample_volume, shepp_logan_3d
from .pipeline import plan_grid, run_pipeline

__all__ = [
    "__version__",
    "CbctGeometry",
    "Projection",
    "ProjectionKind",
    "Volume",
    "VolumeLayout",
    "backproject_optimized",
    "backproject_standard",
    "build_projection_matrix",
    "filter_projection",
    "forward_project",
    "interp2",
    "plan_grid",
    "project_point",
    "reshape_volume",
    "run_pipeline",
    "sample_volume",
    "shepp_logan_3d",
]
