"""
Circular cone-beam scan geometry and the projection matrices derived from it.

The projection matrix for view s maps homogeneous voxel indices to projective
detector coordinates::

    [x, y, z]^T = P_s . [i, j, k, 1]^T
    [u, v]^T    = [x, y]^T / z

P_s is the top three rows of M1 . Mrot(beta) . M0, where M0 takes voxel indices
to centred physical coordinates (mm), Mrot rotates the gantry by beta and moves
the origin to the source, and M1 projects onto the flat panel in pixel units.

Three properties follow from the structure of these matrices and are what the
symmetric back-projection kernel relies on. For a fixed column (i, j):

- z does not depend on k and equals depth_z(geom, beta, i, j);
- u does not depend on k;
- v(k) + v(n_z - 1 - k) == n_v - 1.
"""

import logging
import math
from dataclasses import dataclass, field, fields
from typing import Dict, List, Mapping, NamedTuple

import numpy as np

from .errors import DegenerateGeometryError, GeometryError, ViewIndexError

log = logging.getLogger(__name__)

# Smallest |z| accepted by project_point
MIN_DEPTH = 1e-12

_INT_FIELDS = ("n_u", "n_v", "n_p", "n_x", "n_y", "n_z")
_FLOAT_FIELDS = ("d_u", "d_v", "d_x", "d_y", "d_z", "d", "cap_d")


@dataclass(frozen=True)
class CbctGeometry:
    """All scan parameters of a circular cone-beam acquisition.

    Distances and pitches are in mm. The angle step theta is always derived
    from n_p and can not be set independently.
    """

    n_u: int
    n_v: int
    d_u: float
    d_v: float
    n_p: int
    n_x: int
    n_y: int
    n_z: int
    d_x: float
    d_y: float
    d_z: float
    d: float
    cap_d: float
    theta: float = field(init=False)

    def __post_init__(self) -> None:
        for name in _INT_FIELDS:
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise GeometryError(f"{name} must be an integer >= 1, got {value}")
            object.__setattr__(self, name, int(value))
        for name in _FLOAT_FIELDS:
            value = float(getattr(self, name))
            if not math.isfinite(value) or value <= 0:
                raise GeometryError(f"{name} must be a positive number, got {value}")
            object.__setattr__(self, name, value)
        if not self.cap_d > self.d:
            raise GeometryError(
                f"source-detector distance cap_d={self.cap_d} must exceed "
                f"source-axis distance d={self.d}"
            )
        object.__setattr__(self, "theta", 2 * math.pi / self.n_p)

    @classmethod
    def from_mapping(cls, values: Mapping[str, str | int | float]) -> "CbctGeometry":
        """Build a geometry from a flat key=value mapping.

        Keys that are not geometry fields raise a GeometryError, except theta
        which is accepted and ignored since it is always derived from n_p.
        """
        known = set(_INT_FIELDS) | set(_FLOAT_FIELDS)
        unknown = set(values) - known - {"theta"}
        if unknown:
            raise GeometryError(f"unknown geometry keys: {', '.join(sorted(unknown))}")
        missing = known - set(values)
        if missing:
            raise GeometryError(f"missing geometry keys: {', '.join(sorted(missing))}")
        kwargs: Dict[str, int | float] = {}
        try:
            for name in _INT_FIELDS:
                kwargs[name] = int(values[name])
            for name in _FLOAT_FIELDS:
                kwargs[name] = float(values[name])
        except ValueError as e:
            raise GeometryError(f"malformed geometry value: {e}") from e
        return cls(**kwargs)  # type: ignore[arg-type]

    def to_mapping(self) -> Dict[str, str]:
        """Return the geometry as a flat mapping of strings, theta excluded."""
        return {
            f.name: repr(getattr(self, f.name)) for f in fields(self) if f.init
        }

    @property
    def volume_shape(self) -> tuple[int, int, int]:
        return (self.n_x, self.n_y, self.n_z)

    @property
    def volume_extent(self) -> tuple[float, float, float]:
        """Physical size of the volume along x, y, z in mm."""
        return (self.n_x * self.d_x, self.n_y * self.d_y, self.n_z * self.d_z)

    def problem_label(self) -> str:
        """Problem notation, e.g. ``256x256x360->128x128x128``."""
        return (
            f"{self.n_u}x{self.n_v}x{self.n_p}->{self.n_x}x{self.n_y}x{self.n_z}"
        )


@dataclass(frozen=True, eq=False)
class ProjectionMatrix:
    """The 3x4 projection matrix of one view."""

    rows: np.ndarray
    beta: float
    view_index: int

    def __post_init__(self) -> None:
        assert self.rows.shape == (3, 4)


class DetectorPoint(NamedTuple):
    """Detector coordinates in pixels and the projective depth z in mm."""

    u: float
    v: float
    z: float


def _m0(geom: CbctGeometry) -> np.ndarray:
    scale = np.diag([geom.d_x, geom.d_y, geom.d_z, 1.0])
    centre = np.array(
        [
            [1.0, 0.0, 0.0, -(geom.n_x - 1) / 2],
            [0.0, -1.0, 0.0, (geom.n_y - 1) / 2],
            [0.0, 0.0, -1.0, (geom.n_z - 1) / 2],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )
    return scale @ centre


def _mrot(geom: CbctGeometry, beta: float) -> np.ndarray:
    to_source = np.array(
        [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, -1.0, 0.0],
            [0.0, 1.0, 0.0, geom.d],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )
    c, s = math.cos(beta), math.sin(beta)
    rotate = np.array(
        [
            [c, -s, 0.0, 0.0],
            [s, c, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )
    return to_source @ rotate


def _m1(geom: CbctGeometry) -> np.ndarray:
    pitch = np.diag([1 / geom.d_u, 1 / geom.d_v, 1.0, 1.0])
    panel = np.array(
        [
            [geom.cap_d, 0.0, (geom.n_u - 1) * geom.d_u / 2, 0.0],
            [0.0, geom.cap_d, (geom.n_v - 1) * geom.d_v / 2, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )
    return pitch @ panel


def view_angle(geom: CbctGeometry, view_index: int) -> float:
    """Return beta for a view, raising ViewIndexError when out of range."""
    if not 0 <= view_index < geom.n_p:
        raise ViewIndexError(f"view index {view_index} outside [0, {geom.n_p})")
    return view_index * geom.theta


def build_projection_matrix(geom: CbctGeometry, view_index: int) -> ProjectionMatrix:
    """Build P_s for one view as the top three rows of M1 . Mrot . M0.

    Args:
        geom (CbctGeometry): Scan geometry
        view_index (int): View number in [0, n_p)

    Returns:
        ProjectionMatrix: Matrix, angle and view number
    """
    beta = view_angle(geom, view_index)
    full = _m1(geom) @ _mrot(geom, beta) @ _m0(geom)
    return ProjectionMatrix(rows=full[:3].copy(), beta=beta, view_index=view_index)


def build_projection_matrices(geom: CbctGeometry) -> List[ProjectionMatrix]:
    """Build the matrices of every view of the scan."""
    return [build_projection_matrix(geom, s) for s in range(geom.n_p)]


def project_point(P: ProjectionMatrix, i: float, j: float, k: float) -> DetectorPoint:
    """Project the voxel (i, j, k) onto the detector.

    Raises:
        DegenerateGeometryError: if the projective depth is below MIN_DEPTH
    """
    x, y, z = P.rows @ np.array([i, j, k, 1.0])
    if abs(z) < MIN_DEPTH:
        raise DegenerateGeometryError(
            f"voxel ({i}, {j}, {k}) has depth {z} in view {P.view_index}"
        )
    return DetectorPoint(u=float(x / z), v=float(y / z), z=float(z))


def depth_z(geom: CbctGeometry, beta: float, i: float, j: float) -> float:
    """Closed form of the projective depth, independent of k."""
    return (
        geom.d
        + math.sin(beta) * (i - (geom.n_x - 1) / 2) * geom.d_x
        - math.cos(beta) * (j - (geom.n_y - 1) / 2) * geom.d_y
    )


def voxel_center(geom: CbctGeometry, i: float, j: float, k: float) -> np.ndarray:
    """Physical (world) position in mm of the centre of voxel (i, j, k)."""
    return (_m0(geom) @ np.array([i, j, k, 1.0]))[:3]


def voxel_centers(geom: CbctGeometry) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """World coordinate axes of the voxel centres along i, j and k."""
    x = (np.arange(geom.n_x) - (geom.n_x - 1) / 2) * geom.d_x
    y = ((geom.n_y - 1) / 2 - np.arange(geom.n_y)) * geom.d_y
    z = ((geom.n_z - 1) / 2 - np.arange(geom.n_z)) * geom.d_z
    return x, y, z


def source_position(geom: CbctGeometry, beta: float) -> np.ndarray:
    """World position of the X-ray source at gantry angle beta."""
    return (np.linalg.inv(_mrot(geom, beta)) @ np.array([0.0, 0.0, 0.0, 1.0]))[:3]


def pixel_positions(
    geom: CbctGeometry, beta: float, u: np.ndarray, v: np.ndarray
) -> np.ndarray:
    """World positions of detector points (u, v) in pixels at angle beta.

    u and v broadcast against each other; the result has a trailing axis of 3.
    """
    u, v = np.broadcast_arrays(np.asarray(u, dtype=float), np.asarray(v, dtype=float))
    a = (u - (geom.n_u - 1) / 2) * geom.d_u
    b = (v - (geom.n_v - 1) / 2) * geom.d_v
    gantry = np.stack([a, b, np.full_like(a, geom.cap_d), np.ones_like(a)], axis=-1)
    world = gantry @ np.linalg.inv(_mrot(geom, beta)).T
    return world[..., :3]
