"""
Analytic 3D Shepp-Logan phantom, its voxelization and its exact cone-beam
forward projection.

The phantom is defined in a normalised cube of half extent 1 and is scaled so
that this cube covers 90% of the reconstructed volume. Coordinates are the
world frame of the geometry module (mm, origin at the rotation centre).

Ellipsoid table (Kak & Slaney, extended to 3D; only the rotation about z is
kept)::

    centre (x, y, z)         semi-axes (a, b, c)      phi   density
    ( 0.00,  0.0000,  0.00)  (0.6900, 0.920, 0.810)     0     1.0
    ( 0.00, -0.0184,  0.00)  (0.6624, 0.874, 0.780)     0    -0.8
    ( 0.22,  0.0000,  0.00)  (0.1100, 0.310, 0.220)   -18    -0.2
    (-0.22,  0.0000,  0.00)  (0.1600, 0.410, 0.280)    18    -0.2
    ( 0.00,  0.3500, -0.15)  (0.2100, 0.250, 0.410)     0     0.1
    ( 0.00,  0.1000,  0.25)  (0.0460, 0.046, 0.050)     0     0.1
    ( 0.00, -0.1000,  0.25)  (0.0460, 0.046, 0.050)     0     0.1
    (-0.08, -0.6050,  0.00)  (0.0460, 0.023, 0.050)     0     0.1
    ( 0.00, -0.6060,  0.00)  (0.0230, 0.023, 0.020)     0     0.1
    ( 0.06, -0.6050,  0.00)  (0.0230, 0.046, 0.020)     0     0.1
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import List, Tuple

import numpy as np

from .backprojection import Volume, VolumeLayout
from .errors import GeometryError
from .filtering import Projection, ProjectionKind
from .geometry import (
    CbctGeometry,
    pixel_positions,
    source_position,
    view_angle,
    voxel_centers,
)

log = logging.getLogger(__name__)

# Fraction of the smallest volume extent covered by the phantom's unit cube
FILL_FRACTION = 0.9

Vec3 = Tuple[float, float, float]


@dataclass(frozen=True)
class Ellipsoid:
    center: Vec3
    semi_axes: Vec3
    rotation_deg: float
    density: float

    def __post_init__(self) -> None:
        if min(self.semi_axes) <= 0:
            raise GeometryError(f"semi-axes must be positive, got {self.semi_axes}")

    def scaled(self, s: float) -> "Ellipsoid":
        return replace(
            self,
            center=tuple(c * s for c in self.center),  # type: ignore[arg-type]
            semi_axes=tuple(a * s for a in self.semi_axes),  # type: ignore[arg-type]
        )

    def _to_unit(self, p: np.ndarray, translate: bool = True) -> np.ndarray:
        """Map world points (..., 3) to the frame where this is the unit sphere."""
        phi = math.radians(self.rotation_deg)
        c, s = math.cos(phi), math.sin(phi)
        if translate:
            p = p - np.asarray(self.center)
        x, y, z = p[..., 0], p[..., 1], p[..., 2]
        a, b, cz = self.semi_axes
        return np.stack([(c * x + s * y) / a, (-s * x + c * y) / b, z / cz], axis=-1)

    def contains(self, x: np.ndarray, y: np.ndarray, z: np.ndarray) -> np.ndarray:
        """True where the point lies inside or on the surface."""
        phi = math.radians(self.rotation_deg)
        c, s = math.cos(phi), math.sin(phi)
        dx = x - self.center[0]
        dy = y - self.center[1]
        dz = z - self.center[2]
        a, b, cz = self.semi_axes
        xr = (c * dx + s * dy) / a
        yr = (-s * dx + c * dy) / b
        zr = dz / cz
        return xr * xr + yr * yr + zr * zr <= 1.0

    def chord_lengths(self, start: np.ndarray, stop: np.ndarray) -> np.ndarray:
        """Length of each segment start -> stop lying inside the ellipsoid.

        start and stop broadcast against each other with a trailing axis of 3.
        """
        start, stop = np.broadcast_arrays(start, stop)
        p0 = self._to_unit(start)
        dv = self._to_unit(stop - start, translate=False)
        qa = np.einsum("...i,...i->...", dv, dv)
        qb = 2 * np.einsum("...i,...i->...", p0, dv)
        qc = np.einsum("...i,...i->...", p0, p0) - 1.0
        disc = qb * qb - 4 * qa * qc
        hit = disc > 0
        root = np.sqrt(np.where(hit, disc, 0.0))
        t_in = np.clip((-qb - root) / (2 * qa), 0.0, 1.0)
        t_out = np.clip((-qb + root) / (2 * qa), 0.0, 1.0)
        length = np.linalg.norm(stop - start, axis=-1)
        return np.where(hit, (t_out - t_in) * length, 0.0)


@dataclass(frozen=True)
class Phantom:
    ellipsoids: Tuple[Ellipsoid, ...]
    half_extent: float = 1.0

    def __post_init__(self) -> None:
        if not self.ellipsoids:
            raise GeometryError("a phantom needs at least one ellipsoid")

    def scaled(self, s: float) -> "Phantom":
        return Phantom(
            ellipsoids=tuple(e.scaled(s) for e in self.ellipsoids),
            half_extent=self.half_extent * s,
        )

    def fitted(self, geom: CbctGeometry) -> "Phantom":
        """Scale so the bounding cube fills FILL_FRACTION of the volume."""
        target = FILL_FRACTION * min(geom.volume_extent) / 2
        return self.scaled(target / self.half_extent)

    def density_at(self, x: np.ndarray, y: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Summed density of all ellipsoids containing each point."""
        x, y, z = np.broadcast_arrays(
            np.asarray(x, dtype=np.float64),
            np.asarray(y, dtype=np.float64),
            np.asarray(z, dtype=np.float64),
        )
        total = np.zeros(x.shape)
        for e in self.ellipsoids:
            total = total + np.where(e.contains(x, y, z), e.density, 0.0)
        return total


_SHEPP_LOGAN_TABLE: List[Tuple[Vec3, Vec3, float, float]] = [
    ((0.0, 0.0, 0.0), (0.69, 0.92, 0.81), 0.0, 1.0),
    ((0.0, -0.0184, 0.0), (0.6624, 0.874, 0.78), 0.0, -0.8),
    ((0.22, 0.0, 0.0), (0.11, 0.31, 0.22), -18.0, -0.2),
    ((-0.22, 0.0, 0.0), (0.16, 0.41, 0.28), 18.0, -0.2),
    ((0.0, 0.35, -0.15), (0.21, 0.25, 0.41), 0.0, 0.1),
    ((0.0, 0.1, 0.25), (0.046, 0.046, 0.05), 0.0, 0.1),
    ((0.0, -0.1, 0.25), (0.046, 0.046, 0.05), 0.0, 0.1),
    ((-0.08, -0.605, 0.0), (0.046, 0.023, 0.05), 0.0, 0.1),
    ((0.0, -0.606, 0.0), (0.023, 0.023, 0.02), 0.0, 0.1),
    ((0.06, -0.605, 0.0), (0.023, 0.046, 0.02), 0.0, 0.1),
]


def shepp_logan_3d() -> Phantom:
    """The 10-ellipsoid 3D Shepp-Logan phantom in a cube of half extent 1."""
    return Phantom(
        ellipsoids=tuple(
            Ellipsoid(center=c, semi_axes=a, rotation_deg=phi, density=rho)
            for c, a, phi, rho in _SHEPP_LOGAN_TABLE
        )
    )


def sample_volume(ph: Phantom, geom: CbctGeometry) -> Volume:
    """Voxelize the fitted phantom at voxel centres into an i-major volume."""
    fitted = ph.fitted(geom)
    x, y, z = voxel_centers(geom)
    density = fitted.density_at(
        x[np.newaxis, np.newaxis, :],
        y[np.newaxis, :, np.newaxis],
        z[:, np.newaxis, np.newaxis],
    )
    return Volume(density.astype(np.float32), VolumeLayout.I_MAJOR)


def forward_project(ph: Phantom, geom: CbctGeometry, view_index: int) -> Projection:
    """Exact line integrals of the fitted phantom through every pixel centre.

    Each pixel value is the sum over ellipsoids of the chord length of the
    source-to-pixel segment inside the ellipsoid times its density.
    """
    beta = view_angle(geom, view_index)
    fitted = ph.fitted(geom)
    source = source_position(geom, beta)
    u = np.arange(geom.n_u, dtype=np.float64)[np.newaxis, :]
    v = np.arange(geom.n_v, dtype=np.float64)[:, np.newaxis]
    pixels = pixel_positions(geom, beta, u, v)
    total = np.zeros((geom.n_v, geom.n_u))
    for e in fitted.ellipsoids:
        total += e.density * e.chord_lengths(source, pixels)
    return Projection(samples=total, kind=ProjectionKind.RAW, view_index=view_index)


def forward_project_all(
    ph: Phantom, geom: CbctGeometry, workers: int = 1
) -> List[Projection]:
    """Forward project every view of the scan, in view order."""
    views = range(geom.n_p)
    if workers <= 1:
        return [forward_project(ph, geom, s) for s in views]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: forward_project(ph, geom, s), views))
