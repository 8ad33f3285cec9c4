"""
Voxel-driven back-projection.

Two kernels produce the same volume:

- backproject_standard evaluates all three rows of P_s for every voxel and
  view, on an i-major volume.
- backproject_optimized loops over (i, j) columns of a k-major volume. x, z, u
  and the distance weight are computed once per column, y once per pair of
  slices k and n_z - 1 - k, and the mirrored slice reuses v through
  v' = n_v - 1 - v. That brings the projection arithmetic down to
  (2 + n_z / 2) inner products per column instead of 3 n_z.

Kernels are vectorised with numpy; OpCounter tallies the 1x4 inner products the
scalar loops would execute, so the counts match the loop structure exactly.
"""

import logging
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Sequence, Tuple

import numpy as np

from .errors import DegenerateGeometryError, ShapeError, UnsupportedShapeError
from .filtering import Projection, ProjectionKind
from .geometry import MIN_DEPTH, CbctGeometry, ProjectionMatrix

log = logging.getLogger(__name__)

# Projections transposed and resident at once in the optimized kernel
DEFAULT_BATCH = 32


class VolumeLayout(str, Enum):
    I_MAJOR = "i-major"
    K_MAJOR = "k-major"


@dataclass(eq=False)
class Volume:
    """A float32 voxel grid.

    i-major samples have shape (n_z, n_y, n_x), so the flat index is
    k*n_y*n_x + j*n_x + i. k-major samples have shape (n_x, n_y, n_z), flat
    index i*n_y*n_z + j*n_z + k.
    """

    samples: np.ndarray
    layout: VolumeLayout = VolumeLayout.I_MAJOR

    def __post_init__(self) -> None:
        self.layout = VolumeLayout(self.layout)
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 3:
            raise ShapeError(f"volume must be 3D, got shape {self.samples.shape}")

    @classmethod
    def zeros(
        cls, shape: Tuple[int, int, int], layout: VolumeLayout = VolumeLayout.I_MAJOR
    ) -> "Volume":
        """Empty volume of (n_x, n_y, n_z) voxels."""
        n_x, n_y, n_z = shape
        dims = (n_z, n_y, n_x) if layout is VolumeLayout.I_MAJOR else (n_x, n_y, n_z)
        return cls(np.zeros(dims, dtype=np.float32), layout)

    @property
    def shape(self) -> Tuple[int, int, int]:
        """(n_x, n_y, n_z) whatever the layout."""
        a, b, c = self.samples.shape
        return (c, b, a) if self.layout is VolumeLayout.I_MAJOR else (a, b, c)

    @property
    def n_x(self) -> int:
        return self.shape[0]

    @property
    def n_y(self) -> int:
        return self.shape[1]

    @property
    def n_z(self) -> int:
        return self.shape[2]

    def value(self, i: int, j: int, k: int) -> float:
        if self.layout is VolumeLayout.I_MAJOR:
            return float(self.samples[k, j, i])
        return float(self.samples[i, j, k])

    def copy(self) -> "Volume":
        return Volume(self.samples.copy(), self.layout)


@dataclass
class OpCounter:
    """Number of 1x4 inner products executed while projecting voxels."""

    inner_products: int = 0
    _lock: threading.Lock = field(
        default_factory=threading.Lock, repr=False, compare=False
    )

    def add(self, n: int) -> None:
        with self._lock:
            self.inner_products += int(n)


def standard_count(geom: CbctGeometry) -> int:
    """Inner products of the standard kernel, 3 per voxel per view."""
    return 3 * geom.n_p * geom.n_x * geom.n_y * geom.n_z


def optimized_count(geom: CbctGeometry) -> int:
    """Inner products of the symmetric kernel, 2 + n_z/2 per column per view."""
    return geom.n_p * geom.n_x * geom.n_y * (2 + geom.n_z // 2)


def _bilinear(
    samples: np.ndarray, u: np.ndarray, v: np.ndarray, transposed: bool = False
) -> np.ndarray:
    """Bilinear samples at (u, v); points whose support leaves the image give 0.

    samples is indexed [v, u], or [u, v] when transposed. The neighbour index
    is clamped at the last row/column, where its weight is exactly zero.
    """
    if transposed:
        n_u, n_v = samples.shape
    else:
        n_v, n_u = samples.shape
    valid = (u >= 0) & (u <= n_u - 1) & (v >= 0) & (v <= n_v - 1)
    uc = np.where(valid, u, 0.0)
    vc = np.where(valid, v, 0.0)
    iu = np.floor(uc).astype(np.intp)
    iv = np.floor(vc).astype(np.intp)
    du = uc - iu
    dv = vc - iv
    iu1 = np.minimum(iu + 1, n_u - 1)
    iv1 = np.minimum(iv + 1, n_v - 1)
    if transposed:
        t1 = samples[iu, iv] * (1 - du) + samples[iu1, iv] * du
        t2 = samples[iu, iv1] * (1 - du) + samples[iu1, iv1] * du
    else:
        t1 = samples[iv, iu] * (1 - du) + samples[iv, iu1] * du
        t2 = samples[iv1, iu] * (1 - du) + samples[iv1, iu1] * du
    return np.where(valid, t1 * (1 - dv) + t2 * dv, 0.0)


def interp2(x: Projection, u: float, v: float) -> float:
    """Bilinear interpolation of a projection at detector point (u, v).

    Coordinates are always detector (u, v); transposed projections are read in
    their own storage order. Out-of-range samples return 0.
    """
    value = _bilinear(
        x.samples,
        np.asarray(u, dtype=np.float64),
        np.asarray(v, dtype=np.float64),
        transposed=x.transposed,
    )
    return float(value)


def transpose_projection(q: Projection) -> Projection:
    """Swap rows and columns of a filtered projection (and back again)."""
    if q.kind is ProjectionKind.FILTERED:
        kind = ProjectionKind.TRANSPOSED
    elif q.kind is ProjectionKind.TRANSPOSED:
        kind = ProjectionKind.FILTERED
    else:
        raise ShapeError("only filtered projections can be transposed")
    return Projection(samples=q.samples.T.copy(), kind=kind, view_index=q.view_index)


def reshape_volume(v: Volume, target_layout: VolumeLayout) -> Volume:
    """Re-address the voxels of v under the target layout."""
    target_layout = VolumeLayout(target_layout)
    if v.layout is target_layout:
        return v
    # both layouts are the reverse axis order of each other
    return Volume(np.ascontiguousarray(v.samples.transpose(2, 1, 0)), target_layout)


def _check_inputs(
    mats: Sequence[ProjectionMatrix],
    projs: Sequence[Projection],
    geom: CbctGeometry,
    kinds: Tuple[ProjectionKind, ...],
) -> None:
    if len(mats) != len(projs):
        raise ShapeError(f"{len(mats)} matrices but {len(projs)} projections")
    for q in projs:
        if q.kind not in kinds:
            raise ShapeError(f"view {q.view_index}: projection is {q.kind.value}")
        if (q.n_u, q.n_v) != (geom.n_u, geom.n_v):
            raise ShapeError(
                f"view {q.view_index}: projection is {q.n_u}x{q.n_v}, "
                f"geometry expects {geom.n_u}x{geom.n_v}"
            )


def _check_depth(z: np.ndarray, P: ProjectionMatrix) -> None:
    if np.abs(z).min() < MIN_DEPTH:
        raise DegenerateGeometryError(
            f"a voxel lies in the source plane of view {P.view_index}"
        )


def backproject_standard(
    mats: Sequence[ProjectionMatrix],
    projs: Sequence[Projection],
    geom: CbctGeometry,
    counter: OpCounter | None = None,
) -> Volume:
    """Back-project filtered projections, three inner products per voxel.

    Args:
        mats (Sequence[ProjectionMatrix]): One matrix per projection
        projs (Sequence[Projection]): Filtered, untransposed projections
        geom (CbctGeometry): Scan geometry
        counter (OpCounter, optional): Receives the inner-product count

    Returns:
        Volume: i-major volume scaled by theta
    """
    _check_inputs(mats, projs, geom, (ProjectionKind.FILTERED,))
    counter = counter if counter is not None else OpCounter()
    vol = Volume.zeros(geom.volume_shape, VolumeLayout.I_MAJOR)
    acc = vol.samples
    i = np.arange(geom.n_x, dtype=np.float64)[np.newaxis, np.newaxis, :]
    j = np.arange(geom.n_y, dtype=np.float64)[np.newaxis, :, np.newaxis]
    k = np.arange(geom.n_z, dtype=np.float64)[:, np.newaxis, np.newaxis]
    n_voxels = geom.n_x * geom.n_y * geom.n_z
    for P, q in zip(mats, projs, strict=True):
        r = P.rows
        x = r[0, 0] * i + r[0, 1] * j + r[0, 2] * k + r[0, 3]
        y = r[1, 0] * i + r[1, 1] * j + r[1, 2] * k + r[1, 3]
        z = r[2, 0] * i + r[2, 1] * j + r[2, 2] * k + r[2, 3]
        counter.add(3 * n_voxels)
        _check_depth(z, P)
        f = 1.0 / z
        w_dis = f * f
        u = x * f
        v = y * f
        u, v = np.broadcast_arrays(u, v)
        acc += (np.broadcast_to(w_dis, u.shape) * _bilinear(q.samples, u, v)).astype(
            np.float32
        )
    acc *= np.float32(geom.theta)
    log.debug("standard back-projection of %d views done", len(projs))
    return vol


def accumulate_symmetric(
    acc: np.ndarray,
    P: ProjectionMatrix,
    q: Projection,
    geom: CbctGeometry,
    k_start: int = 0,
    counter: OpCounter | None = None,
) -> None:
    """Add one transposed projection into a k-major band pair.

    acc has shape (n_x, n_y, 2h). Local slice t < h is global slice
    k_start + t, local slice 2h - 1 - t is its mirror n_z - 1 - (k_start + t).
    With k_start = 0 and 2h = n_z the band pair is the whole volume.
    """
    assert q.transposed
    n_x, n_y, depth = acc.shape
    h = depth // 2
    i = np.arange(n_x, dtype=np.float64)[:, np.newaxis]
    j = np.arange(n_y, dtype=np.float64)[np.newaxis, :]
    r = P.rows
    # t = [i, j, 0, 1]
    x = r[0, 0] * i + r[0, 1] * j + r[0, 2] * 0.0 + r[0, 3]
    z = r[2, 0] * i + r[2, 1] * j + r[2, 2] * 0.0 + r[2, 3]
    _check_depth(z, P)
    f = 1.0 / z
    u = x * f
    w_dis = f * f
    k = np.arange(k_start, k_start + h, dtype=np.float64)
    y = (
        r[1, 0] * i[..., np.newaxis]
        + r[1, 1] * j[..., np.newaxis]
        + r[1, 2] * k
        + r[1, 3]
    )
    if counter is not None:
        counter.add(n_x * n_y * (2 + h))
    v = y * f[..., np.newaxis]
    v_mirror = (geom.n_v - 1) - v
    u3 = np.broadcast_to(u[..., np.newaxis], v.shape)
    w3 = w_dis[..., np.newaxis]
    near = w3 * _bilinear(q.samples, u3, v, transposed=True)
    far = w3 * _bilinear(q.samples, u3, v_mirror, transposed=True)
    acc[:, :, :h] += near.astype(np.float32)
    acc[:, :, h:] += far[:, :, ::-1].astype(np.float32)


def accumulate_batches(
    acc: np.ndarray,
    mats: Sequence[ProjectionMatrix],
    projs: Sequence[Projection],
    geom: CbctGeometry,
    batch: int = DEFAULT_BATCH,
    k_start: int = 0,
    counter: OpCounter | None = None,
) -> None:
    """Transpose and accumulate projections `batch` at a time, in list order."""
    if batch < 1:
        raise ShapeError(f"batch must be >= 1, got {batch}")
    for start in range(0, len(projs), batch):
        stop = min(start + batch, len(projs))
        resident: List[Projection] = [
            q if q.transposed else transpose_projection(q) for q in projs[start:stop]
        ]
        for P, q in zip(mats[start:stop], resident, strict=True):
            accumulate_symmetric(acc, P, q, geom, k_start=k_start, counter=counter)
        log.debug("back-projected views %d..%d", start, stop - 1)


def backproject_optimized(
    mats: Sequence[ProjectionMatrix],
    projs: Sequence[Projection],
    geom: CbctGeometry,
    batch: int = DEFAULT_BATCH,
    counter: OpCounter | None = None,
) -> Volume:
    """Back-project using the z-symmetry of the projection matrices.

    Args:
        mats (Sequence[ProjectionMatrix]): One matrix per projection
        projs (Sequence[Projection]): Filtered projections, transposed or not
        geom (CbctGeometry): Scan geometry, n_z must be even
        batch (int, optional): Projections per volume pass. Defaults to 32.
        counter (OpCounter, optional): Receives the inner-product count

    Returns:
        Volume: i-major volume scaled by theta
    """
    if geom.n_z % 2:
        raise UnsupportedShapeError(
            f"symmetric kernel needs an even n_z, got {geom.n_z}"
        )
    _check_inputs(
        mats, projs, geom, (ProjectionKind.FILTERED, ProjectionKind.TRANSPOSED)
    )
    vol = Volume.zeros(geom.volume_shape, VolumeLayout.K_MAJOR)
    accumulate_batches(vol.samples, mats, projs, geom, batch=batch, counter=counter)
    vol.samples *= np.float32(geom.theta)
    return reshape_volume(vol, VolumeLayout.I_MAJOR)
