"""
On-disk formats for projections and volumes.

A dataset directory holds one raw file per image plus a ``dataset.meta``
sidecar of flat key=value lines. Raw files are little-endian IEEE-754 single
precision, row-major, with no header:

- projections: ``proj_#####.raw``, n_v rows of n_u samples
- volumes: ``slice_#####.raw``, slice k is n_y rows of n_x samples
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from .backprojection import Volume, VolumeLayout
from .errors import (
    DatasetError,
    LayoutError,
    MissingMetadataError,
    ShapeError,
    SizeMismatchError,
)
from .filtering import Projection, ProjectionKind
from .geometry import CbctGeometry

log = logging.getLogger(__name__)

META_NAME = "dataset.meta"
REPORT_NAME = "report.txt"
SAMPLE_TYPE = "float32-le"
_DTYPE = np.dtype("<f4")


def read_key_value(path: Path) -> Dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    values: Dict[str, str] = {}
    with open(path, "r") as f:
        for number, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DatasetError(f"line {number} is not key=value: {line!r}", path)
            key, value = (part.strip() for part in line.split("=", 1))
            values[key] = value
    return values


def write_key_value(path: Path, values: Mapping[str, object]) -> None:
    with open(path, "w") as f:
        for key, value in values.items():
            f.write(f"{key}={value}\n")


@dataclass(frozen=True)
class DatasetMeta:
    """Geometry and content description stored next to the raw files."""

    geometry: CbctGeometry
    kind: str
    layout: str
    projection_kind: str = ProjectionKind.RAW.value
    sample_type: str = SAMPLE_TYPE

    def __post_init__(self) -> None:
        if self.kind not in ("projections", "volume"):
            raise DatasetError(f"unknown data kind {self.kind!r}")
        if self.sample_type != SAMPLE_TYPE:
            raise DatasetError(f"unsupported sample type {self.sample_type!r}")

    def to_mapping(self) -> Dict[str, str]:
        values = {
            "kind": self.kind,
            "sample_type": self.sample_type,
            "layout": self.layout,
        }
        if self.kind == "projections":
            values["projection_kind"] = self.projection_kind
        values.update(self.geometry.to_mapping())
        return values

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "DatasetMeta":
        values = dict(values)
        header = {
            key: values.pop(key)
            for key in ("kind", "sample_type", "layout", "projection_kind")
            if key in values
        }
        if "kind" not in header or "layout" not in header:
            raise DatasetError("metadata lacks kind or layout")
        return cls(geometry=CbctGeometry.from_mapping(values), **header)

    @classmethod
    def for_projections(
        cls, geom: CbctGeometry, kind: ProjectionKind = ProjectionKind.RAW
    ) -> "DatasetMeta":
        return cls(geom, "projections", "row-major", projection_kind=kind.value)

    @classmethod
    def for_volume(cls, geom: CbctGeometry) -> "DatasetMeta":
        return cls(geom, "volume", VolumeLayout.I_MAJOR.value)


@dataclass(frozen=True)
class SliceSet:
    """A directory of n_z volume slices of n_x by n_y voxels."""

    directory: Path
    n_z: int
    n_x: int
    n_y: int

    def path(self, k: int) -> Path:
        return slice_path(self.directory, k)

    def paths(self) -> List[Path]:
        return [self.path(k) for k in range(self.n_z)]


def projection_path(directory: Path, view_index: int) -> Path:
    return Path(directory) / f"proj_{view_index:05d}.raw"


def slice_path(directory: Path, k: int) -> Path:
    return Path(directory) / f"slice_{k:05d}.raw"


def read_meta(directory: Path) -> DatasetMeta:
    path = Path(directory) / META_NAME
    if not path.is_file():
        raise MissingMetadataError(f"no {META_NAME} sidecar", path)
    try:
        return DatasetMeta.from_mapping(read_key_value(path))
    except DatasetError:
        raise
    except ValueError as e:
        raise DatasetError(str(e), path) from e


def write_meta(directory: Path, meta: DatasetMeta) -> None:
    write_key_value(Path(directory) / META_NAME, meta.to_mapping())


def _read_raw(path: Path, shape: Tuple[int, int]) -> np.ndarray:
    expected = _DTYPE.itemsize * shape[0] * shape[1]
    try:
        data = path.read_bytes()
    except FileNotFoundError as e:
        raise DatasetError("file is missing", path) from e
    if len(data) != expected:
        raise SizeMismatchError(
            f"holds {len(data)} bytes, expected {expected} "
            f"({_DTYPE.itemsize}*{shape[1]}*{shape[0]})",
            path,
        )
    return np.frombuffer(data, dtype=_DTYPE).reshape(shape).astype(np.float32)


def _write_raw(path: Path, samples: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(samples, dtype=_DTYPE).tobytes())


def write_projections(
    stack: Sequence[Projection], meta: DatasetMeta, path: Path
) -> None:
    """Write one raw file per projection and the metadata sidecar.

    Raises:
        ShapeError: the stack does not agree with the metadata
    """
    geom = meta.geometry
    if meta.kind != "projections":
        raise ShapeError(f"metadata describes a {meta.kind}, not projections")
    if len(stack) != geom.n_p:
        raise ShapeError(f"{len(stack)} projections, metadata says n_p={geom.n_p}")
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    for s, q in enumerate(stack):
        if q.transposed or q.samples.shape != (geom.n_v, geom.n_u):
            raise ShapeError(
                f"projection {s} has shape {q.samples.shape}, "
                f"expected ({geom.n_v}, {geom.n_u})"
            )
        _write_raw(projection_path(directory, s), q.samples)
    write_meta(directory, meta)
    log.info("wrote %d projections to %s", len(stack), directory)


class ProjectionReader:
    """Loads single projections of a dataset directory on demand."""

    def __init__(self, path: Path) -> None:
        self.directory = Path(path)
        self.meta = read_meta(self.directory)
        if self.meta.kind != "projections":
            raise DatasetError(
                f"dataset holds a {self.meta.kind}", self.directory / META_NAME
            )

    @property
    def geometry(self) -> CbctGeometry:
        return self.meta.geometry

    def load(self, view_index: int) -> Projection:
        geom = self.meta.geometry
        samples = _read_raw(
            projection_path(self.directory, view_index), (geom.n_v, geom.n_u)
        )
        return Projection(
            samples=samples,
            kind=ProjectionKind(self.meta.projection_kind),
            view_index=view_index,
        )

    def __call__(self, view_index: int) -> Projection:
        return self.load(view_index)


def read_projections(path: Path) -> Tuple[List[Projection], DatasetMeta]:
    """Read back a directory written by write_projections."""
    reader = ProjectionReader(path)
    stack = [reader.load(s) for s in range(reader.geometry.n_p)]
    return stack, reader.meta


def write_slice(directory: Path, k: int, plane: np.ndarray) -> None:
    """Write slice k, an (n_y, n_x) plane."""
    _write_raw(slice_path(directory, k), plane)


class SliceDirectorySink:
    """Output sink writing each finished slice as its own raw file."""

    def __init__(self, directory: Path, meta: DatasetMeta) -> None:
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        write_meta(self.directory, meta)

    def __call__(self, k: int, plane: np.ndarray) -> None:
        write_slice(self.directory, k, plane)


def write_volume_slices(
    vol: Volume, meta: DatasetMeta, directory: Path, workers: int = 1
) -> SliceSet:
    """Write an i-major volume as n_z slice files plus the metadata sidecar.

    Raises:
        LayoutError: the volume is k-major; reshape it to i-major first
    """
    if vol.layout is not VolumeLayout.I_MAJOR:
        raise LayoutError(
            f"volume is {vol.layout.value}; reshape_volume(vol, "
            f"VolumeLayout.I_MAJOR) before writing slices"
        )
    if vol.shape != meta.geometry.volume_shape:
        raise ShapeError(
            f"volume is {vol.shape}, metadata says {meta.geometry.volume_shape}"
        )
    sink = SliceDirectorySink(directory, meta)
    n_x, n_y, n_z = vol.shape
    if workers <= 1:
        for k in range(n_z):
            sink(k, vol.samples[k])
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda k: sink(k, vol.samples[k]), range(n_z)))
    log.info("wrote %d slices to %s", n_z, directory)
    return SliceSet(directory=Path(directory), n_z=n_z, n_x=n_x, n_y=n_y)


def read_volume_slices(directory: Path) -> Tuple[Volume, DatasetMeta]:
    """Read a slice directory back into an i-major volume."""
    meta = read_meta(Path(directory))
    if meta.kind != "volume":
        raise DatasetError(f"dataset holds {meta.kind}", Path(directory) / META_NAME)
    geom = meta.geometry
    planes = [
        _read_raw(slice_path(Path(directory), k), (geom.n_y, geom.n_x))
        for k in range(geom.n_z)
    ]
    return Volume(np.stack(planes), VolumeLayout.I_MAJOR), meta


def write_report(directory: Path, sections: Mapping[str, Mapping[str, object]]) -> Path:
    """Write report.txt: one ``[section]`` header then key=value lines each."""
    path = Path(directory) / REPORT_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for name, values in sections.items():
            f.write(f"[{name}]\n")
            for key, value in values.items():
                f.write(f"{key}={value}\n")
    return path
