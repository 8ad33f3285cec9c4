"""
Filtering stage: cosine weighting and per-row ramp convolution via FFT.

Projections are held as float32 images of n_v rows by n_u columns. A
filtered projection may be transposed for the symmetric back-projection
kernel, in which case its samples are n_u rows by n_v columns.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, List, Sequence

import numpy as np

from .errors import ShapeError
from .geometry import CbctGeometry

log = logging.getLogger(__name__)

# A window maps frequencies in cycles/sample (0 to 0.5) to a gain
Window = Callable[[np.ndarray], np.ndarray]

# Named apodization windows for the ramp filter. None is the bare Ram-Lak.
RAMP_WINDOWS: Dict[str, Window | None] = {
    "ram-lak": None,
    "shepp-logan": lambda f: np.sinc(f),
    "cosine": lambda f: np.cos(np.pi * f),
    "hann": lambda f: 0.5 + 0.5 * np.cos(2 * np.pi * f),
}


class ProjectionKind(str, Enum):
    RAW = "raw"
    FILTERED = "filtered"
    TRANSPOSED = "transposed-filtered"


@dataclass(eq=False)
class Projection:
    """One detector image.

    Attributes:
        samples: float32 array, (n_v, n_u) or (n_u, n_v) when transposed
        kind: raw, filtered or transposed-filtered
        view_index: view the image belongs to, if known
    """

    samples: np.ndarray
    kind: ProjectionKind = ProjectionKind.RAW
    view_index: int | None = None

    def __post_init__(self) -> None:
        self.kind = ProjectionKind(self.kind)
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 2:
            raise ShapeError(f"projection must be 2D, got shape {self.samples.shape}")
        if not np.isfinite(self.samples).all():
            raise ShapeError("projection holds non-finite samples")

    @property
    def transposed(self) -> bool:
        return self.kind is ProjectionKind.TRANSPOSED

    @property
    def n_u(self) -> int:
        return self.samples.shape[0 if self.transposed else 1]

    @property
    def n_v(self) -> int:
        return self.samples.shape[1 if self.transposed else 0]

    def image(self) -> np.ndarray:
        """Samples indexed [v, u] whatever the storage order."""
        return self.samples.T if self.transposed else self.samples


@dataclass(eq=False)
class CosineTable:
    """Cone-beam obliquity weights, shape (n_v, n_u)."""

    weights: np.ndarray


@dataclass(eq=False)
class RampKernel:
    """Centred spatial filter taps.

    taps has odd length 2 * half_width + 1 and taps[half_width] is h[0].
    """

    taps: np.ndarray
    spacing: float = 1.0
    window: Window | None = None

    def __post_init__(self) -> None:
        self.taps = np.asarray(self.taps, dtype=np.float64)
        if self.taps.ndim != 1 or len(self.taps) % 2 != 1:
            raise ShapeError(f"kernel must have odd length, got {self.taps.shape}")

    @property
    def half_width(self) -> int:
        return len(self.taps) // 2

    def tap(self, n: int) -> float:
        """h[n] for -half_width <= n <= half_width."""
        return float(self.taps[self.half_width + n])


def cosine_table(geom: CbctGeometry) -> CosineTable:
    """Weights D / sqrt(D^2 + u^2 + v^2) with (u, v) in mm from the panel centre."""
    u = (np.arange(geom.n_u) - (geom.n_u - 1) / 2) * geom.d_u
    v = (np.arange(geom.n_v) - (geom.n_v - 1) / 2) * geom.d_v
    uu, vv = np.meshgrid(u, v)
    weights = geom.cap_d / np.sqrt(geom.cap_d**2 + uu**2 + vv**2)
    return CosineTable(weights=weights.astype(np.float32))


def ramp_kernel(
    geom: CbctGeometry, half_width: int | None = None, window: Window | None = None
) -> RampKernel:
    """Ram-Lak taps for the detector pitch d_u.

    h[0] = 1 / (4 d_u^2), h[n] = -1 / (pi^2 n^2 d_u^2) for odd n, 0 otherwise.

    Args:
        geom (CbctGeometry): Scan geometry
        half_width (int, optional): Number of taps either side of the centre.
            Must be at least n_u - 1 so every output sample sees the full row.
            Defaults to n_u - 1.
        window (Window, optional): Frequency-domain apodization applied
            during convolution. Defaults to None (bare Ram-Lak).
    """
    if half_width is None:
        half_width = geom.n_u - 1
    if half_width < geom.n_u - 1:
        raise ShapeError(
            f"ramp half width {half_width} is shorter than n_u - 1 = {geom.n_u - 1}"
        )
    n = np.arange(-half_width, half_width + 1)
    taps = np.zeros(len(n))
    odd = n % 2 == 1
    taps[odd] = -1.0 / (math.pi**2 * n[odd].astype(np.float64) ** 2 * geom.d_u**2)
    taps[half_width] = 1.0 / (4 * geom.d_u**2)
    return RampKernel(taps=taps, spacing=geom.d_u, window=window)


def _fft_size(n: int) -> int:
    return 1 << max(0, (n - 1).bit_length())


def fft_convolve_rows(
    samples: np.ndarray, kernel: RampKernel, axis: int = -1
) -> np.ndarray:
    """Linear convolution of every line along `axis` with the kernel taps.

    Both operands are zero padded to the next power of two at or above
    n + len(taps) - 1, multiplied in the frequency domain and transformed back.
    The result is centre aligned and cropped to the input length. The product
    is evaluated in float64 and rounded to float32 once, on output.
    """
    data = np.moveaxis(np.asarray(samples, dtype=np.float64), axis, -1)
    n = data.shape[-1]
    size = _fft_size(n + len(kernel.taps) - 1)
    response = np.fft.rfft(kernel.taps, size)
    if kernel.window is not None:
        response = response * kernel.window(np.fft.rfftfreq(size))
    spectrum = np.fft.rfft(data, size, axis=-1) * response
    full = np.fft.irfft(spectrum, size, axis=-1)
    start = kernel.half_width
    out = full[..., start : start + n]
    return np.moveaxis(out, -1, axis).astype(np.float32)


def fft_convolve_row(row: np.ndarray, kernel: RampKernel) -> np.ndarray:
    """Convolve a single detector row, see fft_convolve_rows."""
    return fft_convolve_rows(np.asarray(row)[np.newaxis, :], kernel)[0]


def filter_projection(
    e: Projection, cos_tab: CosineTable, ramp: RampKernel
) -> Projection:
    """Cosine weight a raw projection then ramp filter each of its rows."""
    if e.kind is not ProjectionKind.RAW:
        raise ShapeError(f"expected a raw projection, got {e.kind.value}")
    if e.samples.shape != cos_tab.weights.shape:
        raise ShapeError(
            f"projection shape {e.samples.shape} does not match "
            f"cosine table {cos_tab.weights.shape}"
        )
    weighted = e.samples * cos_tab.weights
    q = fft_convolve_rows(weighted, ramp)
    return Projection(samples=q, kind=ProjectionKind.FILTERED, view_index=e.view_index)


def filter_stack(
    projs: Sequence[Projection],
    cos_tab: CosineTable,
    ramp: RampKernel,
    workers: int = 1,
) -> List[Projection]:
    """Filter a list of projections, keeping their order."""
    if workers <= 1:
        return [filter_projection(e, cos_tab, ramp) for e in projs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda e: filter_projection(e, cos_tab, ramp), projs))


def fdk_scale(geom: CbctGeometry) -> float:
    """Remaining FDK amplitude constant d * D * d_u / 2.

    Back-projection already multiplies by theta; this factor converts the
    Ram-Lak sum on the detector grid to a density in the phantom's units.
    """
    return geom.d * geom.cap_d * geom.d_u / 2
