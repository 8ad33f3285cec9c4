"""
Closed-form performance model of the pipelined reconstruction.

Stage times are built from micro-benchmark throughputs. Loading, filtering,
AllGather and back-projection overlap, so::

    T_compute = max(T_load, T_flt, T_AllGather, T_bp)
    T_post    = T_D2H + T_reduce + T_store   (+ T_trans when th_trans is known)
    T_runtime = T_compute + T_post
    delta     = (T_flt + T_AllGather + T_bp) / T_compute

Bandwidths are in GB/s with GB = 2**30 bytes; filtering, back-projection and
AllGather throughputs are in projections per second. Samples are 4-byte floats.
"""

import logging
from dataclasses import asdict, dataclass, fields, replace
from typing import Dict, List, Mapping, Sequence

from .errors import ValidationError

log = logging.getLogger(__name__)

GB = 2**30
SIZEOF_FLOAT = 4

_OPTIONAL = ("th_trans", "n_cpu_per_node")
_INT_FIELDS = (
    "n_pcie",
    "n_gpu_per_node",
    "n_cpu_per_node",
    "n_u",
    "n_v",
    "n_p",
    "n_x",
    "n_y",
    "n_z",
    "rows",
    "cols",
)


@dataclass(frozen=True)
class PerfParams:
    """Throughputs, hardware counts, problem size and grid shape."""

    bw_load: float
    bw_store: float
    th_flt: float
    th_bp: float
    th_allgather: float
    th_reduce: float
    bw_pcie: float
    n_pcie: int
    n_gpu_per_node: int
    n_u: int
    n_v: int
    n_p: int
    n_x: int
    n_y: int
    n_z: int
    rows: int
    cols: int
    th_trans: float | None = None
    n_cpu_per_node: int = 1

    def __post_init__(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None and f.name in _OPTIONAL:
                continue
            if not isinstance(value, int | float) or not value > 0:
                raise ValidationError(f"{f.name} must be positive, got {value!r}")

    @property
    def n_gpus(self) -> int:
        """One rank per GPU, so N_gpus = C * R."""
        return self.rows * self.cols

    @property
    def n_nodes(self) -> float:
        return self.n_gpus / self.n_gpu_per_node

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "PerfParams":
        """Parse a flat key=value mapping; n_gpus, when present, must equal C*R."""
        names = {f.name: f for f in fields(cls)}
        kwargs: Dict[str, float | int | None] = {}
        n_gpus = values.get("n_gpus")
        for key, raw in values.items():
            if key == "n_gpus":
                continue
            if key not in names:
                raise ValidationError(f"unknown performance parameter {key!r}")
            try:
                number = float(raw)
            except ValueError as e:
                raise ValidationError(f"{key}: {e}") from e
            if key in _INT_FIELDS:
                if not number.is_integer():
                    raise ValidationError(f"{key} must be an integer, got {raw}")
                kwargs[key] = int(number)
            else:
                kwargs[key] = number
        missing = [n for n in names if n not in kwargs and n not in _OPTIONAL]
        if missing:
            raise ValidationError(f"missing performance parameters: {missing}")
        params = cls(**kwargs)  # type: ignore[arg-type]
        if n_gpus is not None and int(float(n_gpus)) != params.n_gpus:
            raise ValidationError(f"n_gpus={n_gpus} but rows*cols={params.n_gpus}")
        return params

    def to_mapping(self) -> Dict[str, str]:
        return {k: repr(v) for k, v in asdict(self).items() if v is not None}


@dataclass(frozen=True)
class PerfBreakdown:
    """Modelled stage times in seconds and the overlap factor delta."""

    t_load: float
    t_flt: float
    t_allgather: float
    t_h2d: float
    t_bp: float
    t_trans: float
    t_d2h: float
    t_reduce: float
    t_store: float
    t_compute: float
    t_post: float
    t_runtime: float
    delta: float

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)


def estimate(p: PerfParams) -> PerfBreakdown:
    """Evaluate every stage equation of the model for one configuration."""
    C, R = p.cols, p.rows
    projections = SIZEOF_FLOAT * p.n_u * p.n_v * p.n_p
    volume = SIZEOF_FLOAT * p.n_x * p.n_y * p.n_z
    t_load = projections / (p.bw_load * GB)
    t_flt = p.n_p * p.n_gpu_per_node / (C * R * p.th_flt)
    t_allgather = p.n_p / (C * R * p.th_allgather)
    t_h2d = p.n_gpu_per_node * projections / (C * p.bw_pcie * GB * p.n_pcie)
    t_bp = t_h2d + p.n_p / (C * p.th_bp)
    t_trans = volume / (R * p.th_trans * GB) if p.th_trans is not None else 0.0
    t_d2h = p.n_gpu_per_node * volume / (R * p.bw_pcie * GB * p.n_pcie)
    # a single column holds the whole volume, nothing to reduce
    t_reduce = volume / (R * p.th_reduce * GB) if C > 1 else 0.0
    t_store = volume / (p.bw_store * GB)
    t_compute = max(t_load, t_flt, t_allgather, t_bp)
    t_post = t_trans + t_d2h + t_reduce + t_store
    return PerfBreakdown(
        t_load=t_load,
        t_flt=t_flt,
        t_allgather=t_allgather,
        t_h2d=t_h2d,
        t_bp=t_bp,
        t_trans=t_trans,
        t_d2h=t_d2h,
        t_reduce=t_reduce,
        t_store=t_store,
        t_compute=t_compute,
        t_post=t_post,
        t_runtime=t_compute + t_post,
        delta=empirical_delta(t_flt, t_allgather, t_bp, t_compute),
    )


def empirical_delta(
    t_flt: float, t_allgather: float, t_bp: float, t_compute: float
) -> float:
    """Overlap factor for measured (or modelled) stage times."""
    if t_compute <= 0:
        raise ValidationError(f"t_compute must be positive, got {t_compute}")
    if min(t_flt, t_allgather, t_bp) < 0:
        raise ValidationError("stage times must not be negative")
    return (t_flt + t_allgather + t_bp) / t_compute


def gups(n_x: int, n_y: int, n_z: int, n_p: int, t: float) -> float:
    """Giga voxel-updates per second, n_x*n_y*n_z*n_p / (t * 2**30)."""
    if not t > 0:
        raise ValidationError(f"time must be positive, got {t}")
    return n_x * n_y * n_z * n_p / (t * GB)


def problem_alpha(n_u: int, n_v: int, n_p: int, n_x: int, n_y: int, n_z: int) -> float:
    """Ratio of input (projections) to output (volume) problem size."""
    return (n_u * n_v * n_p) / (n_x * n_y * n_z)


def potential_peak_gups(p: PerfParams) -> float:
    """GUPS that the modelled end-to-end runtime would deliver."""
    return gups(p.n_x, p.n_y, p.n_z, p.n_p, estimate(p).t_runtime)


def efficiency(p: PerfParams, measured_runtime: float) -> float:
    """Fraction of the modelled peak reached by a measured runtime."""
    if not measured_runtime > 0:
        raise ValidationError(f"runtime must be positive, got {measured_runtime}")
    return estimate(p).t_runtime / measured_runtime


def scaling_sweep(p: PerfParams, cols: Sequence[int]) -> List[PerfBreakdown]:
    """Strong scaling with R fixed: one breakdown per column count."""
    return [estimate(replace(p, cols=c)) for c in cols]


_REPORT_ROWS = [
    ("t_load", "T_load"),
    ("t_flt", "T_flt"),
    ("t_allgather", "T_AllGather"),
    ("t_h2d", "T_H2D"),
    ("t_bp", "T_bp"),
    ("t_trans", "T_trans"),
    ("t_d2h", "T_D2H"),
    ("t_reduce", "T_reduce"),
    ("t_store", "T_store"),
    ("t_compute", "T_compute"),
    ("t_post", "T_post"),
    ("t_runtime", "T_runtime"),
]


def format_report(b: PerfBreakdown, title: str = "performance model") -> str:
    """Aligned table followed by machine-readable key=value lines."""
    values = b.as_dict()
    width = max(len(label) for _, label in _REPORT_ROWS)
    lines = [f"# {title}"]
    for key, label in _REPORT_ROWS:
        lines.append(f"{label:<{width}}  {values[key]:>12.4f} s")
    lines.append(f"{'delta':<{width}}  {b.delta:>12.4f}")
    lines.append("")
    lines.extend(f"{key}={values[key]!r}" for key in values)
    return "\n".join(lines) + "\n"
