"""
Pipelined reconstruction on an R x C grid of ranks, all inside one process.

Columns split the projections, rows split the volume:

- rank (r, c) loads and filters n_p / (C * R) projections of column c's block;
- ranks of a column AllGather their filtered projections one at a time, so
  each ends up holding the column's n_p / C projections;
- every rank back-projects those into the slab of its row;
- the C partial slabs of a row are summed by Reduce at column 0, which scales
  and writes the row's slices.

Each rank runs three stages concurrently (filtering, main, back-projection)
joined by bounded queues of BUFFER_DEPTH projections. A row's slab is a pair
of k bands mirrored about the volume mid-plane, so the symmetric kernel works
unchanged inside every rank.
"""

import logging
import os
import queue
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Sequence, Tuple

import numpy as np

from .backprojection import (
    DEFAULT_BATCH,
    OpCounter,
    Volume,
    VolumeLayout,
    accumulate_batches,
    reshape_volume,
)
from .collectives import DEFAULT_TIMEOUT, Group, Rank
from .errors import FdkError, PipelineAborted, PipelineError, PlanningError
from .filtering import (
    CosineTable,
    Projection,
    ProjectionKind,
    RampKernel,
    cosine_table,
    filter_projection,
    ramp_kernel,
)
from .geometry import CbctGeometry, ProjectionMatrix, build_projection_matrix
from .perfmodel import SIZEOF_FLOAT, empirical_delta

log = logging.getLogger(__name__)

# Projections held by each queue between stages
BUFFER_DEPTH = 4

ProjectionSource = Callable[[int], Projection]
SliceSink = Callable[[int, np.ndarray], None]


@dataclass(frozen=True)
class SlabBand:
    """Slices owned by one row: [k_start, k_start + h) and its mirror band.

    Local slice t < h is global k_start + t; local slice 2h - 1 - t is
    n_z - 1 - (k_start + t).
    """

    row: int
    k_start: int
    half_depth: int
    n_z: int

    @property
    def depth(self) -> int:
        return 2 * self.half_depth

    @property
    def lower(self) -> range:
        return range(self.k_start, self.k_start + self.half_depth)

    @property
    def upper(self) -> range:
        stop = self.n_z - self.k_start
        return range(stop - self.half_depth, stop)

    def global_slices(self) -> List[int]:
        """Global k of each local slice, in local order."""
        return list(self.lower) + list(self.upper)


@dataclass(frozen=True)
class GridPlan:
    """Decomposition of a scan over R rows and C columns of ranks."""

    rows: int
    cols: int
    n_p: int
    n_z: int
    sub_vol_bytes: int
    bands: Tuple[SlabBand, ...]

    @property
    def n_ranks(self) -> int:
        return self.cols * self.rows

    @property
    def proj_per_rank(self) -> int:
        return self.n_p // self.n_ranks

    @property
    def proj_per_column(self) -> int:
        return self.n_p // self.cols

    def ranks(self) -> List[Rank]:
        return [(r, c) for r in range(self.rows) for c in range(self.cols)]

    def column_views(self, col: int) -> range:
        start = col * self.proj_per_column
        return range(start, start + self.proj_per_column)

    def rank_views(self, row: int, col: int) -> range:
        """Views loaded and filtered by rank (row, col)."""
        start = col * self.proj_per_column + row * self.proj_per_rank
        return range(start, start + self.proj_per_rank)


def _next_power_of_two(n: int) -> int:
    return 1 << max(0, (n - 1).bit_length())


def plan_grid(
    geom: CbctGeometry,
    n_ranks: int,
    sub_vol_bytes: int | None = None,
    rows: int | None = None,
    gpu_mem_bytes: int | None = None,
    batch: int = DEFAULT_BATCH,
) -> GridPlan:
    """Choose the smallest R whose sub-volume fits the budget, and C = n_ranks / R.

    Args:
        geom (CbctGeometry): Scan geometry
        n_ranks (int): Total number of ranks
        sub_vol_bytes (int, optional): Bytes of volume one rank may hold;
            R = 4 * n_x * n_y * n_z / sub_vol_bytes rounded up to a power of two
        rows (int, optional): Use this R instead of deriving it
        gpu_mem_bytes (int, optional): Also require
            4 * (n_x * n_y * n_z / R + n_u * n_v * batch) <= gpu_mem_bytes
        batch (int, optional): Projections resident per pass. Defaults to 32.

    Raises:
        PlanningError: the constraints can not be met; the message says which
    """
    volume_bytes = SIZEOF_FLOAT * geom.n_x * geom.n_y * geom.n_z
    if (sub_vol_bytes is None) == (rows is None):
        raise PlanningError("give exactly one of sub_vol_bytes or rows")
    if rows is None:
        assert sub_vol_bytes is not None
        if sub_vol_bytes <= 0:
            raise PlanningError(f"sub-volume size must be positive: {sub_vol_bytes}")
        rows = _next_power_of_two(-(-volume_bytes // sub_vol_bytes))
    else:
        if rows < 1:
            raise PlanningError(f"rows must be >= 1, got {rows}")
        sub_vol_bytes = volume_bytes // rows
    if n_ranks < rows:
        raise PlanningError(
            f"{n_ranks} ranks can not hold R={rows} rows of sub-volumes"
        )
    if n_ranks % rows:
        raise PlanningError(f"{n_ranks} ranks do not split into R={rows} rows")
    cols = n_ranks // rows
    if geom.n_p % n_ranks:
        raise PlanningError(
            f"n_p={geom.n_p} is not divisible by C*R={cols}*{rows}={n_ranks}"
        )
    if geom.n_z % 2 or (geom.n_z // 2) % rows:
        raise PlanningError(
            f"n_z/2={geom.n_z / 2} must be an integer divisible by R={rows}"
        )
    if gpu_mem_bytes is not None:
        need = SIZEOF_FLOAT * (
            geom.n_x * geom.n_y * geom.n_z // rows + geom.n_u * geom.n_v * batch
        )
        if need > gpu_mem_bytes:
            raise PlanningError(
                f"R={rows} needs {need} bytes per device, only {gpu_mem_bytes} given"
            )
    h = geom.n_z // (2 * rows)
    bands = tuple(SlabBand(r, r * h, h, geom.n_z) for r in range(rows))
    log.info("planned %d x %d grid for %s", rows, cols, geom.problem_label())
    return GridPlan(rows, cols, geom.n_p, geom.n_z, sub_vol_bytes, bands)


@dataclass
class RankTask:
    """Work and channels of one rank."""

    row: int
    col: int
    views: range
    band: SlabBand
    # filtering stage -> main stage
    inbox: "queue.Queue[Any]" = field(
        default_factory=lambda: queue.Queue(maxsize=BUFFER_DEPTH)
    )
    # main stage -> back-projection stage
    outbox: "queue.Queue[Any]" = field(
        default_factory=lambda: queue.Queue(maxsize=BUFFER_DEPTH)
    )

    @property
    def rank(self) -> Rank:
        return (self.row, self.col)


@dataclass
class StageTimings:
    """Seconds spent by one rank in each stage, plus what it processed."""

    t_flt: float = 0.0
    t_gather: float = 0.0
    t_bp: float = 0.0
    t_compute: float = 0.0
    t_reduce: float = 0.0
    t_store: float = 0.0
    filtered: List[int] = field(default_factory=list)
    backprojected: List[int] = field(default_factory=list)
    inner_products: int = 0


@dataclass
class PipelineReport:
    """Timings of a pipeline run, per rank and overall."""

    plan: GridPlan
    ranks: Dict[Rank, StageTimings]
    wall: float = 0.0

    def _max(self, name: str) -> float:
        return max(getattr(t, name) for t in self.ranks.values())

    @property
    def t_flt(self) -> float:
        return self._max("t_flt")

    @property
    def t_gather(self) -> float:
        return self._max("t_gather")

    @property
    def t_bp(self) -> float:
        return self._max("t_bp")

    @property
    def t_compute(self) -> float:
        return self._max("t_compute")

    @property
    def t_post(self) -> float:
        return max(t.t_reduce + t.t_store for t in self.ranks.values())

    @property
    def delta(self) -> float:
        return empirical_delta(self.t_flt, self.t_gather, self.t_bp, self.t_compute)

    @property
    def inner_products(self) -> int:
        return sum(t.inner_products for t in self.ranks.values())

    def as_sections(self) -> Dict[str, Dict[str, object]]:
        sections: Dict[str, Dict[str, object]] = {
            "pipeline": {
                "rows": self.plan.rows,
                "cols": self.plan.cols,
                "proj_per_rank": self.plan.proj_per_rank,
                "t_flt": f"{self.t_flt:.6f}",
                "t_allgather": f"{self.t_gather:.6f}",
                "t_bp": f"{self.t_bp:.6f}",
                "t_compute": f"{self.t_compute:.6f}",
                "t_post": f"{self.t_post:.6f}",
                "wall": f"{self.wall:.6f}",
                "delta": f"{self.delta:.4f}",
                "inner_products": self.inner_products,
            }
        }
        for (r, c), t in sorted(self.ranks.items()):
            sections[f"rank {r},{c}"] = {
                "t_flt": f"{t.t_flt:.6f}",
                "t_allgather": f"{t.t_gather:.6f}",
                "t_bp": f"{t.t_bp:.6f}",
                "t_compute": f"{t.t_compute:.6f}",
                "t_reduce": f"{t.t_reduce:.6f}",
                "t_store": f"{t.t_store:.6f}",
            }
        return sections


class _Done:
    """End-of-stream marker passed through the stage queues."""


_DONE = _Done()


class _RankRunner:
    """Runs the three stages of one rank."""

    def __init__(
        self,
        task: RankTask,
        geom: CbctGeometry,
        column: Group,
        row_group: Group,
        source: ProjectionSource,
        sink: SliceSink | None,
        tables: Tuple[CosineTable, RampKernel],
        pool_size: int,
        batch: int,
        abort: threading.Event,
        timeout: float,
    ) -> None:
        self.task = task
        self.geom = geom
        self.column = column
        self.row_group = row_group
        self.source = source
        self.sink = sink
        self.cos_tab, self.ramp = tables
        self.pool_size = pool_size
        self.batch = batch
        self.abort = abort
        self.timeout = timeout
        self.timings = StageTimings()
        self.counter = OpCounter()
        self.slab: Volume | None = None
        self.error: BaseException | None = None
        self._stage_errors: List[BaseException] = []

    def _fail(self, message: str) -> PipelineError:
        return PipelineError(message, rank=self.task.rank)

    def _put(self, q: "queue.Queue[Any]", item: Any) -> None:
        deadline = time.monotonic() + self.timeout
        while True:
            if self.abort.is_set():
                raise PipelineAborted("pipeline aborted", rank=self.task.rank)
            try:
                q.put(item, timeout=0.05)
                return
            except queue.Full:
                if time.monotonic() > deadline:
                    raise self._fail("downstream stage stopped consuming") from None

    def _get(self, q: "queue.Queue[Any]") -> Any:
        deadline = time.monotonic() + self.timeout
        while True:
            if self.abort.is_set():
                raise PipelineAborted("pipeline aborted", rank=self.task.rank)
            try:
                return q.get(timeout=0.05)
            except queue.Empty:
                if time.monotonic() > deadline:
                    raise self._fail("upstream stage stopped producing") from None

    def _load_and_filter(self, view: int) -> Tuple[Projection, float, float]:
        start = time.perf_counter()
        raw = self.source(view)
        if raw.kind is not ProjectionKind.RAW:
            raise self._fail(f"view {view} is {raw.kind.value}, expected raw")
        if raw.samples.shape != (self.geom.n_v, self.geom.n_u):
            raise self._fail(
                f"view {view} has shape {raw.samples.shape}, geometry expects "
                f"({self.geom.n_v}, {self.geom.n_u})"
            )
        q = filter_projection(raw, self.cos_tab, self.ramp)
        q.view_index = view
        return q, start, time.perf_counter()

    def _filter_stage(self) -> None:
        try:
            first = last = None
            with ThreadPoolExecutor(max_workers=self.pool_size) as pool:
                views = self.task.views
                futures = [pool.submit(self._load_and_filter, s) for s in views]
                for future in futures:
                    q, start, end = future.result()
                    first = start if first is None else min(first, start)
                    last = end if last is None else max(last, end)
                    assert q.view_index is not None
                    self.timings.filtered.append(q.view_index)
                    self._put(self.task.inbox, q)
            if first is not None and last is not None:
                self.timings.t_flt = last - first
        except BaseException as e:
            self._stage_errors.append(e)
            self.abort.set()

    def _bp_stage(self) -> None:
        try:
            band = self.task.band
            acc = np.zeros(
                (self.geom.n_x, self.geom.n_y, band.depth), dtype=np.float32
            )
            mats: Dict[int, ProjectionMatrix] = {}
            pending: List[Projection] = []

            def flush() -> None:
                if not pending:
                    return
                start = time.perf_counter()
                batch_mats = []
                batch_views: List[int] = []
                for q in pending:
                    assert q.view_index is not None
                    if q.view_index not in mats:
                        mats[q.view_index] = build_projection_matrix(
                            self.geom, q.view_index
                        )
                    batch_mats.append(mats[q.view_index])
                    batch_views.append(q.view_index)
                accumulate_batches(
                    acc,
                    batch_mats,
                    pending,
                    self.geom,
                    batch=len(pending),
                    k_start=band.k_start,
                    counter=self.counter,
                )
                self.timings.backprojected.extend(batch_views)
                pending.clear()
                self.timings.t_bp += time.perf_counter() - start

            while True:
                item = self._get(self.task.outbox)
                if item is _DONE:
                    flush()
                    break
                pending.append(item)
                if len(pending) == self.batch:
                    flush()
            self.slab = Volume(acc, VolumeLayout.K_MAJOR)
        except BaseException as e:
            self._stage_errors.append(e)
            self.abort.set()

    def _main_stage(self) -> None:
        started = time.perf_counter()
        filter_thread = threading.Thread(
            target=self._filter_stage, name=f"flt{self.task.rank}", daemon=True
        )
        bp_thread = threading.Thread(
            target=self._bp_stage, name=f"bp{self.task.rank}", daemon=True
        )
        filter_thread.start()
        bp_thread.start()
        try:
            for _ in self.task.views:
                q = self._get(self.task.inbox)
                start = time.perf_counter()
                gathered = self.column.all_gather(self.task.row, q)
                self.timings.t_gather += time.perf_counter() - start
                for item in gathered:
                    self._put(self.task.outbox, item)
            self._put(self.task.outbox, _DONE)
        except BaseException:
            self.abort.set()
            raise
        finally:
            filter_thread.join()
            bp_thread.join()
        if self._stage_errors:
            raise self._stage_errors[0]
        self.timings.t_compute = time.perf_counter() - started
        self.timings.inner_products = self.counter.inner_products
        log.debug("rank %s finished back-projection", self.task.rank)

        assert self.slab is not None
        start = time.perf_counter()
        total = self.row_group.reduce_sum(self.task.col, self.slab)
        self.timings.t_reduce = time.perf_counter() - start
        if total is None:
            self.slab = None
            return
        total.samples *= np.float32(self.geom.theta)
        self.slab = total
        if self.sink is not None:
            start = time.perf_counter()
            for t, k in enumerate(self.task.band.global_slices()):
                self.sink(k, total.samples[:, :, t].T)
            self.timings.t_store = time.perf_counter() - start

    def run(self) -> None:
        try:
            self._main_stage()
        except BaseException as e:
            # a failed stage thread is the cause of whatever the main stage saw
            self.error = _first_cause([*self._stage_errors, e])
            self.abort.set()
            self.column.abort(f"rank {self.task.rank} failed")
            self.row_group.abort(f"rank {self.task.rank} failed")


def run_pipeline_with_report(
    plan: GridPlan,
    geom: CbctGeometry,
    raw_projs_source: ProjectionSource,
    output_sink: SliceSink | None = None,
    tables: Tuple[CosineTable, RampKernel] | None = None,
    workers: int | None = None,
    batch: int = DEFAULT_BATCH,
    timeout: float = DEFAULT_TIMEOUT,
) -> Tuple[Volume, PipelineReport]:
    """Run the grid and return the assembled volume with its timings.

    Args:
        plan (GridPlan): Grid decomposition from plan_grid
        geom (CbctGeometry): Scan geometry the plan was made for
        raw_projs_source (ProjectionSource): view index -> raw projection
        output_sink (SliceSink, optional): Receives (k, (n_y, n_x) plane) for
            every finished slice, called concurrently by the row roots
        tables (tuple, optional): Cosine table and ramp kernel. Built from the
            geometry when not given.
        workers (int, optional): Total cores to share out. Defaults to
            os.cpu_count().
        batch (int, optional): Projections per back-projection pass.
        timeout (float, optional): Seconds any stage or collective may wait.

    Raises:
        PipelineError: a rank failed; the error names it
    """
    if plan.n_p != geom.n_p or plan.n_z != geom.n_z:
        raise PlanningError(
            f"plan for n_p={plan.n_p}, n_z={plan.n_z} does not match "
            f"{geom.problem_label()}"
        )
    if tables is None:
        tables = (cosine_table(geom), ramp_kernel(geom))
    workers = workers or os.cpu_count() or 1
    pool_size = max(1, workers // plan.n_ranks - 1)

    columns = [
        Group([(r, c) for r in range(plan.rows)], timeout, name=f"column {c}")
        for c in range(plan.cols)
    ]
    row_groups = [
        Group([(r, c) for c in range(plan.cols)], timeout, name=f"row {r}")
        for r in range(plan.rows)
    ]
    abort = threading.Event()
    runners: List[_RankRunner] = []
    for r, c in plan.ranks():
        band = plan.bands[r]
        if band.depth <= 0 or band.upper.stop > geom.n_z or band.k_start < 0:
            raise PipelineError(f"slab {band} does not fit n_z={geom.n_z}", (r, c))
        task = RankTask(row=r, col=c, views=plan.rank_views(r, c), band=band)
        runners.append(
            _RankRunner(
                task,
                geom,
                columns[c],
                row_groups[r],
                raw_projs_source,
                output_sink,
                tables,
                pool_size,
                batch,
                abort,
                timeout,
            )
        )

    started = time.perf_counter()
    threads = [
        threading.Thread(target=rr.run, name=f"rank{rr.task.rank}", daemon=True)
        for rr in runners
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    wall = time.perf_counter() - started

    errors = [rr for rr in runners if rr.error is not None]
    if errors:
        first = _root_cause(errors)
        assert first.error is not None
        if isinstance(first.error, PipelineError):
            raise first.error
        if isinstance(first.error, FdkError):
            raise PipelineError(str(first.error), first.task.rank) from first.error
        raise PipelineError(
            f"{type(first.error).__name__}: {first.error}", first.task.rank
        ) from first.error

    full = np.zeros((geom.n_x, geom.n_y, geom.n_z), dtype=np.float32)
    for rr in runners:
        if rr.slab is None:
            continue
        band = rr.task.band
        h = band.half_depth
        full[:, :, band.lower.start : band.lower.stop] = rr.slab.samples[:, :, :h]
        full[:, :, band.upper.start : band.upper.stop] = rr.slab.samples[:, :, h:]
    volume = reshape_volume(Volume(full, VolumeLayout.K_MAJOR), VolumeLayout.I_MAJOR)
    report = PipelineReport(
        plan=plan, ranks={rr.task.rank: rr.timings for rr in runners}, wall=wall
    )
    log.info(
        "pipeline %dx%d done in %.3f s, delta=%.2f",
        plan.rows,
        plan.cols,
        wall,
        report.delta,
    )
    return volume, report


def _first_cause(errors: Sequence[BaseException]) -> BaseException:
    """First error that is not a PipelineAborted, else the first error."""
    for e in errors:
        if not isinstance(e, PipelineAborted):
            return e
    return errors[0]


def _root_cause(failed: Sequence[_RankRunner]) -> _RankRunner:
    """Prefer a rank that failed on its own over ranks woken by an abort."""
    for rr in failed:
        if not isinstance(rr.error, PipelineAborted):
            return rr
    return failed[0]


def run_pipeline(
    plan: GridPlan,
    geom: CbctGeometry,
    raw_projs_source: ProjectionSource,
    output_sink: SliceSink | None = None,
    **kwargs: Any,
) -> Volume:
    """Run the grid and return the assembled i-major volume."""
    volume, _ = run_pipeline_with_report(
        plan, geom, raw_projs_source, output_sink, **kwargs
    )
    return volume
