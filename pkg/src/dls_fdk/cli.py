"""Command line interface: ``dls-fdk <command> [options]``."""

import argparse
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Callable, Dict, List, Sequence

import numpy as np

from ._version import __version__
from .backprojection import (
    DEFAULT_BATCH,
    OpCounter,
    backproject_optimized,
    backproject_standard,
    optimized_count,
    standard_count,
)
from .dataset import (
    DatasetMeta,
    ProjectionReader,
    SliceDirectorySink,
    read_key_value,
    read_projections,
    write_projections,
    write_report,
    write_volume_slices,
)
from .errors import FdkError, GeometryError, ShapeError
from .filtering import RAMP_WINDOWS, ProjectionKind, fdk_scale, filter_stack
from .geometry import CbctGeometry, build_projection_matrices
from .perfmodel import (
    PerfParams,
    efficiency,
    estimate,
    format_report,
    gups,
    potential_peak_gups,
    problem_alpha,
    scaling_sweep,
)
from .phantom import forward_project_all, sample_volume, shepp_logan_3d
from .pipeline import plan_grid, run_pipeline_with_report
from .utils import default_cache_dir, get_filter_tables

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_VALIDATION = 3


class _Parser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with EXIT_USAGE."""

    def error(self, message: str):  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def load_geometry(path: Path) -> CbctGeometry:
    """Read a geometry from a key=value file."""
    return CbctGeometry.from_mapping(read_key_value(Path(path)))


def _dataset_geometry(args: argparse.Namespace, geom: CbctGeometry) -> CbctGeometry:
    """The dataset's geometry, checked against --geometry when one is given."""
    if args.geometry is not None:
        given = load_geometry(args.geometry)
        if given != geom:
            raise GeometryError(
                f"{args.geometry} describes {given.problem_label()}, the dataset "
                f"was written for {geom.problem_label()}"
            )
    return geom


def _problem_section(geom: CbctGeometry, **extra: object) -> Dict[str, object]:
    section: Dict[str, object] = {"label": geom.problem_label()}
    section.update(geom.to_mapping())
    section.update(extra)
    return section


def _phantom(args: argparse.Namespace) -> int:
    geom = load_geometry(args.geometry)
    start = time.perf_counter()
    vol = sample_volume(shepp_logan_3d(), geom)
    t_sample = time.perf_counter() - start
    start = time.perf_counter()
    write_volume_slices(vol, DatasetMeta.for_volume(geom), args.out, args.workers)
    t_store = time.perf_counter() - start
    write_report(
        args.out,
        {
            "problem": _problem_section(geom, source="shepp-logan"),
            "timings": {"t_sample": f"{t_sample:.6f}", "t_store": f"{t_store:.6f}"},
        },
    )
    print(f"Voxelized phantom {geom.problem_label()}. Output written to: {args.out}")
    return EXIT_OK


def _project(args: argparse.Namespace) -> int:
    geom = load_geometry(args.geometry)
    stack = forward_project_all(shepp_logan_3d(), geom, args.workers)
    write_projections(stack, DatasetMeta.for_projections(geom), args.out)
    print(f"Projected {geom.n_p} views. Output written to: {args.out}")
    return EXIT_OK


def _filter(args: argparse.Namespace) -> int:
    stack, meta = read_projections(args.input)
    geom = _dataset_geometry(args, meta.geometry)
    if meta.projection_kind != ProjectionKind.RAW.value:
        raise ShapeError(f"{args.input} already holds {meta.projection_kind} data")
    cos_tab, ramp = get_filter_tables(geom, args.cache, window=args.window)
    filtered = filter_stack(stack, cos_tab, ramp, args.workers)
    write_projections(
        filtered, DatasetMeta.for_projections(geom, ProjectionKind.FILTERED), args.out
    )
    print(f"Filtered {len(filtered)} views. Output written to: {args.out}")
    return EXIT_OK


def _reconstruct(args: argparse.Namespace) -> int:
    timings: Dict[str, object] = {}
    start = time.perf_counter()
    stack, meta = read_projections(args.input)
    geom = _dataset_geometry(args, meta.geometry)
    timings["t_load"] = f"{time.perf_counter() - start:.6f}"

    start = time.perf_counter()
    if meta.projection_kind == ProjectionKind.RAW.value:
        cos_tab, ramp = get_filter_tables(geom, args.cache, window=args.window)
        stack = filter_stack(stack, cos_tab, ramp, args.workers)
    timings["t_flt"] = f"{time.perf_counter() - start:.6f}"

    mats = build_projection_matrices(geom)
    counter = OpCounter()
    start = time.perf_counter()
    if args.kernel == "standard":
        vol = backproject_standard(mats, stack, geom, counter=counter)
    else:
        vol = backproject_optimized(mats, stack, geom, args.batch, counter=counter)
    t_bp = time.perf_counter() - start
    timings["t_bp"] = f"{t_bp:.6f}"
    vol.samples *= np.float32(fdk_scale(geom))

    start = time.perf_counter()
    write_volume_slices(vol, DatasetMeta.for_volume(geom), args.out, args.workers)
    timings["t_store"] = f"{time.perf_counter() - start:.6f}"

    sections: Dict[str, Dict[str, object]] = {
        "problem": _problem_section(geom, kernel=args.kernel, batch=args.batch),
        "timings": timings,
    }
    if args.count_ops:
        expected = (
            standard_count(geom) if args.kernel == "standard" else optimized_count(geom)
        )
        ops = {
            "inner_products": counter.inner_products,
            "expected": expected,
            "standard": standard_count(geom),
            "optimized": optimized_count(geom),
            "ratio": f"{optimized_count(geom) / standard_count(geom):.6f}",
        }
        sections["operations"] = ops
        for key, value in ops.items():
            print(f"{key}={value}")
    write_report(args.out, sections)
    print(
        f"Reconstructed {geom.problem_label()} with the {args.kernel} kernel "
        f"({gups(geom.n_x, geom.n_y, geom.n_z, geom.n_p, max(t_bp, 1e-9)):.3f} "
        f"GUPS). Output written to: {args.out}"
    )
    return EXIT_OK


def _pipeline(args: argparse.Namespace) -> int:
    reader = ProjectionReader(args.input)
    geom = _dataset_geometry(args, reader.geometry)
    if reader.meta.projection_kind != ProjectionKind.RAW.value:
        raise ShapeError("the pipeline filters its own input and needs raw projections")
    plan = plan_grid(
        geom,
        args.ranks,
        sub_vol_bytes=args.subvol_bytes,
        rows=args.rows,
        gpu_mem_bytes=args.gpu_mem,
        batch=args.batch,
    )
    sink = SliceDirectorySink(args.out, DatasetMeta.for_volume(geom))
    scale = np.float32(fdk_scale(geom))

    def store(k: int, plane: np.ndarray) -> None:
        sink(k, plane * scale)

    _, report = run_pipeline_with_report(
        plan,
        geom,
        reader,
        store,
        tables=get_filter_tables(geom, args.cache, window=args.window),
        workers=args.workers,
        batch=args.batch,
    )
    sections: Dict[str, Dict[str, object]] = {"problem": _problem_section(geom)}
    sections.update(report.as_sections())
    write_report(args.out, sections)
    print(f"delta={report.delta:.4f}")
    print(
        f"Reconstructed {geom.problem_label()} on a {plan.rows}x{plan.cols} grid. "
        f"Output written to: {args.out}"
    )
    return EXIT_OK


def _model(args: argparse.Namespace) -> int:
    params = PerfParams.from_mapping(read_key_value(args.params))
    if args.geometry is not None:
        geom = load_geometry(args.geometry)
        params = replace(
            params,
            n_u=geom.n_u,
            n_v=geom.n_v,
            n_p=geom.n_p,
            n_x=geom.n_x,
            n_y=geom.n_y,
            n_z=geom.n_z,
        )
    title = (
        f"{params.n_u}x{params.n_v}x{params.n_p}->{params.n_x}x{params.n_y}x"
        f"{params.n_z} on {params.rows}x{params.cols} ranks"
    )
    print(format_report(estimate(params), title), end="")
    alpha = problem_alpha(
        params.n_u, params.n_v, params.n_p, params.n_x, params.n_y, params.n_z
    )
    print(f"alpha={alpha!r}")
    print(f"n_nodes={params.n_nodes!r}")
    print(f"peak_gups={potential_peak_gups(params)!r}")
    if args.measured is not None:
        print(f"efficiency={efficiency(params, args.measured)!r}")
    for b, cols in zip(scaling_sweep(params, args.sweep), args.sweep, strict=True):
        print(
            f"cols={cols} t_compute={b.t_compute:.4f} t_post={b.t_post:.4f} "
            f"t_runtime={b.t_runtime:.4f} delta={b.delta:.4f}"
        )
    return EXIT_OK


def _bench(args: argparse.Namespace) -> int:
    geom = load_geometry(args.geometry)
    stack = forward_project_all(shepp_logan_3d(), geom, args.workers)
    cos_tab, ramp = get_filter_tables(geom, args.cache, window=args.window)
    filtered = filter_stack(stack, cos_tab, ramp, args.workers)
    mats = build_projection_matrices(geom)
    results: Dict[str, Dict[str, object]] = {"problem": _problem_section(geom)}
    for kernel in ("standard", "optimized"):
        best = float("inf")
        counter = OpCounter()
        for _ in range(args.repeat):
            counter = OpCounter()
            start = time.perf_counter()
            if kernel == "standard":
                backproject_standard(mats, filtered, geom, counter=counter)
            else:
                backproject_optimized(mats, filtered, geom, args.batch, counter)
            best = min(best, time.perf_counter() - start)
        rate = gups(geom.n_x, geom.n_y, geom.n_z, geom.n_p, max(best, 1e-9))
        results[kernel] = {
            "seconds": f"{best:.6f}",
            "gups": f"{rate:.6f}",
            "inner_products": counter.inner_products,
        }
        print(f"{kernel}: {best:.4f} s, {rate:.4f} GUPS, {counter.inner_products} ops")
    ratio = optimized_count(geom) / standard_count(geom)
    results["operations"] = {"ratio": f"{ratio:.6f}"}
    print(f"op ratio optimized/standard={ratio:.6f}")
    if args.out is not None:
        path = write_report(args.out, results)
        print(f"Output written to: {path}")
    return EXIT_OK


def _int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected integers: {text}") from e


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dls-fdk", description="Cone-beam CT FDK reconstruction")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument(
        "-v", "--verbose", action="count", default=0, help="More log output"
    )
    commands = parser.add_subparsers(dest="command", metavar="command")
    commands.required = True

    def command(
        name: str,
        summary: str,
        func: Callable[[argparse.Namespace], int],
        needs_geometry: bool = False,
    ) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=summary)
        sub.add_argument(
            "--geometry",
            type=Path,
            required=needs_geometry,
            help="key=value geometry file",
        )
        sub.add_argument(
            "-v", "--verbose", dest="sub_verbose", action="count", default=0
        )
        sub.add_argument(
            "--workers",
            type=int,
            default=os.cpu_count() or 1,
            help="Worker threads",
        )
        sub.add_argument(
            "--cache",
            type=Path,
            default=default_cache_dir(),
            help="Directory caching filter tables",
        )
        sub.add_argument(
            "--window",
            choices=sorted(RAMP_WINDOWS),
            default="ram-lak",
            help="Apodization of the ramp filter",
        )
        sub.set_defaults(func=func)
        return sub

    sub = command("phantom", "Voxelize the Shepp-Logan phantom", _phantom, True)
    sub.add_argument("--out", type=Path, required=True)

    sub = command("project", "Forward project the phantom", _project, True)
    sub.add_argument("--out", type=Path, required=True)

    sub = command("filter", "Cosine weight and ramp filter projections", _filter)
    sub.add_argument("--input", type=Path, required=True)
    sub.add_argument("--out", type=Path, required=True)

    sub = command("reconstruct", "Monolithic FDK reconstruction", _reconstruct)
    sub.add_argument("--input", type=Path, required=True)
    sub.add_argument("--out", type=Path, required=True)
    sub.add_argument(
        "--kernel", choices=("standard", "optimized"), default="optimized"
    )
    sub.add_argument("--batch", type=int, default=DEFAULT_BATCH)
    sub.add_argument("--count-ops", action="store_true")

    sub = command("pipeline", "Pipelined reconstruction on a rank grid", _pipeline)
    sub.add_argument("--input", type=Path, required=True)
    sub.add_argument("--out", type=Path, required=True)
    sub.add_argument("--ranks", type=int, required=True)
    split = sub.add_mutually_exclusive_group(required=True)
    split.add_argument("--subvol-bytes", type=int)
    split.add_argument("--rows", type=int)
    sub.add_argument("--gpu-mem", type=int, help="Device memory in bytes")
    sub.add_argument("--batch", type=int, default=DEFAULT_BATCH)

    sub = command("model", "Evaluate the performance model", _model)
    sub.add_argument("--params", type=Path, required=True)
    sub.add_argument("--measured", type=float, help="Measured runtime in seconds")
    sub.add_argument(
        "--sweep", type=_int_list, default=[], help="Column counts, e.g. 1,2,4"
    )

    sub = command("bench", "Time both back-projection kernels", _bench, True)
    sub.add_argument("--repeat", type=int, default=1)
    sub.add_argument("--batch", type=int, default=DEFAULT_BATCH)
    sub.add_argument("--out", type=Path)
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    """Parse argv, run the command and return the exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    level = logging.WARNING - 10 * (args.verbose + args.sub_verbose)
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("dls_fdk").setLevel(max(level, logging.DEBUG))

    try:
        return args.func(args)
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except FdkError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
