import threading
from typing import Dict, List

import numpy as np
import pytest
from conftest import desk_geometry, full_size_geometry

from dls_fdk.backprojection import VolumeLayout, backproject_optimized
from dls_fdk.errors import PipelineAborted, PipelineError, PlanningError
from dls_fdk.filtering import Projection, cosine_table, filter_stack, ramp_kernel
from dls_fdk.geometry import build_projection_matrices
from dls_fdk.phantom import forward_project_all, shepp_logan_3d
from dls_fdk.pipeline import (
    SlabBand,
    plan_grid,
    run_pipeline,
    run_pipeline_with_report,
)


def rmse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sqrt(np.mean((a.astype(np.float64) - b) ** 2)))


@pytest.fixture(scope="module")
def reference(geom, matrices, filtered_projections) -> np.ndarray:
    return backproject_optimized(matrices, filtered_projections, geom).samples


@pytest.fixture
def source(raw_projections):
    return lambda s: raw_projections[s]


def test_plan_for_large_problem():
    geom = desk_geometry(n_p=4096, n_x=4096, n_y=4096, n_z=4096)
    plan = plan_grid(geom, 128, sub_vol_bytes=2**33)
    assert (plan.rows, plan.cols) == (32, 4)
    assert plan.proj_per_rank == 32
    assert plan.proj_per_column == 1024
    assert plan.n_ranks == 128


def test_plan_with_one_rank_per_row(geom):
    plan = plan_grid(geom, 4, rows=4)
    assert (plan.rows, plan.cols) == (4, 1)
    assert plan.sub_vol_bytes == 4 * 16**3 // 4


@pytest.mark.parametrize("sub_vol_bytes", [5000, 6000, 4096])
def test_rows_round_up_to_a_power_of_two(geom, sub_vol_bytes):
    assert plan_grid(geom, 8, sub_vol_bytes=sub_vol_bytes).rows == 4


@pytest.mark.parametrize(
    "n_ranks, kwargs, geometry, message",
    [
        (2, {"rows": 4}, {}, "can not hold"),
        (6, {"rows": 4}, {}, "do not split"),
        (6, {"rows": 2}, {}, "not divisible"),
        (1, {"rows": 1}, {"n_z": 15}, "n_z/2"),
        (16, {"rows": 16}, {}, "n_z/2"),
        (1, {"rows": 1, "gpu_mem_bytes": 1000}, {}, "bytes per device"),
        (4, {}, {}, "exactly one"),
        (4, {"rows": 2, "sub_vol_bytes": 100}, {}, "exactly one"),
        (4, {"sub_vol_bytes": 0}, {}, "positive"),
    ],
)
def test_plan_errors(n_ranks, kwargs, geometry, message):
    with pytest.raises(PlanningError, match=message):
        plan_grid(desk_geometry(**geometry), n_ranks, **kwargs)


def test_bands_partition_the_volume(geom):
    for rows in (1, 2, 4, 8):
        plan = plan_grid(geom, 8, rows=rows)
        owned = sorted(k for band in plan.bands for k in band.global_slices())
        assert owned == list(range(geom.n_z))
        for band in plan.bands:
            assert band.depth == geom.n_z // rows


def test_band_slices_mirror_each_other():
    band = SlabBand(row=1, k_start=2, half_depth=2, n_z=16)
    assert band.global_slices() == [2, 3, 12, 13]
    for t, k in enumerate(band.lower):
        assert band.global_slices()[band.depth - 1 - t] == 16 - 1 - k


def test_rank_views_partition_the_scan(geom):
    plan = plan_grid(geom, 8, rows=4)
    seen: List[int] = []
    for r, c in plan.ranks():
        views = plan.rank_views(r, c)
        assert len(views) == plan.proj_per_rank
        assert set(views) <= set(plan.column_views(c))
        seen.extend(views)
    assert sorted(seen) == list(range(geom.n_p))


def test_single_rank_matches_optimized_kernel(geom, source, reference):
    vol = run_pipeline(plan_grid(geom, 1, rows=1), geom, source, workers=2)
    assert vol.layout is VolumeLayout.I_MAJOR
    np.testing.assert_array_equal(vol.samples, reference)


@pytest.mark.parametrize("n_ranks, rows", [(2, 2), (4, 2), (8, 4)])
def test_grid_matches_optimized_kernel(geom, source, reference, n_ranks, rows):
    plan = plan_grid(geom, n_ranks, rows=rows)
    vol = run_pipeline(plan, geom, source, workers=8, batch=5)
    assert vol.shape == geom.volume_shape
    assert rmse(vol.samples, reference) < 1e-5


def test_repeated_runs_are_identical(geom, source):
    plan = plan_grid(geom, 4, rows=2)
    first = run_pipeline(plan, geom, source, workers=4)
    second = run_pipeline(plan, geom, source, workers=4)
    np.testing.assert_array_equal(first.samples, second.samples)


def test_sink_receives_every_slice_once(geom, source):
    received: Dict[int, List[np.ndarray]] = {}
    lock = threading.Lock()

    def sink(k: int, plane: np.ndarray) -> None:
        with lock:
            received.setdefault(k, []).append(np.array(plane))

    vol = run_pipeline(plan_grid(geom, 4, rows=4), geom, source, sink, workers=4)
    assert sorted(received) == list(range(geom.n_z))
    for k, planes in received.items():
        assert len(planes) == 1
        assert planes[0].shape == (geom.n_y, geom.n_x)
        np.testing.assert_array_equal(planes[0], vol.samples[k])


def test_every_view_is_filtered_once_and_backprojected_per_row(geom, source):
    plan = plan_grid(geom, 4, rows=2)
    _, report = run_pipeline_with_report(plan, geom, source, workers=4)
    filtered: List[int] = []
    for (r, c), timings in report.ranks.items():
        assert sorted(timings.filtered) == list(plan.rank_views(r, c))
        assert sorted(timings.backprojected) == list(plan.column_views(c))
        filtered.extend(timings.filtered)
    assert sorted(filtered) == list(range(geom.n_p))
    # each row back-projects every view, paying 2 + n_z / (2R) per column
    assert report.inner_products == geom.n_p * geom.n_x * geom.n_y * (
        geom.n_z // 2 + 2 * plan.rows
    )


def test_report_sections(geom, source):
    plan = plan_grid(geom, 2, rows=1)
    _, report = run_pipeline_with_report(plan, geom, source, workers=2)
    sections = report.as_sections()
    assert sections["pipeline"]["rows"] == 1
    assert sections["pipeline"]["cols"] == 2
    assert set(sections) == {"pipeline", "rank 0,0", "rank 0,1"}
    assert report.t_compute > 0
    assert report.delta >= 0
    assert report.wall >= report.t_compute


def test_failing_source_names_its_rank(geom, raw_projections):
    def source(s: int) -> Projection:
        if s == 5:
            raise OSError("disk went away")
        return raw_projections[s]

    plan = plan_grid(geom, 4, rows=2)
    with pytest.raises(PipelineError, match="disk went away") as excinfo:
        run_pipeline(plan, geom, source, workers=4, timeout=10)
    assert excinfo.value.rank == (0, 0)


def test_failing_rank_is_reported_whatever_its_message(geom, raw_projections):
    plan = plan_grid(geom, 4, rows=2)
    bad_view = plan.rank_views(1, 1)[0]

    def source(s: int) -> Projection:
        if s == bad_view:
            raise OSError("transfer aborted by host")
        return raw_projections[s]

    with pytest.raises(PipelineError, match="transfer aborted by host") as excinfo:
        run_pipeline(plan, geom, source, workers=4, timeout=10)
    assert not isinstance(excinfo.value, PipelineAborted)
    assert excinfo.value.rank == (1, 1)


def test_wrong_shape_projection_fails(geom):
    plan = plan_grid(geom, 2, rows=2)
    with pytest.raises(PipelineError, match="shape"):
        run_pipeline(
            plan, geom, lambda s: Projection(np.zeros((4, 4))), workers=2, timeout=10
        )


def test_plan_must_match_geometry(geom, source):
    plan = plan_grid(desk_geometry(n_p=64), 2, rows=1)
    with pytest.raises(PlanningError):
        run_pipeline(plan, geom, source)


@pytest.mark.slow
def test_stages_overlap_on_a_full_size_scan():
    geom = full_size_geometry()
    raw = forward_project_all(shepp_logan_3d(), geom, workers=8)
    plan = plan_grid(geom, 4, rows=2)
    vol, report = run_pipeline_with_report(
        plan, geom, lambda s: raw[s], workers=8, timeout=600
    )
    projs = filter_stack(raw, cosine_table(geom), ramp_kernel(geom), workers=8)
    expected = backproject_optimized(build_projection_matrices(geom), projs, geom)
    assert rmse(vol.samples, expected.samples) < 1e-5
    assert report.delta > 1.1
