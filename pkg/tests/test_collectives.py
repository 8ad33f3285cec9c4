import time
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, TypeVar

import numpy as np
import pytest

from dls_fdk.backprojection import Volume, VolumeLayout
from dls_fdk.collectives import Group
from dls_fdk.errors import (
    CollectiveTimeout,
    PipelineAborted,
    PipelineError,
    ShapeError,
)
from dls_fdk.filtering import Projection, ProjectionKind

T = TypeVar("T")


def run_members(n: int, body: Callable[[int], T]) -> List[T]:
    """Run body(pos) for every member position concurrently."""
    with ThreadPoolExecutor(max_workers=n) as pool:
        futures = [pool.submit(body, pos) for pos in range(n)]
        return [f.result() for f in futures]


def tagged(view_index: int, shape=(3, 4)) -> Projection:
    return Projection(
        np.full(shape, view_index, dtype=np.float32),
        ProjectionKind.FILTERED,
        view_index,
    )


def slab(values: np.ndarray) -> Volume:
    return Volume(values, VolumeLayout.K_MAJOR)


def test_single_member_collectives_are_identity():
    group = Group([(0, 0)])
    q = tagged(7)
    assert group.all_gather(0, q) == [q]
    s = slab(np.arange(24, dtype=np.float32).reshape(2, 3, 4))
    total = group.reduce_sum(0, s)
    assert total is not None
    np.testing.assert_array_equal(total.samples, s.samples)


def test_all_gather_delivers_items_in_member_order():
    group = Group([(r, 0) for r in range(4)], timeout=10)
    results = run_members(4, lambda pos: group.all_gather(pos, tagged(10 + pos)))
    for items in results:
        assert [q.view_index for q in items] == [10, 11, 12, 13]


def test_repeated_rounds_stay_matched():
    group = Group([(r, 1) for r in range(3)], timeout=10)

    def body(pos: int) -> List[List[int]]:
        return [
            [q.view_index for q in group.all_gather(pos, tagged(3 * t + pos))]
            for t in range(5)
        ]

    for rounds in run_members(3, body):
        assert rounds == [[3 * t, 3 * t + 1, 3 * t + 2] for t in range(5)]


def test_all_gather_rejects_mixed_shapes():
    group = Group([(r, 0) for r in range(3)], timeout=10)

    def body(pos: int):
        shape = (5, 4) if pos == 2 else (3, 4)
        with pytest.raises(ShapeError):
            group.all_gather(pos, tagged(pos, shape))

    run_members(3, body)


def test_reduce_of_ones_gives_twos():
    group = Group([(0, c) for c in range(2)], timeout=10)
    results = run_members(
        2, lambda pos: group.reduce_sum(pos, slab(np.ones((2, 2, 2))))
    )
    assert results[1] is None
    assert results[0] is not None
    np.testing.assert_array_equal(results[0].samples, np.full((2, 2, 2), 2.0))


def test_reduce_matches_sequential_sum():
    rng = np.random.default_rng(11)
    parts = [rng.normal(size=(4, 5, 6)).astype(np.float32) for _ in range(4)]
    expected = parts[0].copy()
    for p in parts[1:]:
        expected += p
    group = Group([(1, c) for c in range(4)], timeout=10)
    results = run_members(4, lambda pos: group.reduce_sum(pos, slab(parts[pos])))
    assert results[1:] == [None, None, None]
    np.testing.assert_array_equal(results[0].samples, expected)


def test_reduce_rejects_unequal_slabs():
    group = Group([(0, c) for c in range(2)], timeout=10)

    def body(pos: int):
        return group.reduce_sum(pos, slab(np.ones((2, 2, 2 + 2 * pos))))

    with pytest.raises(ShapeError):
        run_members(2, body)


def test_missing_member_times_out_naming_it():
    group = Group([(0, 3), (1, 3)], timeout=0.2, name="column 3")
    with pytest.raises(CollectiveTimeout, match=r"\(1, 3\)") as excinfo:
        group.all_gather(0, tagged(0))
    assert excinfo.value.rank == (0, 3)
    assert "column 3" in str(excinfo.value)


def test_abort_wakes_waiting_members():
    group = Group([(0, 0), (1, 0)], timeout=10)
    group.abort("stage failed")
    with pytest.raises(PipelineError, match="stage failed"):
        group.all_gather(0, tagged(0))


def test_collectives_after_an_abort_fail_at_once():
    group = Group([(0, 0), (1, 0)], timeout=30)
    group.abort("stage failed")
    start = time.monotonic()
    for _ in range(3):
        with pytest.raises(PipelineAborted, match="stage failed"):
            group.all_gather(0, tagged(0))
    with pytest.raises(PipelineAborted, match="stage failed") as excinfo:
        group.reduce_sum(0, slab(np.ones((2, 2, 2))))
    assert excinfo.value.rank == (0, 0)
    assert time.monotonic() - start < 5
