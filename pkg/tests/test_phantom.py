import math

import numpy as np
import pytest
from conftest import desk_geometry

from dls_fdk.errors import GeometryError
from dls_fdk.geometry import (
    build_projection_matrix,
    pixel_positions,
    project_point,
    source_position,
)
from dls_fdk.phantom import (
    FILL_FRACTION,
    Ellipsoid,
    Phantom,
    forward_project,
    forward_project_all,
    sample_volume,
    shepp_logan_3d,
)

UNIT_SPHERE = Phantom((Ellipsoid((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), 0.0, 1.0),))


def test_shepp_logan_table():
    ph = shepp_logan_3d()
    assert len(ph.ellipsoids) == 10
    assert ph.half_extent == 1.0
    assert ph.ellipsoids[0].density == 1.0
    assert ph.ellipsoids[2].rotation_deg == -18.0


def test_density_at_centre_and_outside():
    ph = shepp_logan_3d()
    inside = sum(e.density for e in ph.ellipsoids if e.contains(0.0, 0.0, 0.0))
    assert ph.density_at(0.0, 0.0, 0.0) == pytest.approx(inside)
    assert ph.density_at(0.0, 0.0, 0.0) == pytest.approx(0.2)
    assert ph.density_at(0.95, 0.95, 0.95) == 0.0
    assert ph.density_at(0.0, 0.99, 0.0) == 0.0


def test_rotated_ellipsoid_membership():
    e = Ellipsoid((0.0, 0.0, 0.0), (2.0, 0.5, 1.0), 30.0, 1.0)
    phi = math.radians(30.0)
    along = 1.9 * np.array([math.cos(phi), math.sin(phi)])
    across = 1.9 * np.array([-math.sin(phi), math.cos(phi)])
    assert e.contains(along[0], along[1], 0.0)
    assert not e.contains(across[0], across[1], 0.0)


def test_invalid_phantoms():
    with pytest.raises(GeometryError):
        Phantom(())
    with pytest.raises(GeometryError):
        Ellipsoid((0.0, 0.0, 0.0), (1.0, 0.0, 1.0), 0.0, 1.0)


def test_unit_sphere_voxelization():
    geom = desk_geometry(n_x=5, n_y=5, n_z=5)
    vol = sample_volume(UNIT_SPHERE, geom)
    assert vol.shape == (5, 5, 5)
    assert vol.samples.dtype == np.float32
    assert vol.value(2, 2, 2) == 1.0
    assert vol.value(0, 0, 0) == 0.0
    assert vol.value(4, 4, 0) == 0.0


def test_voxel_count_grows_with_resolution():
    counts = [
        np.count_nonzero(
            sample_volume(
                shepp_logan_3d(),
                desk_geometry(n_x=n, n_y=n, n_z=n, d_x=pitch, d_y=pitch, d_z=pitch),
            ).samples
        )
        for n, pitch in [(8, 2.0), (16, 1.0), (32, 0.5)]
    ]
    assert counts[0] < counts[1] < counts[2]


def test_voxelization_matches_point_membership():
    geom = desk_geometry(n_x=64, n_y=64, n_z=64)
    vol = sample_volume(shepp_logan_3d(), geom)

    s = FILL_FRACTION * 64 / 2
    c = (64 - 1) / 2
    x = ((np.arange(64) - c) * 1.0)[np.newaxis, np.newaxis, :]
    y = ((c - np.arange(64)) * 1.0)[np.newaxis, :, np.newaxis]
    z = ((c - np.arange(64)) * 1.0)[:, np.newaxis, np.newaxis]
    expected = np.zeros((64, 64, 64))
    for e in shepp_logan_3d().ellipsoids:
        cx, cy, cz = (value * s for value in e.center)
        a, b, cc = (value * s for value in e.semi_axes)
        cos, sin = math.cos(math.radians(e.rotation_deg)), math.sin(
            math.radians(e.rotation_deg)
        )
        dx, dy, dz = x - cx, y - cy, z - cz
        xr = (cos * dx + sin * dy) / a
        yr = (-sin * dx + cos * dy) / b
        zr = dz / cc
        expected = expected + np.where(xr * xr + yr * yr + zr * zr <= 1.0, e.density, 0)
    np.testing.assert_array_equal(vol.samples, expected.astype(np.float32))


def test_central_ray_through_sphere():
    geom = desk_geometry(n_u=49, n_v=49)
    ph = Phantom((Ellipsoid((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), 0.0, 0.5),))
    r = FILL_FRACTION * 16 / 2
    for s in (0, 5, 13):
        q = forward_project(ph, geom, s)
        assert q.view_index == s
        assert q.samples.shape == (49, 49)
        assert q.samples[24, 24] == pytest.approx(2 * r * 0.5, rel=1e-6)
        # corner pixel passes the sphere at more than twice its radius
        assert q.samples[0, 0] == 0.0


def test_off_centre_chord_through_sphere(geom):
    ph = UNIT_SPHERE.fitted(geom)
    r = ph.ellipsoids[0].semi_axes[0]
    beta = 0.7
    source = source_position(geom, beta)
    for u, v in [(26.5, 23.5), (20.0, 27.0), (23.5, 15.5)]:
        pixel = pixel_positions(geom, beta, u, v)
        direction = (pixel - source) / np.linalg.norm(pixel - source)
        b = np.linalg.norm(np.cross(direction, -source))
        assert b < r
        chord = ph.ellipsoids[0].chord_lengths(source, pixel)
        assert chord == pytest.approx(2 * math.sqrt(r * r - b * b), rel=1e-9)


def _boundary(e: Ellipsoid, inside: np.ndarray, outside: np.ndarray) -> np.ndarray:
    lo, hi = inside, outside
    for _ in range(200):
        mid = (lo + hi) / 2
        if e.contains(*mid):
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


def test_chord_lengths_agree_with_bisection():
    rng = np.random.default_rng(10)
    for _ in range(50):
        e = Ellipsoid(
            tuple(rng.uniform(-1, 1, 3)),
            tuple(rng.uniform(0.2, 2.0, 3)),
            rng.uniform(-90, 90),
            1.0,
        )
        inside = np.asarray(e.center) + rng.uniform(-0.05, 0.05, 3)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        start = inside - 10 * direction
        stop = inside + 10 * direction
        entry = _boundary(e, inside, start)
        exit_ = _boundary(e, inside, stop)
        expected = np.linalg.norm(exit_ - entry)
        assert e.chord_lengths(start, stop) == pytest.approx(expected, rel=1e-6)


def test_projection_is_linear_in_density(geom):
    ph = shepp_logan_3d()
    doubled = Phantom(
        tuple(
            Ellipsoid(e.center, e.semi_axes, e.rotation_deg, 2 * e.density)
            for e in ph.ellipsoids
        )
    )
    for s in (0, 9):
        np.testing.assert_array_equal(
            forward_project(doubled, geom, s).samples,
            2 * forward_project(ph, geom, s).samples,
        )


def test_rotation_centre_projects_to_detector_centre():
    geom = desk_geometry(n_x=5, n_y=5, n_z=5)
    for s in range(geom.n_p):
        point = project_point(build_projection_matrix(geom, s), 2, 2, 2)
        assert point.u == pytest.approx((geom.n_u - 1) / 2, abs=1e-9)
        assert point.v == pytest.approx((geom.n_v - 1) / 2, abs=1e-9)


def test_forward_project_all_in_view_order(geom, raw_projections):
    threaded = forward_project_all(shepp_logan_3d(), geom, workers=4)
    assert [q.view_index for q in threaded] == list(range(geom.n_p))
    for a, b in zip(raw_projections, threaded, strict=True):
        np.testing.assert_array_equal(a.samples, b.samples)
