import os
from pathlib import Path
from typing import Any, List

import pytest

from dls_fdk.dataset import write_key_value
from dls_fdk.filtering import Projection, cosine_table, filter_stack, ramp_kernel
from dls_fdk.geometry import CbctGeometry, ProjectionMatrix, build_projection_matrices
from dls_fdk.phantom import forward_project_all, shepp_logan_3d

# Prevent pytest from catching exceptions when debugging in vscode so that break on
# exception works correctly (see: https://github.com/pytest-dev/pytest/issues/7409)
if os.getenv("PYTEST_RAISE", "0") == "1":

    @pytest.hookimpl(tryfirst=True)
    def pytest_exception_interact(call: pytest.CallInfo[Any]):
        if call.excinfo is not None:
            raise call.excinfo.value
        else:
            raise RuntimeError(
                f"{call} has no exception data, an unknown error has occurred"
            )

    @pytest.hookimpl(tryfirst=True)
    def pytest_internalerror(excinfo: pytest.ExceptionInfo[Any]):
        raise excinfo.value


def desk_geometry(**overrides: Any) -> CbctGeometry:
    """16^3 volume seen by a 48x48 detector over 32 views, magnification 2."""
    values = dict(
        n_u=48,
        n_v=48,
        d_u=1.0,
        d_v=1.0,
        n_p=32,
        n_x=16,
        n_y=16,
        n_z=16,
        d_x=1.0,
        d_y=1.0,
        d_z=1.0,
        d=60.0,
        cap_d=120.0,
    )
    values.update(overrides)
    return CbctGeometry(**values)


def full_size_geometry() -> CbctGeometry:
    """128^3 volume at 0.5 mm seen by a 256x256 detector over 360 views."""
    return desk_geometry(
        n_u=256,
        n_v=256,
        n_p=360,
        n_x=128,
        n_y=128,
        n_z=128,
        d_x=0.5,
        d_y=0.5,
        d_z=0.5,
        d=300.0,
        cap_d=600.0,
    )


@pytest.fixture(scope="session")
def geom() -> CbctGeometry:
    return desk_geometry()


@pytest.fixture(scope="session")
def matrices(geom: CbctGeometry) -> List[ProjectionMatrix]:
    return build_projection_matrices(geom)


@pytest.fixture(scope="session")
def raw_projections(geom: CbctGeometry) -> List[Projection]:
    return forward_project_all(shepp_logan_3d(), geom)


@pytest.fixture(scope="session")
def filtered_projections(
    geom: CbctGeometry, raw_projections: List[Projection]
) -> List[Projection]:
    return filter_stack(raw_projections, cosine_table(geom), ramp_kernel(geom))


@pytest.fixture
def geometry_file(tmp_path: Path, geom: CbctGeometry) -> Path:
    path = tmp_path / "geometry.cfg"
    write_key_value(path, geom.to_mapping())
    return path
