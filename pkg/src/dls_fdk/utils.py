"""
Helper tables cached between runs.

The cosine table and ramp kernel depend only on the geometry, so they are
pickled with dill (windows may be lambdas) under a name derived from a digest
of the geometry.
"""

import hashlib
import logging
import os
from pathlib import Path
from typing import Tuple

import dill

from .filtering import (
    RAMP_WINDOWS,
    CosineTable,
    RampKernel,
    cosine_table,
    ramp_kernel,
)
from .geometry import CbctGeometry

log = logging.getLogger(__name__)

CACHE_ENV = "DLS_FDK_CACHE"


def default_cache_dir() -> Path | None:
    """Cache directory from $DLS_FDK_CACHE, or None to disable caching."""
    value = os.environ.get(CACHE_ENV)
    return Path(value) if value else None


def tables_key(
    geom: CbctGeometry, half_width: int | None = None, window: str = "ram-lak"
) -> str:
    text = ";".join(f"{k}={v}" for k, v in sorted(geom.to_mapping().items()))
    text += f";half_width={half_width};window={window}"
    return hashlib.sha1(text.encode()).hexdigest()[:16]


def build_filter_tables(
    geom: CbctGeometry, half_width: int | None = None, window: str = "ram-lak"
) -> Tuple[CosineTable, RampKernel]:
    if window not in RAMP_WINDOWS:
        raise KeyError(f"unknown ramp window {window!r}")
    return cosine_table(geom), ramp_kernel(geom, half_width, RAMP_WINDOWS[window])


def get_filter_tables(
    geom: CbctGeometry,
    cache_dir: Path | None = None,
    half_width: int | None = None,
    window: str = "ram-lak",
) -> Tuple[CosineTable, RampKernel]:
    """Return the filter tables for a geometry, loading them from cache if stored.

    Args:
        geom (CbctGeometry): Scan geometry
        cache_dir (Path, optional): Where pickled tables live. Defaults to
            None, which builds the tables without caching.
        half_width (int, optional): Ramp half width. Defaults to n_u - 1.
        window (str, optional): Name in RAMP_WINDOWS. Defaults to "ram-lak".
    """
    if cache_dir is None:
        return build_filter_tables(geom, half_width, window)

    key = tables_key(geom, half_width, window)
    file_path = Path(cache_dir) / f"filter_tables_{key}.pkl"
    if file_path.is_file():
        try:
            with open(file_path, "rb") as _file:
                tables = dill.load(_file, ignore=True)
            log.debug("loaded filter tables from %s", file_path)
            return tables
        except Exception as e:
            log.warning("ignoring unreadable cache %s: %s", file_path, e)

    tables = build_filter_tables(geom, half_width, window)
    try:
        file_path.parent.mkdir(parents=True, exist_ok=True)
        with file_path.open("wb") as f:
            dill.dump(tables, f)
    except OSError as e:
        log.warning("could not write cache %s: %s", file_path, e)
    return tables
