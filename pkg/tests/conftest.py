import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from fmapnet import synthetic
from fmapnet.spectral_basis import compute_basis, compute_full_basis


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow empirical checks")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running empirical trend check (needs --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def _central_difference(fn, x, h=1e-5):
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        plus = fn(x)
        flat[i] = saved - h
        minus = fn(x)
        flat[i] = saved
        out[i] = (plus - minus) / (2 * h)
    return grad


def _relative_error(analytic, numeric):
    scale = max(np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(np.asarray(analytic) - numeric)) / scale)


@pytest.fixture
def numerical_gradient():
    """Central finite differences of a scalar function of one array."""
    return _central_difference


@pytest.fixture
def relative_error():
    """max |analytic - numeric| / max |numeric|."""
    return _relative_error


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tetra():
    return synthetic.tetrahedron()


@pytest.fixture(scope="session")
def small_sheet():
    # 6 x 5 grid: 30 vertices
    return synthetic.grid_sheet(6, 5, bump=0.2, bump_center=(0.3, -0.2), name="small_sheet")


@pytest.fixture(scope="session")
def small_sheet_full_basis(small_sheet):
    return compute_full_basis(small_sheet)


@pytest.fixture(scope="session")
def medium_sheet():
    return synthetic.grid_sheet(16, 14, bump=0.3, bump_center=(0.25, -0.15), name="medium_sheet")


@pytest.fixture(scope="session")
def medium_sheet_basis(medium_sheet):
    return compute_basis(medium_sheet, k=30)


@pytest.fixture(scope="session")
def unit_icosphere():
    return synthetic.icosphere(subdivisions=4)


@pytest.fixture(scope="session")
def isometric_pair():
    return synthetic.isometric_pair(nx=32, ny=32, seed=3, permute=True)
