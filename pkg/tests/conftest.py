"""
Shared pytest fixtures.
"""

import pytest
from fastapi.testclient import TestClient

from src.api import create_app
from src.microgeometry import build_lattice
from src.models import BoundCheck, MicrostructureSpec, ResultRecord, Schedule


@pytest.fixture
def small_spec():
    """Two 1/2-cells per axis with a = 1/4."""
    return MicrostructureSpec(n=2, a=0.25, eps=0.5, domain_len=1.0)


@pytest.fixture
def small_lattice(small_spec):
    """17 x 17 node lattice over the small geometry."""
    return build_lattice(small_spec, 8)


@pytest.fixture
def plain_lattice():
    """Unperforated lattice, a = 0."""
    return build_lattice(MicrostructureSpec(n=2, a=0.0, eps=0.5, domain_len=1.0), 8)


@pytest.fixture
def fast_schedule():
    """Short continuation with a direct linear solver."""
    return Schedule(scales=(2.0, 1.0), max_outer=20, linear_solver="direct")


@pytest.fixture
def cache_root(tmp_path):
    return tmp_path / "cache"


@pytest.fixture
def output_dir(tmp_path):
    path = tmp_path / "results"
    path.mkdir()
    return path


@pytest.fixture
def sample_record():
    """A record as the service would store it for one cell problem."""
    return ResultRecord(
        key="ab" + "0" * 62,
        config_hash="0123456789abcdef",
        operation="cell-f",
        inputs={"a": 0.0, "xi": [1.0, 0.0], "M": 8},
        outputs={
            "fhat": 1.0,
            "tables": {"cell_f.csv": [{"a": 0.0, "M": 8, "xi": [1.0, 0.0], "fhat": 1.0, "residual": 0.0}]},
        },
        timings={"seconds": 0.01},
        checks=[BoundCheck.bracket("competitor bound", 1.0, 0.0, 1.0)],
        version="1.0.0",
    )


@pytest.fixture
def client(cache_root, output_dir):
    """Test client for the viewer over temporary directories."""
    return TestClient(create_app(cache_root, output_dir))
