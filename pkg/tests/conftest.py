import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from core.mesh_io import TriangleMesh  # noqa: E402
from core.spectral import compute_basis  # noqa: E402
from core.synthetic import cylinder, icosphere  # noqa: E402

TETRA_OFF = """OFF
4 4 0
0 0 0
1 0 0
0 1 0
0 0 1
3 0 2 1
3 0 1 3
3 0 3 2
3 1 2 3
"""


def grid_mesh(nx: int, ny: int, width: float, height: float) -> TriangleMesh:
    """Flat rectangle ``[0, width] x [0, height]`` split into right triangles."""
    xs, ys = np.meshgrid(np.linspace(0, width, nx), np.linspace(0, height, ny))
    vertices = np.column_stack([xs.ravel(), ys.ravel(), np.zeros(nx * ny)])
    idx = np.arange(nx * ny).reshape(ny, nx)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
    faces = np.concatenate([np.stack([a, b, d], 1), np.stack([a, d, c], 1)])
    return TriangleMesh(vertices, faces)


@pytest.fixture
def tetra_off() -> str:
    return TETRA_OFF


@pytest.fixture(scope="session")
def unit_sphere() -> TriangleMesh:
    return icosphere(3)


@pytest.fixture(scope="session")
def rectangle() -> TriangleMesh:
    return grid_mesh(41, 21, 2.0, 1.0)


@pytest.fixture(scope="session")
def tube_poses():
    """Spectral bases of one articulated tube in two poses, vertex-aligned."""
    return [compute_basis(cylinder(angle=a), 100) for a in (0.1, 0.5)]
