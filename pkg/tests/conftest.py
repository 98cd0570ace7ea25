import numpy as np
import pytest

from tifu import fixtures
from tifu.bvh import build_bvh
from tifu.mesh import TriangleMesh

CUBE_OBJ = """\
v 0 0 0
v 1 0 0
v 1 1 0
v 0 1 0
v 0 0 1
v 1 0 1
v 1 1 1
v 0 1 1
f 1 4 3
f 1 3 2
f 5 6 7
f 5 7 8
f 1 2 6
f 1 6 5
f 4 8 7
f 4 7 3
f 1 5 8
f 1 8 4
f 2 3 7
f 2 7 6
"""


def unit_cube(center=(0.0, 0.0, 0.0), size=1.0) -> TriangleMesh:
    """Outward-wound axis-aligned cube (12 triangles)."""
    v = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
                  [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]], dtype=np.float64)
    t = np.array([[0, 3, 2], [0, 2, 1], [4, 5, 6], [4, 6, 7], [0, 1, 5], [0, 5, 4],
                  [3, 7, 6], [3, 6, 2], [0, 4, 7], [0, 7, 3], [1, 2, 6], [1, 6, 5]])
    return TriangleMesh((v - 0.5) * size + np.asarray(center), t)


def random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@pytest.fixture(scope="session")
def sphere():
    return fixtures.sphere()


@pytest.fixture(scope="session")
def box():
    return fixtures.box()


@pytest.fixture(scope="session")
def dumbbell():
    return fixtures.dumbbell()


@pytest.fixture(scope="session")
def sphere_bvh(sphere):
    return build_bvh(sphere)


@pytest.fixture(scope="session")
def box_bvh(box):
    return build_bvh(box)


@pytest.fixture(scope="session")
def dumbbell_bvh(dumbbell):
    return build_bvh(dumbbell)


@pytest.fixture
def cube_obj(tmp_path):
    p = tmp_path / "cube.obj"
    p.write_text(CUBE_OBJ)
    return p


# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
