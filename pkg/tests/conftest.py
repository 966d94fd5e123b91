"""
Shared fixtures: catalogued problems, small meshes and their solutions
"""

import pytest

from verifem.services.fem import FeSpace, solve
from verifem.services.mesh import l_shape_mesh, unit_square_mesh
from verifem.services.problems import fig1_problem, lshape_problem, sin_sin_problem


@pytest.fixture(scope="session")
def sin_sin():
    return sin_sin_problem()


@pytest.fixture(scope="session")
def fig1():
    return fig1_problem()


@pytest.fixture(scope="session")
def lshape():
    return lshape_problem()


@pytest.fixture(scope="session")
def sin_sin_solution(sin_sin):
    """P1 solution of the sin-sin problem on the 8x8 square mesh"""
    return solve(sin_sin, FeSpace(unit_square_mesh(8)))


@pytest.fixture(scope="session")
def fig1_solution(fig1):
    return solve(fig1, FeSpace(unit_square_mesh(8, "fig1")))


@pytest.fixture(scope="session")
def lshape_solution(lshape):
    return solve(lshape, FeSpace(l_shape_mesh(2)))
