"""
Problem catalogue: manufactured and benchmark diffusion problems with
their meshes
"""

import logging
from typing import Callable, Optional, Tuple

import numpy as np

from verifem.errors import InputError
from verifem.services.fem import DiffusionProblem, element_integrals
from verifem.services.mesh import Mesh, l_shape_mesh, unit_square_mesh

logger = logging.getLogger(__name__)

PROBLEM_NAMES = ("fig1_square", "sin_sin", "lshape_singular", "custom")

# odd terms kept in the fast-decaying remainder of the fig1 series
FIG1_REMAINDER_TERMS = 40


def sin_sin_problem() -> DiffusionProblem:
    """u = sin(pi x) sin(pi y) on the unit square, A = I, all dirichlet"""
    pi = np.pi

    def source(points):
        return 2.0 * pi ** 2 * np.sin(pi * points[:, 0]) * np.sin(pi * points[:, 1])

    def value(points):
        return np.sin(pi * points[:, 0]) * np.sin(pi * points[:, 1])

    def gradient(points):
        x, y = points[:, 0], points[:, 1]
        return pi * np.column_stack([np.cos(pi * x) * np.sin(pi * y), np.sin(pi * x) * np.cos(pi * y)])

    return DiffusionProblem("sin_sin", source, exact_value=value, exact_gradient=gradient)


def fig1_gradient(points: np.ndarray) -> np.ndarray:
    """
    Exact gradient of the unit-square problem with f = 0, u = 0 on three
    sides and unit flux through the top side.

    u = sum over odd k of 4/(k^2 pi^2 cosh(k pi)) sin(k pi x) sinh(k pi y).
    The slowly converging part near the top is summed in closed form with
    artanh(z), z = exp(-pi (1 - y) + i pi x); the rest decays like exp(-k pi).
    """
    x, y = points[:, 0], points[:, 1]
    z = np.exp(-np.pi * (1.0 - y) + 1j * np.pi * x)
    lead = (4.0 / np.pi) * np.arctanh(z)
    ux = lead.real.copy()
    uy = lead.imag.copy()
    for k in range(1, 2 * FIG1_REMAINDER_TERMS, 2):
        kp = k * np.pi
        scale = 4.0 / kp / (1.0 + np.exp(-2.0 * kp))
        far = np.exp(-kp * (1.0 + y))
        back = np.exp(-kp * (3.0 - y))
        ux -= scale * np.cos(kp * x) * (far + back)
        uy += scale * np.sin(kp * x) * (far - back)
    return np.column_stack([ux, uy])


def fig1_problem() -> DiffusionProblem:
    """Unit square, f = 0, g = 1 on the top side, dirichlet elsewhere"""
    return DiffusionProblem(
        "fig1_square",
        source=lambda points: np.zeros(len(points)),
        neumann=lambda points, normals: np.ones(len(points)),
        exact_gradient=fig1_gradient,
        constant_source=True,
    )


def lshape_problem() -> DiffusionProblem:
    """u = r^{2/3} sin(2 theta / 3) on the L-shape with theta in [0, 2 pi)"""

    def polar(points):
        r = np.hypot(points[:, 0], points[:, 1])
        theta = np.mod(np.arctan2(points[:, 1], points[:, 0]), 2.0 * np.pi)
        return r, theta

    def value(points):
        r, theta = polar(points)
        return r ** (2.0 / 3.0) * np.sin(2.0 * theta / 3.0)

    def gradient(points):
        r, theta = polar(points)
        scale = (2.0 / 3.0) * np.where(r > 0.0, r, np.inf) ** (-1.0 / 3.0)
        return scale[:, None] * np.column_stack([-np.sin(theta / 3.0), np.cos(theta / 3.0)])

    def neumann(points, normals):
        return np.einsum("md,md->m", gradient(points), normals)

    return DiffusionProblem(
        "lshape_singular",
        source=lambda points: np.zeros(len(points)),
        neumann=neumann,
        exact_value=value,
        exact_gradient=gradient,
        constant_source=True,
    )


def custom_problem(a11: float = 1.0, a12: float = 0.0, a22: float = 1.0, f: float = 1.0,
                   g: float = 0.0) -> DiffusionProblem:
    """Constant coefficient, constant source and constant neumann data"""
    A = np.array([[a11, a12], [a12, a22]])
    if np.linalg.eigvalsh(A).min() <= 0.0:
        raise InputError(f"Custom coefficient [[{a11}, {a12}], [{a12}, {a22}]] is not positive definite")
    return DiffusionProblem(
        "custom",
        source=lambda points: np.full(len(points), float(f)),
        coefficient=lambda points: np.broadcast_to(A, (len(points), 2, 2)),
        neumann=lambda points, normals: np.full(len(points), float(g)),
        constant_source=True,
    )


class ProjectedSourceProblem(DiffusionProblem):
    """
    The base problem with f replaced by its element means on a given mesh.
    On refinements of that mesh the source stays the coarse element mean.
    """

    def __init__(self, base: DiffusionProblem, mesh: Mesh):
        super().__init__(
            f"{base.name}_projected",
            source=base.source,
            coefficient=base.coefficient,
            neumann=base.neumann,
            constant_source=True,
        )
        self.base = base
        self.projection_mesh = mesh
        self.means = base.element_source(mesh)

    def source_values(self, mesh, elements, points):
        return self.means[mesh.ancestors_on(self.projection_mesh)[elements]]

    def element_source(self, mesh):
        return self.means[mesh.ancestors_on(self.projection_mesh)]

    def projection_defect(self) -> float:
        """||f - mean f||_0 on the projection mesh"""
        mesh = self.projection_mesh

        def integrand(elements, bary, points):
            return (self.base.source_values(mesh, elements, points) - self.means[elements]) ** 2

        return float(np.sqrt(element_integrals(mesh, integrand, 10).sum()))


def piecewise_constant_projection(problem: DiffusionProblem, mesh: Mesh) -> ProjectedSourceProblem:
    projected = ProjectedSourceProblem(problem, mesh)
    logger.info(f"Projected source of '{problem.name}': defect {projected.projection_defect():.3e}")
    return projected


def build_mesh(problem_name: str, n: int, domain: Optional[str] = None, layout: Optional[str] = None) -> Mesh:
    """Default mesh family of each catalogued problem"""
    if problem_name == "sin_sin":
        return unit_square_mesh(n, "all_dirichlet")
    if problem_name == "fig1_square":
        return unit_square_mesh(n, "fig1")
    if problem_name == "lshape_singular":
        return l_shape_mesh(n)
    if problem_name == "custom":
        if (domain or "square") == "lshape":
            return l_shape_mesh(n)
        return unit_square_mesh(n, layout or "all_dirichlet")
    raise InputError(f"Unknown problem '{problem_name}', expected one of {', '.join(PROBLEM_NAMES)}")


def build_problem(problem_name: str, **custom) -> DiffusionProblem:
    if problem_name == "sin_sin":
        return sin_sin_problem()
    if problem_name == "fig1_square":
        return fig1_problem()
    if problem_name == "lshape_singular":
        return lshape_problem()
    if problem_name == "custom":
        return custom_problem(**custom)
    raise InputError(f"Unknown problem '{problem_name}', expected one of {', '.join(PROBLEM_NAMES)}")


def problem_and_mesh(problem_name: str, n: int, **custom) -> Tuple[DiffusionProblem, Mesh]:
    domain = custom.pop("domain", None)
    layout = custom.pop("layout", None)
    return build_problem(problem_name, **custom), build_mesh(problem_name, n, domain, layout)
