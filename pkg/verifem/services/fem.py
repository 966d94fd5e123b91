"""
FEM Service - P1 discretization of -div(A grad u) = f, sparse solve,
fluxes, norms and residual-functional evaluation
"""

import logging
from typing import Callable, Optional, Tuple, Union

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, cg

from verifem.errors import InputError, MeshError, SolverError
from verifem.services.fields import ElementFlux, VectorField
from verifem.services.mesh import Mesh
from verifem.services.quadrature import edge_rule, triangle_rule

logger = logging.getLogger(__name__)

SOLVER_RTOL = 1e-12
RESIDUAL_CHECK = 1e-10

PointFunction = Callable[[np.ndarray], np.ndarray]


class DiffusionProblem:
    """
    Data of -div(A grad u) = f in the domain, u = 0 on the dirichlet part,
    A grad u . n = g on the neumann part.

    coefficient(points) -> (m, 2, 2) is sampled at element centroids, so A is
    piecewise constant on every mesh. source(points) -> (m,) and
    neumann(points, normals) -> (m,) are evaluated pointwise. When
    constant_source is set, f is taken as constant on each element.
    """

    def __init__(
        self,
        name: str,
        source: PointFunction,
        coefficient: Optional[PointFunction] = None,
        neumann: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None,
        exact_value: Optional[PointFunction] = None,
        exact_gradient: Optional[PointFunction] = None,
        constant_source: bool = False,
    ):
        self.name = name
        self.source = source
        self.coefficient = coefficient
        self.neumann = neumann
        self.exact_value = exact_value
        self.exact_gradient = exact_gradient
        self.constant_source = constant_source

    # coefficient -----------------------------------------------------------

    def coefficient_at(self, points: np.ndarray) -> np.ndarray:
        if self.coefficient is None:
            return np.broadcast_to(np.eye(2), (len(points), 2, 2)).copy()
        return np.asarray(self.coefficient(points), dtype=float).reshape(len(points), 2, 2)

    def coefficient_on(self, mesh: Mesh) -> np.ndarray:
        """(nt, 2, 2) per-element coefficient; rejects non-SPD values"""
        A = self.coefficient_at(mesh.centroids)
        if not np.allclose(A, np.transpose(A, (0, 2, 1)), rtol=0.0, atol=1e-14 * np.abs(A).max()):
            raise InputError(f"Coefficient of problem '{self.name}' is not symmetric")
        if np.linalg.eigvalsh(A).min() <= 0.0:
            raise InputError(f"Coefficient of problem '{self.name}' is not positive definite")
        return A

    def coefficient_bounds(self, mesh: Mesh) -> Tuple[float, float]:
        eig = np.linalg.eigvalsh(self.coefficient_on(mesh))
        return float(eig.min()), float(eig.max())

    # source and boundary data ----------------------------------------------

    def source_values(self, mesh: Mesh, elements: np.ndarray, points: np.ndarray) -> np.ndarray:
        if self.constant_source:
            return np.asarray(self.source(mesh.centroids[elements]), dtype=float)
        return np.asarray(self.source(points), dtype=float)

    def source_is_piecewise_constant(self, mesh: Mesh) -> bool:
        return self.constant_source

    def element_source(self, mesh: Mesh) -> np.ndarray:
        """(nt,) element means of f"""
        if self.source_is_piecewise_constant(mesh):
            return self.source_values(mesh, np.arange(mesh.num_elements), mesh.centroids)
        return element_integrals(mesh, lambda el, B, X: self.source_values(mesh, el, X), 5) / mesh.areas

    def neumann_values(self, points: np.ndarray, normals: np.ndarray) -> np.ndarray:
        if self.neumann is None:
            return np.zeros(len(points))
        return np.asarray(self.neumann(points, normals), dtype=float)

    @property
    def has_exact_solution(self) -> bool:
        return self.exact_gradient is not None

    def exact_flux(self, points: np.ndarray) -> np.ndarray:
        if self.exact_gradient is None:
            raise InputError(f"Problem '{self.name}' has no exact solution")
        return np.einsum("mij,mj->mi", self.coefficient_at(points), self.exact_gradient(points))

    def load_vector(self, space: "FeSpace", problem: Optional["DiffusionProblem"] = None) -> np.ndarray:
        return load_vector(self, space)

    def __repr__(self) -> str:
        return f"DiffusionProblem('{self.name}')"


class FeSpace:
    """Continuous P1 space on a mesh; one dof per vertex"""

    degree = 1

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        self.dirichlet_dofs = mesh.dirichlet_vertices
        mask = np.ones(mesh.num_vertices, dtype=bool)
        mask[self.dirichlet_dofs] = False
        self.free_dofs = np.nonzero(mask)[0]

    @property
    def dof(self) -> int:
        return self.mesh.num_vertices

    def __repr__(self) -> str:
        return f"FeSpace(P1, {self.dof} dofs, {len(self.free_dofs)} free)"


class FeFunction:
    """
    P1 field: one coefficient per vertex. `problem` supplies the coefficient
    A; `functional` supplies the load F(v) of the equation this field solves
    (the problem itself for primal solutions, a quantity of interest for
    adjoint solutions).
    """

    def __init__(self, space: FeSpace, coefficients: np.ndarray, problem: Optional[DiffusionProblem] = None,
                 functional=None, solver_info: Optional[dict] = None):
        coefficients = np.asarray(coefficients, dtype=float)
        if coefficients.shape != (space.dof,):
            raise InputError(f"Expected {space.dof} coefficients, got shape {coefficients.shape}")
        self.space = space
        self.coefficients = coefficients
        self.problem = problem
        self.functional = functional if functional is not None else problem
        self.solver_info = solver_info or {}

    @property
    def mesh(self) -> Mesh:
        return self.space.mesh

    def gradients(self) -> np.ndarray:
        """(nt, 2) constant gradient on every element"""
        return np.einsum("kj,kjd->kd", self.coefficients[self.mesh.triangles], self.mesh.grad_lambda)

    def values(self, elements: np.ndarray, bary: np.ndarray) -> np.ndarray:
        return np.einsum("mj,mj->m", bary, self.coefficients[self.mesh.triangles[elements]])

    def on(self, mesh: Mesh) -> "FeFunction":
        return prolong(self, mesh)

    def _combine(self, other: "FeFunction", sign: float) -> "FeFunction":
        if other.mesh is self.mesh:
            return FeFunction(self.space, self.coefficients + sign * other.coefficients, self.problem, self.functional)
        if other.mesh.is_refinement_of(self.mesh):
            return prolong(self, other.mesh)._combine(other, sign)
        return self._combine(prolong(other, self.mesh), sign)

    def __add__(self, other: "FeFunction") -> "FeFunction":
        return self._combine(other, 1.0)

    def __sub__(self, other: "FeFunction") -> "FeFunction":
        return self._combine(other, -1.0)

    def __mul__(self, scale: float) -> "FeFunction":
        return FeFunction(self.space, float(scale) * self.coefficients, self.problem, self.functional)

    __rmul__ = __mul__


# ----------------------------------------------------------------- integration

def element_integrals(mesh: Mesh, integrand: Callable, degree: int = 5) -> np.ndarray:
    """
    (nt,) integrals over every element of integrand(elements, bary, points),
    which receives flattened quadrature data and returns (m,) values
    """
    bary, weights = triangle_rule(degree)
    nt, nq = mesh.num_elements, len(weights)
    elements = np.repeat(np.arange(nt), nq)
    B = np.tile(bary, (nt, 1))
    X = mesh.points(elements, B)
    values = np.asarray(integrand(elements, B, X), dtype=float).reshape(nt, nq)
    return mesh.areas * (values @ weights)


def edge_integrals(mesh: Mesh, edges: np.ndarray, integrand: Callable, npoints: int = 3) -> np.ndarray:
    """(len(edges),) integrals of integrand(edges, t, points) along the given edges"""
    t, weights = edge_rule(npoints)
    ne, nq = len(edges), len(t)
    X = mesh.edge_points(edges, t).reshape(-1, 2)
    E = np.repeat(edges, nq)
    T = np.tile(t, ne)
    values = np.asarray(integrand(E, T, X), dtype=float).reshape(ne, nq)
    return mesh.edge_lengths[edges] * (values @ weights)


# ------------------------------------------------------------------- assembly

def assemble_stiffness(space: FeSpace, coefficient: np.ndarray) -> sp.csr_matrix:
    """Stiffness matrix with entries B(phi_j, phi_i); symmetric bit for bit"""
    mesh = space.mesh
    G = mesh.grad_lambda
    local = mesh.areas[:, None, None] * np.einsum("kia,kab,kjb->kij", G, coefficient, G)
    local = 0.5 * (local + np.transpose(local, (0, 2, 1)))
    tri = mesh.triangles
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    full = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(space.dof, space.dof)).tocsr()
    upper = sp.triu(full, k=1)
    return (sp.diags(full.diagonal()) + upper + upper.T).tocsr()


def mass_matrix(space: FeSpace) -> sp.csr_matrix:
    mesh = space.mesh
    reference = (np.ones((3, 3)) + np.eye(3)) / 12.0
    local = mesh.areas[:, None, None] * reference[None, :, :]
    tri = mesh.triangles
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(space.dof, space.dof)).tocsr()


def load_vector(problem: DiffusionProblem, space: FeSpace) -> np.ndarray:
    """F(phi_i) = int f phi_i + int_{Gamma_N} g phi_i"""
    mesh = space.mesh
    tri = mesh.triangles
    if problem.source_is_piecewise_constant(mesh):
        fK = problem.element_source(mesh)
        local = np.repeat((fK * mesh.areas / 3.0)[:, None], 3, axis=1)
    else:
        bary, weights = triangle_rule(5)
        nt, nq = mesh.num_elements, len(weights)
        elements = np.repeat(np.arange(nt), nq)
        B = np.tile(bary, (nt, 1))
        f = problem.source_values(mesh, elements, mesh.points(elements, B)).reshape(nt, nq)
        local = mesh.areas[:, None] * np.einsum("kq,q,qj->kj", f, weights, bary)
    F = np.bincount(tri.ravel(), weights=local.ravel(), minlength=space.dof)

    neumann = mesh.edges_labeled("neumann")
    if neumann.size:
        t, weights = edge_rule(3)
        X = mesh.edge_points(neumann, t).reshape(-1, 2)
        normals = np.repeat(mesh.edge_normals[neumann], len(t), axis=0)
        g = problem.neumann_values(X, normals).reshape(len(neumann), len(t))
        lengths = mesh.edge_lengths[neumann]
        first = lengths * (g @ (weights * (1.0 - t)))
        second = lengths * (g @ (weights * t))
        F += np.bincount(mesh.edges[neumann, 0], weights=first, minlength=space.dof)
        F += np.bincount(mesh.edges[neumann, 1], weights=second, minlength=space.dof)
    return F


def assemble(problem: DiffusionProblem, space: FeSpace) -> Tuple[sp.csr_matrix, np.ndarray]:
    """Stiffness matrix and load vector of the problem on the space"""
    return assemble_stiffness(space, problem.coefficient_on(space.mesh)), load_vector(problem, space)


# ---------------------------------------------------------------------- solve

def _pcg(matrix: sp.csr_matrix, rhs: np.ndarray) -> Tuple[np.ndarray, int]:
    n = matrix.shape[0]
    diagonal = matrix.diagonal()
    preconditioner = LinearOperator((n, n), matvec=lambda r: r / diagonal, dtype=float)
    counter = {"iterations": 0}

    def count(_):
        counter["iterations"] += 1

    x, info = cg(matrix, rhs, rtol=SOLVER_RTOL, atol=0.0, maxiter=20 * n, M=preconditioner, callback=count)
    if info != 0:
        raise SolverError(f"Conjugate gradients did not converge (info={info}) after {counter['iterations']} iterations")
    # one refinement pass drives the residual down to roundoff
    correction = rhs - matrix @ x
    if np.any(correction):
        dx, info = cg(matrix, correction, rtol=SOLVER_RTOL, atol=0.0, maxiter=20 * n, M=preconditioner, callback=count)
        if info == 0:
            x = x + dx
    return x, counter["iterations"]


def solve_system(space: FeSpace, matrix: sp.csr_matrix, rhs: np.ndarray) -> Tuple[np.ndarray, dict]:
    """Eliminate the dirichlet dofs and solve the reduced SPD system"""
    free = space.free_dofs
    coefficients = np.zeros(space.dof)
    info = {"iterations": 0, "relative_residual": 0.0, "free_dofs": int(free.size)}
    if free.size == 0:
        return coefficients, info
    reduced = matrix[free][:, free].tocsr()
    b = rhs[free]
    norm_b = np.linalg.norm(b)
    if norm_b == 0.0:
        return coefficients, info
    x, iterations = _pcg(reduced, b)
    residual = np.linalg.norm(reduced @ x - b) / norm_b
    if residual > RESIDUAL_CHECK:
        raise SolverError(f"Relative residual {residual:.3e} above {RESIDUAL_CHECK:.0e}")
    coefficients[free] = x
    info.update(iterations=iterations, relative_residual=float(residual))
    return coefficients, info


def solve(problem: DiffusionProblem, space: FeSpace) -> FeFunction:
    """Galerkin solution u_h of B(u_h, v) = F(v) for all v in the space"""
    if space.dirichlet_dofs.size == 0:
        raise InputError("Space has no dirichlet dofs; the problem is not well posed")
    matrix, rhs = assemble(problem, space)
    coefficients, info = solve_system(space, matrix, rhs)
    logger.info(
        f"Solved '{problem.name}' on {space.dof} dofs: {info['iterations']} CG iterations, "
        f"relative residual {info['relative_residual']:.2e}"
    )
    return FeFunction(space, coefficients, problem, solver_info=info)


def _require_problem(u_h: FeFunction) -> DiffusionProblem:
    if u_h.problem is None:
        raise InputError("Field carries no problem data (coefficient A unknown)")
    return u_h.problem


def flux(u_h: FeFunction) -> ElementFlux:
    """q_h = A grad u_h, constant on every element"""
    problem = _require_problem(u_h)
    A = problem.coefficient_on(u_h.mesh)
    return ElementFlux(u_h.mesh, np.einsum("kij,kj->ki", A, u_h.gradients()), problem)


# ---------------------------------------------------------------------- norms

def energy_norm(v: FeFunction, per_element: bool = False) -> Union[float, np.ndarray]:
    """|||v||| = sqrt(int A grad v . grad v)"""
    A = _require_problem(v).coefficient_on(v.mesh)
    g = v.gradients()
    contributions = v.mesh.areas * np.einsum("ki,kij,kj->k", g, A, g)
    return contributions if per_element else float(np.sqrt(contributions.sum()))


def flux_norm(p: VectorField, problem: Optional[DiffusionProblem] = None, degree: int = 5,
              per_element: bool = False) -> Union[float, np.ndarray]:
    """|||p|||_q = sqrt(int A^{-1} p . p) over the mesh of p"""
    problem = problem or p.problem
    if problem is None:
        raise InputError("Flux norm needs the problem coefficient")
    mesh = p.mesh
    A_inv = np.linalg.inv(problem.coefficient_on(mesh))

    def integrand(elements, bary, points):
        values = p.values(elements, bary)
        return np.einsum("mi,mij,mj->m", values, A_inv[elements], values)

    contributions = element_integrals(mesh, integrand, degree)
    return contributions if per_element else float(np.sqrt(max(contributions.sum(), 0.0)))


def flux_inner(p: VectorField, r: VectorField, problem: Optional[DiffusionProblem] = None,
               degree: int = 5) -> np.ndarray:
    """(nt,) element contributions of int A^{-1} p . r on the finer of the two meshes"""
    problem = problem or p.problem or r.problem
    if problem is None:
        raise InputError("Flux inner product needs the problem coefficient")
    mesh = p.mesh if p.mesh.is_refinement_of(r.mesh) else r.mesh
    p, r = p.on(mesh), r.on(mesh)
    A_inv = np.linalg.inv(problem.coefficient_on(mesh))

    def integrand(elements, bary, points):
        return np.einsum("mi,mij,mj->m", p.values(elements, bary), A_inv[elements], r.values(elements, bary))

    return element_integrals(mesh, integrand, degree)


def l2_norm(v: FeFunction) -> float:
    c = v.coefficients
    return float(np.sqrt(max(c @ (mass_matrix(v.space) @ c), 0.0)))


def exact_energy_error(u_h: FeFunction, problem: Optional[DiffusionProblem] = None, degree: int = 10,
                       per_element: bool = False) -> Union[float, np.ndarray]:
    """sqrt(sum_K int_K A (grad u - grad u_h) . (grad u - grad u_h))"""
    problem = problem or _require_problem(u_h)
    if not problem.has_exact_solution:
        raise InputError(f"Problem '{problem.name}' has no exact gradient")
    mesh = u_h.mesh
    A = problem.coefficient_on(mesh)
    grad_h = u_h.gradients()

    def integrand(elements, bary, points):
        d = problem.exact_gradient(points) - grad_h[elements]
        return np.einsum("mi,mij,mj->m", d, A[elements], d)

    contributions = element_integrals(mesh, integrand, degree)
    return contributions if per_element else float(np.sqrt(max(contributions.sum(), 0.0)))


# ------------------------------------------------------- nested-space helpers

def interpolate(space: FeSpace, function: Callable[[np.ndarray], np.ndarray],
                problem: Optional[DiffusionProblem] = None) -> FeFunction:
    """Nodal interpolant of a pointwise function"""
    return FeFunction(space, np.asarray(function(space.mesh.vertices), dtype=float), problem)


def prolong(u_h: FeFunction, fine_mesh: Mesh) -> FeFunction:
    """Exact representation of a coarse P1 field on a nested refinement"""
    if fine_mesh is u_h.mesh:
        return u_h
    if not fine_mesh.is_refinement_of(u_h.mesh):
        raise MeshError("Cannot prolong onto a mesh that does not refine the field's mesh")
    P = fine_mesh.prolongation_from(u_h.mesh)
    return FeFunction(FeSpace(fine_mesh), P @ u_h.coefficients, u_h.problem, u_h.functional)


def residual_eval(u_h: FeFunction, v: FeFunction) -> float:
    """R(v) = F(v) - B(u_h, v) computed on the mesh of v"""
    problem = _require_problem(u_h)
    fine = v.mesh
    if not fine.is_refinement_of(u_h.mesh):
        raise MeshError("Residual needs v on a refinement of the mesh of u_h")
    w = prolong(u_h, fine)
    matrix = assemble_stiffness(v.space, problem.coefficient_on(fine))
    load = u_h.functional.load_vector(v.space, problem)
    return float(load @ v.coefficients - w.coefficients @ (matrix @ v.coefficients))


def bilinear(u: FeFunction, v: FeFunction) -> float:
    """B(u, v) on the finer of the two meshes"""
    problem = _require_problem(u)
    mesh = u.mesh if u.mesh.is_refinement_of(v.mesh) else v.mesh
    u, v = prolong(u, mesh), prolong(v, mesh)
    matrix = assemble_stiffness(u.space, problem.coefficient_on(mesh))
    return float(u.coefficients @ (matrix @ v.coefficients))
