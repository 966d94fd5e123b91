"""
Residual Service - element and edge residuals of a P1 solution, explicit
indicators and the flux-free patch estimator
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from verifem.errors import InputError, SolverError
from verifem.services.fem import (
    DiffusionProblem,
    FeFunction,
    FeSpace,
    _require_problem,
    element_integrals,
    energy_norm,
    flux,
    residual_eval,
)
from verifem.services.local_spaces import (
    LagrangeElement,
    edge_bary,
    element_means,
    element_stiffness,
    inverse_jacobians,
    lagrange_element,
    physical_gradients,
)
from verifem.services.mesh import DIRICHLET, INTERIOR, NEUMANN, Mesh, uniform_refine
from verifem.services.quadrature import edge_rule, triangle_rule
from verifem.services.reports import BoundKind, EstimateReport
from verifem.services.workers import parallel_map

logger = logging.getLogger(__name__)

EDGE_POINTS = 3
COMPATIBILITY_TOL = 1e-8
MEAN_ZERO_TOL = 1e-10
BETA = {INTERIOR: 0.5, DIRICHLET: 0.0, NEUMANN: 1.0}


@dataclass
class ResidualData:
    """
    Interior residual r = f + div(A grad u_h) (= f for P1 and piecewise
    constant A) and edge residual t sampled at the edge Gauss points.

    t is (q_low - q_high) . n_e on interior edges, q_h . n - g on neumann
    edges and 0 on dirichlet edges, so that
    R(v) = sum_K int_K r v - sum_e int_e t v.
    """

    mesh: Mesh
    problem: DiffusionProblem
    q_h: np.ndarray
    edge_t: np.ndarray
    beta: np.ndarray
    t_points: np.ndarray = field(repr=False)
    t_weights: np.ndarray = field(repr=False)

    def interior(self, elements: np.ndarray, points: np.ndarray) -> np.ndarray:
        return self.problem.source_values(self.mesh, elements, points)

    def interior_norms(self) -> np.ndarray:
        """(nt,) ||r_K||_{0,K}^2"""
        return element_integrals(self.mesh, lambda el, B, X: self.interior(el, X) ** 2, 10)

    def edge_norms(self) -> np.ndarray:
        """(ne,) ||t_e||_{0,e}^2"""
        return self.mesh.edge_lengths * (self.edge_t ** 2 @ self.t_weights)


def residual_data(u_h: FeFunction, problem: Optional[DiffusionProblem] = None) -> ResidualData:
    problem = problem or _require_problem(u_h)
    mesh = u_h.mesh
    q_h = flux(u_h).vectors if problem is u_h.problem else np.einsum(
        "kij,kj->ki", problem.coefficient_on(mesh), u_h.gradients()
    )
    t, weights = edge_rule(EDGE_POINTS)
    edge_t = np.zeros((mesh.num_edges, len(t)))

    interior = mesh.edges_labeled("interior")
    low, high = mesh.edge_elements[interior, 0], mesh.edge_elements[interior, 1]
    jump = np.einsum("md,md->m", q_h[low] - q_h[high], mesh.edge_normals[interior])
    edge_t[interior] = jump[:, None]

    neumann = mesh.edges_labeled("neumann")
    if neumann.size:
        X = mesh.edge_points(neumann, t).reshape(-1, 2)
        normals = np.repeat(mesh.edge_normals[neumann], len(t), axis=0)
        g = problem.neumann_values(X, normals).reshape(len(neumann), len(t))
        trace = np.einsum("md,md->m", q_h[mesh.edge_elements[neumann, 0]], mesh.edge_normals[neumann])
        edge_t[neumann] = trace[:, None] - g

    beta = np.array([BETA[label] for label in range(3)])[mesh.edge_labels]
    return ResidualData(mesh, problem, q_h, edge_t, beta, t, weights)


def explicit_indicators(data: ResidualData) -> EstimateReport:
    """eta_K^2 = h_K^2 ||r_K||^2 + sum over edges of K of beta l ||t||^2"""
    mesh = data.mesh
    edge_terms = data.beta * mesh.edge_lengths * data.edge_norms()
    squared = mesh.diameters ** 2 * data.interior_norms() + edge_terms[mesh.element_edges].sum(axis=1)
    report = EstimateReport.from_contributions(
        "explicit", squared, BoundKind.INDICATOR, caveats=["unknown_constant"]
    )
    logger.info(f"Explicit residual indicator: {report.value:.6e}")
    return report


# ------------------------------------------------------------------ flux-free

@dataclass
class PatchSolution:
    """Local enriched solution z_i on the patch of vertex i"""

    vertex: int
    elements: np.ndarray
    coefficients: np.ndarray
    degree: int
    mean_zero: bool
    mean: float = 0.0

    @property
    def is_zero(self) -> bool:
        return not np.any(self.coefficients)


class FluxFreeContext:
    """
    Element quantities shared by all patch problems of one solution:
    local stiffness matrices, basis integrals, r-loads against
    v lambda_a and t-loads against v lambda_a on each local edge.
    """

    def __init__(self, u_h: FeFunction, enrichment: int = 2, data: Optional[ResidualData] = None):
        if enrichment < 1:
            raise InputError(f"Enrichment degree must be at least 1, got {enrichment}")
        self.u_h = u_h
        self.data = data or residual_data(u_h)
        self.mesh = mesh = u_h.mesh
        self.degree = 1 + enrichment
        self.element: LagrangeElement = lagrange_element(self.degree)
        self.coefficient = self.data.problem.coefficient_on(mesh)
        self.stiffness = element_stiffness(mesh, self.coefficient, self.element)
        self.means = element_means(mesh, self.element)
        self.interior_loads = self._interior_loads()
        self.edge_loads = self._edge_loads()

    def _interior_loads(self) -> np.ndarray:
        """(nt, 3, size): int_K r phi_n lambda_a"""
        mesh = self.mesh
        bary, weights = triangle_rule(5)
        nt, nq = mesh.num_elements, len(weights)
        elements = np.repeat(np.arange(nt), nq)
        B = np.tile(bary, (nt, 1))
        r = self.data.interior(elements, mesh.points(elements, B)).reshape(nt, nq)
        V = self.element.values(bary)
        return mesh.areas[:, None, None] * np.einsum("kq,q,qa,qn->kan", r, weights, bary, V)

    def _edge_loads(self) -> np.ndarray:
        """(nt, 3 edges, 3 vertices, size): int_{edge j} t phi_n lambda_a"""
        mesh = self.mesh
        s, weights = self.data.t_points, self.data.t_weights
        loads = np.zeros((mesh.num_elements, 3, 3, self.element.size))
        for j in range(3):
            edges = mesh.element_edges[:, j]
            forward = mesh.edges[edges, 0] == mesh.triangles[:, (j + 1) % 3]
            t_local = np.where(forward[:, None], self.data.edge_t[edges], self.data.edge_t[edges][:, ::-1])
            B = edge_bary(j, s)
            V = self.element.values(B)
            loads[:, j] = mesh.element_edge_lengths[:, j, None, None] * np.einsum(
                "kq,q,qa,qn->kan", t_local, weights, B, V
            )
        return loads


def flux_free_patch_solve(i: int, u_h: FeFunction, problem: Optional[DiffusionProblem] = None,
                          enrichment: int = 2, context: Optional[FluxFreeContext] = None) -> PatchSolution:
    """
    Galerkin solution of B_patch(z_i, v) = R(v phi_i) in the continuous
    degree-(1 + enrichment) space on the patch of vertex i, zero on the
    dirichlet edges of the patch or of zero mean when there are none.
    """
    if context is None:
        data = residual_data(u_h, problem) if problem is not None else None
        context = FluxFreeContext(u_h, enrichment, data)
    mesh, element = context.mesh, context.element
    patch = np.asarray(mesh.vertex_patch(i))

    ids: Dict[tuple, int] = {}
    local_to_patch: List[np.ndarray] = []
    for K in patch:
        keys = element.node_keys(mesh.triangles[K])
        local_to_patch.append(np.array([ids.setdefault(key, len(ids)) for key in keys]))
    n = len(ids)

    matrix = np.zeros((n, n))
    rhs = np.zeros(n)
    means = np.zeros(n)
    fixed = np.zeros(n, dtype=bool)
    scale = 0.0
    seen_edges = set()
    for idx, K in enumerate(patch):
        dofs = local_to_patch[idx]
        a = int(np.nonzero(mesh.triangles[K] == i)[0][0])
        matrix[np.ix_(dofs, dofs)] += context.stiffness[K]
        means[dofs] += context.means[K]
        rhs[dofs] += context.interior_loads[K, a]
        scale += np.abs(context.interior_loads[K, a]).sum()
        for j in ((a + 1) % 3, (a + 2) % 3):
            e = int(mesh.element_edges[K, j])
            if e in seen_edges:
                continue
            seen_edges.add(e)
            rhs[dofs] -= context.edge_loads[K, j, a]
            scale += np.abs(context.edge_loads[K, j, a]).sum()
        for j in range(3):
            if mesh.edge_labels[mesh.element_edges[K, j]] == DIRICHLET:
                fixed[dofs[element.nodes_on_local_edge(j)]] = True

    z = np.zeros(n)
    mean_zero = not fixed.any()
    try:
        if mean_zero:
            compatibility = abs(rhs.sum())
            if compatibility > COMPATIBILITY_TOL * max(scale, 1e-300):
                raise SolverError(
                    f"Patch of vertex {i} is incompatible: |R(phi_i)| = {compatibility:.3e} (scale {scale:.3e})"
                )
            saddle = np.zeros((n + 1, n + 1))
            saddle[:n, :n] = matrix
            saddle[:n, n] = means
            saddle[n, :n] = means
            z = np.linalg.solve(saddle, np.append(rhs, 0.0))[:n]
        else:
            free = ~fixed
            if free.any():
                z[free] = np.linalg.solve(matrix[np.ix_(free, free)], rhs[free])
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"Singular local system on the patch of vertex {i}: {exc}") from exc

    mean = float(means @ z)
    if mean_zero and abs(mean) > MEAN_ZERO_TOL * max(np.abs(means).sum() * np.abs(z).max(), 1e-300):
        raise SolverError(f"Patch solution of vertex {i} has mean {mean:.3e}")
    coefficients = np.stack([z[dofs] for dofs in local_to_patch])
    return PatchSolution(i, patch, coefficients, context.degree, mean_zero, mean)


def flux_free_patches(u_h: FeFunction, enrichment: int = 2,
                      context: Optional[FluxFreeContext] = None) -> List[PatchSolution]:
    """Patch solutions for every vertex, in vertex order"""
    context = context or FluxFreeContext(u_h, enrichment)
    solutions = parallel_map(
        lambda i: flux_free_patch_solve(i, u_h, context=context), range(u_h.mesh.num_vertices)
    )
    logger.info(
        f"Solved {len(solutions)} flux-free patch problems of degree {context.degree} "
        f"({sum(s.mean_zero for s in solutions)} with the mean-zero constraint)"
    )
    return solutions


def _check_solutions(solutions: List[PatchSolution], mesh: Mesh) -> int:
    if len(solutions) != mesh.num_vertices:
        raise InputError(f"Expected {mesh.num_vertices} patch solutions, got {len(solutions)}")
    degrees = {s.degree for s in solutions}
    if len(degrees) != 1:
        raise InputError(f"Patch solutions mix degrees {sorted(degrees)}")
    return degrees.pop()


def flux_free_estimate(solutions: List[PatchSolution], u_h: FeFunction) -> EstimateReport:
    """eta = sqrt(B_broken(sum_i z_i, sum_i z_i)), summed element by element"""
    mesh = u_h.mesh
    degree = _check_solutions(solutions, mesh)
    element = lagrange_element(degree)
    total = np.zeros((mesh.num_elements, element.size))
    for solution in solutions:
        np.add.at(total, solution.elements, solution.coefficients)
    S = element_stiffness(mesh, _require_problem(u_h).coefficient_on(mesh), element)
    squared = np.einsum("kn,knm,km->k", total, S, total)
    report = EstimateReport.from_contributions(
        "flux_free",
        squared,
        BoundKind.GUARANTEED_UPPER,
        caveats=["local_enrichment"],
        constants={"enrichment": float(degree - 1)},
    )
    logger.info(f"Flux-free upper estimate (degree {degree}): {report.value:.6e}")
    return report


def _vertex_weighted_coefficients(solutions: List[PatchSolution], mesh: Mesh, size: int) -> np.ndarray:
    """(nt, 3, size): coefficients of z_i on K, indexed by the local position of i"""
    weighted = np.zeros((mesh.num_elements, 3, size))
    for solution in solutions:
        local = np.argmax(mesh.triangles[solution.elements] == solution.vertex, axis=1)
        weighted[solution.elements, local] = solution.coefficients
    return weighted


def _tilde_v_values(weighted: np.ndarray, element: LagrangeElement, elements: np.ndarray,
                    bary: np.ndarray) -> np.ndarray:
    """v~ = sum_i z_i phi_i at barycentric points of the given elements"""
    V = element.values(bary)
    return np.einsum("ma,mn,man->m", bary, V, weighted[elements])


def _tilde_v_broken_energy(weighted: np.ndarray, element: LagrangeElement, mesh: Mesh,
                           coefficient: np.ndarray) -> float:
    bary, weights = triangle_rule(2 * element.degree)
    elements = np.arange(mesh.num_elements)
    V = element.values(bary)
    G = physical_gradients(element.reference_gradients(bary), inverse_jacobians(mesh, elements))
    z_values = np.einsum("qn,kan->kqa", V, weighted)
    z_grads = np.einsum("kqnd,kan->kqad", G, weighted)
    grad = np.einsum("kad,kqa->kqd", mesh.grad_lambda, z_values) + np.einsum("qa,kqad->kqd", bary, z_grads)
    density = np.einsum("kqi,kij,kqj->kq", grad, coefficient, grad)
    return float((mesh.areas * (density @ weights)).sum())


def flux_free_lower_bound(solutions: List[PatchSolution], u_h: FeFunction) -> EstimateReport:
    """
    |R(I v~)| / |||I v~||| with v~ = sum_i z_i phi_i interpolated at the
    vertices of two uniform refinements. The interpolation defect against
    the broken energy of v~ itself is recorded in the extras.
    """
    mesh = u_h.mesh
    problem = _require_problem(u_h)
    degree = _check_solutions(solutions, mesh)
    element = lagrange_element(degree)
    weighted = _vertex_weighted_coefficients(solutions, mesh, element.size)

    fine = uniform_refine(uniform_refine(mesh))
    ancestors = np.repeat(fine.ancestors_on(mesh), 3)
    points = fine.vertices[fine.triangles].reshape(-1, 2)
    bary = mesh.barycentric(ancestors, points)
    values = np.zeros(fine.num_vertices)
    values[fine.triangles.ravel()] = _tilde_v_values(weighted, element, ancestors, bary)
    values[fine.dirichlet_vertices] = 0.0
    interpolant = FeFunction(FeSpace(fine), values, problem, u_h.functional)

    norm = energy_norm(interpolant)
    broken = np.sqrt(max(_tilde_v_broken_energy(weighted, element, mesh, problem.coefficient_on(mesh)), 0.0))
    if norm == 0.0:
        logger.warning("Flux-free lower bound: v~ vanishes, reporting 0")
        return EstimateReport(
            estimator="flux_free_lower", value=0.0, bound_kind=BoundKind.GUARANTEED_LOWER, caveats=["degenerate"]
        )
    residual = residual_eval(u_h, interpolant)
    value = abs(residual) / norm
    defect = abs(broken - norm) / broken if broken > 0.0 else 0.0
    report = EstimateReport(
        estimator="flux_free_lower",
        value=value,
        bound_kind=BoundKind.GUARANTEED_LOWER,
        extras={"residual": residual, "test_norm": norm, "interpolation_defect": defect},
    )
    logger.info(f"Flux-free lower bound: {value:.6e} (interpolation defect {defect:.2e})")
    return report


def flux_free_bounds(u_h: FeFunction, enrichment: int = 2) -> Tuple[EstimateReport, EstimateReport]:
    """Upper estimate and lower bound from one set of patch solutions"""
    solutions = flux_free_patches(u_h, enrichment)
    return flux_free_estimate(solutions, u_h), flux_free_lower_bound(solutions, u_h)
