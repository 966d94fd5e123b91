"""
Equilibration Service - hybrid-flux (element equilibration) construction of
a statically admissible flux, the constitutive relation error and the
equilibrated element residual estimator
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from verifem.errors import ContractViolation, EquilibrationError, InputError, MeshError
from verifem.services.fem import (
    DiffusionProblem,
    FeFunction,
    _require_problem,
    element_integrals,
    flux,
    flux_norm,
)
from verifem.services.fields import ElementP1Flux, ElementPolynomialFlux, FunctionField, VectorField
from verifem.services.local_spaces import (
    edge_bary,
    element_means,
    element_stiffness,
    inverse_jacobians,
    lagrange_element,
    physical_gradients,
)
from verifem.services.mesh import NEUMANN, Mesh
from verifem.services.quadrature import edge_rule, triangle_rule
from verifem.services.reports import BoundKind, EstimateReport
from verifem.services.workers import parallel_map

logger = logging.getLogger(__name__)

BACKENDS = ("analytic", "fe")

NODE_COMPATIBILITY_TOL = 1e-10
NODE_CONSISTENCY_TOL = 1e-8
ELEMENT_COMPATIBILITY_TOL = 1e-8
EQUILIBRIUM_TOL = 1e-10
FE_DEFECT_TOL = 1e-10
CROSS_CHECK_TOL = 1e-10


class EquilibrationData:
    """
    Everything the construction needs from one discrete problem.

    q_h is the total discrete flux A grad u_h + offset, where offset is a
    piecewise constant vector field carried by the load (zero for primal
    problems). The constructed flux is reported with the offset removed so
    that it compares directly with A grad u_h.
    """

    def __init__(self, mesh: Mesh, problem: DiffusionProblem, q_h: np.ndarray,
                 source: Callable[[np.ndarray, np.ndarray], np.ndarray], source_constant: bool,
                 neumann: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None,
                 offset: Optional[np.ndarray] = None):
        self.mesh = mesh
        self.problem = problem
        self.coefficient = problem.coefficient_on(mesh)
        self.q_h = np.asarray(q_h, dtype=float).reshape(mesh.num_elements, 2)
        self.source = source
        self.source_constant = source_constant
        self.neumann = neumann
        self.offset = np.zeros((mesh.num_elements, 2)) if offset is None else np.asarray(offset, dtype=float)
        self.source_moments = self._source_moments()
        self.neumann_moments = self._neumann_moments()

    @classmethod
    def from_solution(cls, u_h: FeFunction, problem: Optional[DiffusionProblem] = None) -> "EquilibrationData":
        problem = problem or _require_problem(u_h)
        mesh = u_h.mesh
        return cls(
            mesh,
            problem,
            flux(u_h).vectors,
            source=lambda elements, points: problem.source_values(mesh, elements, points),
            source_constant=problem.source_is_piecewise_constant(mesh),
            neumann=problem.neumann_values,
        )

    def _source_moments(self) -> np.ndarray:
        """(nt, 3) int_K f lambda_a with the rule of the global load vector"""
        mesh = self.mesh
        nt = mesh.num_elements
        if self.source_constant:
            fK = self.source(np.arange(nt), mesh.centroids)
            return np.repeat((fK * mesh.areas / 3.0)[:, None], 3, axis=1)
        bary, weights = triangle_rule(5)
        nq = len(weights)
        elements = np.repeat(np.arange(nt), nq)
        B = np.tile(bary, (nt, 1))
        f = self.source(elements, mesh.points(elements, B)).reshape(nt, nq)
        return mesh.areas[:, None] * np.einsum("kq,q,qa->ka", f, weights, bary)

    def _neumann_moments(self) -> np.ndarray:
        """(ne, 2) int_e g phi at the two endpoints of every neumann edge"""
        mesh = self.mesh
        moments = np.zeros((mesh.num_edges, 2))
        edges = mesh.edges_labeled("neumann")
        if edges.size == 0 or self.neumann is None:
            return moments
        t, weights = edge_rule(3)
        X = mesh.edge_points(edges, t).reshape(-1, 2)
        normals = np.repeat(mesh.edge_normals[edges], len(t), axis=0)
        g = self.neumann(X, normals).reshape(len(edges), len(t))
        lengths = mesh.edge_lengths[edges]
        moments[edges, 0] = lengths * (g @ (weights * (1.0 - t)))
        moments[edges, 1] = lengths * (g @ (weights * t))
        return moments

    def neumann_projection_defect(self) -> float:
        """sqrt of the sum over neumann edges of ||g - P1 projection of g||^2"""
        mesh = self.mesh
        edges = mesh.edges_labeled("neumann")
        if edges.size == 0 or self.neumann is None:
            return 0.0
        t, weights = edge_rule(5)
        X = mesh.edge_points(edges, t).reshape(-1, 2)
        normals = np.repeat(mesh.edge_normals[edges], len(t), axis=0)
        g = self.neumann(X, normals).reshape(len(edges), len(t))
        c = edge_traction(mesh.edge_lengths[edges], self.neumann_moments[edges])
        projected = c[:, 0, None] * (1.0 - t) + c[:, 1, None] * t
        return float(np.sqrt((mesh.edge_lengths[edges] * ((g - projected) ** 2 @ weights)).sum()))

    def element_source_integrals(self) -> np.ndarray:
        return self.source_moments.sum(axis=1)

    def load_vector(self) -> np.ndarray:
        """F(phi_i) assembled from the same moments"""
        mesh = self.mesh
        offset_terms = -mesh.areas[:, None] * np.einsum("kd,kad->ka", self.offset, mesh.grad_lambda)
        F = np.bincount(mesh.triangles.ravel(), weights=(self.source_moments + offset_terms).ravel(),
                        minlength=mesh.num_vertices)
        F += np.bincount(mesh.edges[:, 0], weights=self.neumann_moments[:, 0], minlength=mesh.num_vertices)
        F += np.bincount(mesh.edges[:, 1], weights=self.neumann_moments[:, 1], minlength=mesh.num_vertices)
        return F


# -------------------------------------------------------------- node stage

def nodal_projections(data: EquilibrationData) -> np.ndarray:
    """(nt, 3) Q_i^K = int_K (q_h . grad phi_i - f phi_i) for every element vertex"""
    mesh = data.mesh
    return mesh.areas[:, None] * np.einsum("kd,kad->ka", data.q_h, mesh.grad_lambda) - data.source_moments


def nodal_projection(i: int, K: int, u_h: FeFunction, problem: Optional[DiffusionProblem] = None) -> float:
    mesh = u_h.mesh
    if K not in mesh.vertex_patch(i):
        raise InputError(f"Element {K} is not in the patch of vertex {i}")
    local = int(np.nonzero(mesh.triangles[K] == i)[0][0])
    return float(nodal_projections(EquilibrationData.from_solution(u_h, problem))[K, local])


@dataclass
class NodeSystem:
    """Element equations around vertex i and their weighted min-norm solution"""

    vertex: int
    elements: List[int]
    edges: List[int]
    interior: bool
    Q: np.ndarray
    sigma: np.ndarray
    rhs: np.ndarray
    b_hat: np.ndarray
    b_mean: np.ndarray
    shift: Optional[float] = None
    residual: float = 0.0

    @property
    def corrections(self) -> np.ndarray:
        return self.b_hat - self.b_mean


def _local_index(mesh: Mesh, K: int, i: int) -> int:
    return int(np.nonzero(mesh.triangles[K] == i)[0][0])


def _ordered_patch(mesh: Mesh, i: int) -> Tuple[List[int], bool]:
    """
    Patch elements ordered around vertex i: each element is followed by the
    neighbour across its edge (i, v_{a+2}). Boundary vertices start at the
    element whose edge (i, v_{a+1}) lies on the boundary.
    """
    patch = mesh.vertex_patch(i)
    start = patch[0]
    for K in patch:
        e = mesh.element_edges[K, (_local_index(mesh, K, i) + 2) % 3]
        if mesh.edge_elements[e, 1] < 0:
            start = K
            break
    order = [start]
    K = start
    closed = False
    while True:
        e = mesh.element_edges[K, (_local_index(mesh, K, i) + 1) % 3]
        low, high = mesh.edge_elements[e]
        following = high if low == K else low
        if following < 0:
            break
        if following == start:
            closed = True
            break
        order.append(int(following))
        K = int(following)
    if len(order) != len(patch):
        raise MeshError(f"Patch of vertex {i} is not a single fan of elements")
    return order, closed


def _mean_moment(data: EquilibrationData, e: int) -> float:
    """b^m: moment against the hat function of the averaged normal flux"""
    mesh = data.mesh
    low, high = mesh.edge_elements[e]
    length = mesh.edge_lengths[e]
    normal = mesh.edge_normals[e]
    if high < 0:
        return 0.5 * length * float(data.q_h[low] @ normal)
    return 0.25 * length * float((data.q_h[low] + data.q_h[high]) @ normal)


def solve_node_system(i: int, data: EquilibrationData, Q: Optional[np.ndarray] = None,
                      load_scale: Optional[float] = None) -> NodeSystem:
    """
    Moments b_hat of the edge tractions against phi_i solving
    sum over the edges of K of sigma b_hat = Q_i^K for every K in the patch,
    with the smallest sum of (b_hat - b^m)^2 / l^2.

    Interior nodes use the closed form along the cycle of elements; boundary
    nodes move the neumann moments to the right side and solve the weighted
    min-norm problem by least squares.
    """
    mesh = data.mesh
    Q = nodal_projections(data) if Q is None else Q
    order, closed = _ordered_patch(mesh, i)
    n = len(order)

    unknowns: List[int] = []
    columns = {}
    rows = []
    rhs = np.zeros(n)
    for row, K in enumerate(order):
        a = _local_index(mesh, K, i)
        rhs[row] = Q[K, a]
        for j in ((a + 1) % 3, (a + 2) % 3):
            e = int(mesh.element_edges[K, j])
            sigma = float(mesh.sigma[K, j])
            if mesh.edge_labels[e] == NEUMANN:
                position = 0 if mesh.edges[e, 0] == i else 1
                rhs[row] -= sigma * data.neumann_moments[e, position]
                continue
            if e not in columns:
                columns[e] = len(unknowns)
                unknowns.append(e)
            rows.append((row, columns[e], sigma))
    M = np.zeros((n, len(unknowns)))
    for row, column, sigma in rows:
        M[row, column] = sigma
    lengths = mesh.edge_lengths[unknowns]
    b_mean = np.array([_mean_moment(data, e) for e in unknowns])
    scale = np.abs(Q[order, [_local_index(mesh, K, i) for K in order]]).sum() + np.abs(rhs).sum()
    scale = max(scale, load_scale or 0.0, 1e-300)

    shift = None
    if closed:
        total = rhs.sum()
        if abs(total) > NODE_COMPATIBILITY_TOL * scale:
            raise EquilibrationError(f"Interior node {i} is incompatible: sum of Q = {total:.3e}")
        Qc = rhs - total / n
        # X_j is the moment leaving K_j through the edge shared with K_{j+1}
        shared = [int(mesh.element_edges[K, (_local_index(mesh, K, i) + 1) % 3]) for K in order]
        outward = np.array([mesh.sigma[K, (_local_index(mesh, K, i) + 1) % 3] for K in order], dtype=float)
        X0 = np.cumsum(Qc)
        X0[-1] = 0.0
        mean_moments = np.array([b_mean[columns[e]] for e in shared])
        Xm = outward * mean_moments
        D = mesh.edge_lengths[shared] ** -2.0
        shift = float(D @ (Xm - X0) / D.sum())
        b_hat = np.zeros(len(unknowns))
        b_hat[[columns[e] for e in shared]] = outward * (X0 + shift)
    elif unknowns:
        y = np.linalg.lstsq(M * lengths[None, :], rhs - M @ b_mean, rcond=None)[0]
        b_hat = b_mean + lengths * y
    else:
        b_hat = np.zeros(0)

    residual = float(np.abs(M @ b_hat - rhs).max()) if n else 0.0
    if residual > NODE_CONSISTENCY_TOL * scale:
        raise EquilibrationError(f"Node system of vertex {i} is inconsistent: residual {residual:.3e}")
    return NodeSystem(i, order, unknowns, closed, Q[order, [_local_index(mesh, K, i) for K in order]],
                      M, rhs, b_hat, b_mean, shift, residual)


def edge_traction(length: float, moments: np.ndarray) -> np.ndarray:
    """
    Endpoint coefficients (c_1, c_2) of the affine traction whose moments
    against the two hat functions are the given values
    """
    length = np.asarray(length, dtype=float)
    if np.any(length <= 0.0):
        raise MeshError(f"Edge of length {length.min()} carries no traction")
    moments = np.asarray(moments, dtype=float)
    m1, m2 = moments[..., 0], moments[..., 1]
    return np.stack([(4.0 * m1 - 2.0 * m2) / length, (4.0 * m2 - 2.0 * m1) / length], axis=-1)


@dataclass
class TractionSet:
    """
    Affine traction on every edge, oriented by the edge reference normal;
    coefficients[e] are its values at edges[e, 0] and edges[e, 1]
    """

    mesh: Mesh
    moments: np.ndarray
    coefficients: np.ndarray
    node_systems: List[NodeSystem] = field(default_factory=list, repr=False)

    def element_values(self) -> np.ndarray:
        """(nt, 3, 2) signed traction of each local edge at v_{j+1} and v_{j+2}"""
        mesh = self.mesh
        values = np.empty((mesh.num_elements, 3, 2))
        for j in range(3):
            edges = mesh.element_edges[:, j]
            forward = mesh.edges[edges, 0] == mesh.triangles[:, (j + 1) % 3]
            c = self.coefficients[edges]
            oriented = np.where(forward[:, None], c, c[:, ::-1])
            values[:, j] = mesh.sigma[:, j, None] * oriented
        return values

    def element_boundary_integrals(self) -> np.ndarray:
        """(nt,) int over the boundary of K of the signed traction"""
        values = self.element_values()
        return (self.mesh.element_edge_lengths * values.mean(axis=2)).sum(axis=1)

    def rows(self) -> List[Tuple[int, float, float]]:
        return [(e, float(c[0]), float(c[1])) for e, c in enumerate(self.coefficients)]


def build_tractions(data: EquilibrationData) -> TractionSet:
    """Node systems for every vertex, then the edge tractions"""
    mesh = data.mesh
    Q = nodal_projections(data)
    load_scale = float(np.linalg.norm(data.load_vector()))
    systems = parallel_map(lambda i: solve_node_system(i, data, Q, load_scale), range(mesh.num_vertices))

    moments = data.neumann_moments.copy()
    for system in systems:
        i = system.vertex
        for e, value in zip(system.edges, system.b_hat):
            moments[e, 0 if mesh.edges[e, 0] == i else 1] = value
    coefficients = edge_traction(mesh.edge_lengths, moments)
    interior = sum(1 for s in systems if s.interior)
    logger.info(f"Solved {len(systems)} node systems ({interior} interior) and {mesh.num_edges} edge tractions")
    return TractionSet(mesh, moments, coefficients, systems)


# ----------------------------------------------------------- element stage

class EquilibratedFlux(VectorField):
    """
    Flux built from a traction set, reported without the load offset.
    Carries the defect record of the construction.
    """

    def __init__(self, data: EquilibrationData, inner: VectorField, backend: str, tractions: TractionSet,
                 quadrature_degree: int):
        super().__init__(data.mesh, data.problem)
        self.data = data
        self.inner = inner
        self.backend = backend
        self.tractions = tractions
        self.quadrature_degree = quadrature_degree
        self.divergence_defect = divergence_defect(data, inner)
        self.trace_mismatch = trace_mismatch(data, inner, tractions)
        self.equilibrium_residual = element_equilibrium_residual(data, tractions)
        self.neumann_defect = data.neumann_projection_defect()

    def values(self, elements, bary):
        return self.inner.values(elements, bary)

    def divergence(self, elements, bary):
        return self.inner.divergence(elements, bary)

    @property
    def admissible(self) -> bool:
        """Equilibrium and traction continuity hold to roundoff"""
        scale = max(_flux_scale(self.data), 1e-300)
        return (
            float(np.sqrt((self.divergence_defect ** 2).sum())) <= FE_DEFECT_TOL * scale
            and float(self.trace_mismatch.max(initial=0.0)) <= FE_DEFECT_TOL * scale
        )

    def caveats(self) -> List[str]:
        caveats = []
        if not self.admissible:
            caveats.append("source_not_piecewise_constant" if self.backend == "analytic" else "fe_backend_defect")
        if self.neumann_defect > FE_DEFECT_TOL * max(_flux_scale(self.data), 1e-300):
            caveats.append("neumann_projected")
        return caveats

    def element_means(self) -> np.ndarray:
        """(nt, 2) mean of the flux over every element"""
        mesh = self.mesh
        return np.column_stack([
            element_integrals(mesh, lambda el, B, X, d=d: self.values(el, B)[:, d], self.quadrature_degree)
            for d in range(2)
        ]) / mesh.areas[:, None]


def _flux_scale(data: EquilibrationData) -> float:
    mesh = data.mesh
    return float(np.abs(data.q_h).max(initial=0.0) * np.sqrt(mesh.areas.sum())
                 + np.abs(data.element_source_integrals()).sum())


def divergence_defect(data: EquilibrationData, q_hat: VectorField) -> np.ndarray:
    """(nt,) ||f + div q_hat||_{0,K}"""
    mesh = data.mesh

    def integrand(elements, bary, points):
        return (data.source(elements, points) + q_hat.divergence(elements, bary)) ** 2

    return np.sqrt(np.maximum(element_integrals(mesh, integrand, 10), 0.0))


def trace_mismatch(data: EquilibrationData, q_hat: VectorField, tractions: TractionSet) -> np.ndarray:
    """(nt,) max over the edge Gauss points of |q_hat . n - g_K|"""
    mesh = data.mesh
    s, _ = edge_rule(3)
    g = tractions.element_values()
    offset = data.offset
    nt = mesh.num_elements
    elements = np.repeat(np.arange(nt), len(s))
    worst = np.zeros(nt)
    for j in range(3):
        B = np.tile(edge_bary(j, s), (nt, 1))
        total = q_hat.values(elements, B) + offset[elements]
        normals = np.repeat(mesh.outward_normals[:, j], len(s), axis=0)
        trace = np.einsum("md,md->m", total, normals).reshape(nt, len(s))
        expected = g[:, j, 0, None] * (1.0 - s) + g[:, j, 1, None] * s
        worst = np.maximum(worst, np.abs(trace - expected).max(axis=1))
    return worst


def element_equilibrium_residual(data: EquilibrationData, tractions: TractionSet) -> np.ndarray:
    """(nt,) |int_K f + int over the boundary of K of g_K|"""
    return np.abs(data.element_source_integrals() + tractions.element_boundary_integrals())


def _check_equilibrium(data: EquilibrationData, tractions: TractionSet):
    mesh = data.mesh
    residual = element_equilibrium_residual(data, tractions)
    g = np.abs(tractions.element_values()).max(axis=(1, 2))
    scale = np.abs(data.source_moments).sum(axis=1) + mesh.element_edge_lengths.sum(axis=1) * g
    worst = int(np.argmax(residual - EQUILIBRIUM_TOL * scale))
    if residual[worst] > EQUILIBRIUM_TOL * max(scale[worst], 1e-300):
        raise EquilibrationError(
            f"Element {worst} is not in equilibrium: residual {residual[worst]:.3e} (scale {scale[worst]:.3e})"
        )


def element_flux_analytic(data: EquilibrationData, tractions: TractionSet) -> EquilibratedFlux:
    """
    The discontinuous P1 vector field whose normal trace on every edge of
    every element equals the signed traction. Vertex values solve the 2x2
    systems formed by the two edges meeting at each vertex.
    """
    mesh = data.mesh
    _check_equilibrium(data, tractions)
    g = tractions.element_values()
    normals = mesh.outward_normals
    systems = np.empty((mesh.num_elements, 3, 2, 2))
    rhs = np.empty((mesh.num_elements, 3, 2))
    for a in range(3):
        ending, starting = (a + 1) % 3, (a + 2) % 3
        systems[:, a, 0] = normals[:, ending]
        systems[:, a, 1] = normals[:, starting]
        rhs[:, a, 0] = g[:, ending, 1]
        rhs[:, a, 1] = g[:, starting, 0]
    try:
        vertex_values = np.linalg.solve(systems, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise MeshError(f"Degenerate element in the flux reconstruction: {exc}") from exc
    inner = ElementP1Flux(mesh, vertex_values - data.offset[:, None, :], data.problem)
    q_hat = EquilibratedFlux(data, inner, "analytic", tractions, quadrature_degree=2)
    if not q_hat.admissible:
        logger.warning(
            f"Analytic flux misses equilibrium: max divergence defect {q_hat.divergence_defect.max():.3e}"
        )
    return q_hat


def _local_neumann_solve(data: EquilibrationData, tractions: TractionSet, enrichment: int,
                         subtract_flux: bool) -> Tuple[np.ndarray, object, np.ndarray]:
    """
    Batched solve of int_K A grad w . grad v = int_K f v + int_dK g_K v
    (minus int_K q_h . grad v when subtract_flux) over degree 1 + enrichment
    polynomials, with a zero-mean multiplier. Returns (coefficients, element, stiffness).
    """
    if enrichment < 1:
        raise InputError(f"Enrichment degree must be at least 1, got {enrichment}")
    mesh = data.mesh
    element = lagrange_element(1 + enrichment)
    nt, size = mesh.num_elements, element.size

    bary, weights = triangle_rule(5)
    nq = len(weights)
    elements = np.repeat(np.arange(nt), nq)
    B = np.tile(bary, (nt, 1))
    if data.source_constant:
        f = np.repeat(data.source(np.arange(nt), mesh.centroids), nq).reshape(nt, nq)
    else:
        f = data.source(elements, mesh.points(elements, B)).reshape(nt, nq)
    source_part = mesh.areas[:, None] * np.einsum("kq,q,qn->kn", f, weights, element.values(bary))

    s, edge_weights = edge_rule(3)
    g = tractions.element_values()
    traction_part = np.zeros((nt, size))
    for j in range(3):
        V = element.values(edge_bary(j, s))
        g_points = g[:, j, 0, None] * (1.0 - s) + g[:, j, 1, None] * s
        traction_part += mesh.element_edge_lengths[:, j, None] * np.einsum("kq,q,qn->kn", g_points, edge_weights, V)

    rhs = source_part + traction_part
    scale = np.abs(source_part).sum(axis=1) + np.abs(traction_part).sum(axis=1)
    compatibility = np.abs(rhs.sum(axis=1))
    worst = int(np.argmax(compatibility - ELEMENT_COMPATIBILITY_TOL * scale))
    if compatibility[worst] > ELEMENT_COMPATIBILITY_TOL * max(scale[worst], 1e-300):
        raise EquilibrationError(
            f"Local Neumann problem of element {worst} is incompatible: {compatibility[worst]:.3e}"
        )

    if subtract_flux:
        gbary, gweights = triangle_rule(element.degree - 1)
        G = physical_gradients(element.reference_gradients(gbary), inverse_jacobians(mesh, np.arange(nt)))
        rhs = rhs - mesh.areas[:, None] * np.einsum("q,kqnd,kd->kn", gweights, G, data.q_h)

    S = element_stiffness(mesh, data.coefficient, element)
    means = element_means(mesh, element)
    saddle = np.zeros((nt, size + 1, size + 1))
    saddle[:, :size, :size] = S
    saddle[:, :size, size] = means
    saddle[:, size, :size] = means
    extended = np.concatenate([rhs, np.zeros((nt, 1))], axis=1)
    try:
        solution = np.linalg.solve(saddle, extended[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise EquilibrationError(f"Singular local Neumann problem: {exc}") from exc
    return solution[:, :size], element, S


def element_flux_fe(data: EquilibrationData, tractions: TractionSet, enrichment: int = 3) -> EquilibratedFlux:
    """q_hat = A grad w_K from the local Neumann problems driven by the tractions"""
    coefficients, element, _ = _local_neumann_solve(data, tractions, enrichment, subtract_flux=False)
    inner = ElementPolynomialFlux(data.mesh, element, coefficients, data.coefficient, data.offset, data.problem)
    q_hat = EquilibratedFlux(data, inner, "fe", tractions, quadrature_degree=2 * (element.degree - 1))
    if not q_hat.admissible:
        logger.warning(
            f"FE flux (degree {element.degree}) defects: divergence {q_hat.divergence_defect.max():.3e}, "
            f"trace {q_hat.trace_mismatch.max():.3e}"
        )
    return q_hat


def equilibrate(data: EquilibrationData, backend: str = "analytic", enrichment: int = 3,
                tractions: Optional[TractionSet] = None) -> EquilibratedFlux:
    if backend not in BACKENDS:
        raise InputError(f"Unknown flux backend '{backend}', expected one of {', '.join(BACKENDS)}")
    tractions = tractions or build_tractions(data)
    if backend == "analytic":
        return element_flux_analytic(data, tractions)
    return element_flux_fe(data, tractions, enrichment)


def equilibrate_solution(u_h: FeFunction, backend: Optional[str] = None, enrichment: int = 3) -> EquilibratedFlux:
    """Equilibrated flux of a primal solution; analytic backend when f is piecewise constant"""
    data = EquilibrationData.from_solution(u_h)
    if backend is None:
        backend = "analytic" if data.source_constant else "fe"
    return equilibrate(data, backend, enrichment)


# ------------------------------------------------------------ error measures

def _comparable_flux(u_h: FeFunction, q_hat: EquilibratedFlux):
    if q_hat.mesh is not u_h.mesh:
        raise MeshError("Equilibrated flux and solution must live on the same mesh")
    return flux(u_h)


def cre(u_h: FeFunction, q_hat: EquilibratedFlux, per_element: bool = False):
    """E_CRE with E_CRE^2 = |||q_hat - A grad u_h|||_q^2 / 2"""
    q_h = _comparable_flux(u_h, q_hat)
    squared = flux_norm(q_hat - q_h, u_h.problem, degree=q_hat.quadrature_degree, per_element=True)
    if per_element:
        return 0.5 * squared
    return float(np.sqrt(max(0.5 * squared.sum(), 0.0)))


def cre_upper_bound(u_h: FeFunction, q_hat: EquilibratedFlux) -> EstimateReport:
    """eta = sqrt(2) E_CRE = |||q_hat - q_h|||_q, element by element"""
    squared = 2.0 * cre(u_h, q_hat, per_element=True)
    caveats = q_hat.caveats()
    report = EstimateReport.from_contributions(
        "cre",
        squared,
        BoundKind.GUARANTEED_UPPER,
        backend=q_hat.backend,
        caveats=caveats,
        extras={
            "max_divergence_defect": float(q_hat.divergence_defect.max(initial=0.0)),
            "max_trace_mismatch": float(q_hat.trace_mismatch.max(initial=0.0)),
            "max_equilibrium_residual": float(q_hat.equilibrium_residual.max(initial=0.0)),
            "neumann_projection_defect": q_hat.neumann_defect,
        },
    )
    logger.info(f"CRE upper bound ({q_hat.backend}): {report.value:.6e}")
    if caveats:
        logger.warning(f"CRE bound carries caveats: {', '.join(caveats)}")
    return report


def _exact_flux_field(u_h: FeFunction, problem: Optional[DiffusionProblem]) -> FunctionField:
    problem = problem or _require_problem(u_h)
    if not problem.has_exact_solution:
        raise InputError(f"Problem '{problem.name}' has no exact solution")
    return FunctionField(u_h.mesh, problem.exact_flux, problem)


def prager_synge_gap(u_h: FeFunction, q_hat: EquilibratedFlux, problem: Optional[DiffusionProblem] = None,
                     exact_flux: Optional[VectorField] = None) -> float:
    """
    |2 E_CRE^2 - |||q - q_h|||^2 - |||q - q_hat|||^2| with q the exact flux;
    the larger of this and the hypercircle gap is returned
    """
    q = exact_flux or _exact_flux_field(u_h, problem)
    q_h = _comparable_flux(u_h, q_hat)

    def norm(field_: VectorField) -> float:
        return float(flux_norm(field_, u_h.problem, degree=10, per_element=True).sum())

    twice_cre = norm(q_hat - q_h)
    error = norm(q - q_h)
    flux_error = norm(q - q_hat)
    gap = abs(twice_cre - error - flux_error)
    return max(gap, hypercircle_gap(u_h, q_hat, exact_flux=q))


def hypercircle_gap(u_h: FeFunction, q_hat: EquilibratedFlux, problem: Optional[DiffusionProblem] = None,
                    exact_flux: Optional[VectorField] = None) -> float:
    """|E_CRE^2 - 2 |||q - (q_hat + q_h)/2|||^2|"""
    q = exact_flux or _exact_flux_field(u_h, problem)
    q_h = _comparable_flux(u_h, q_hat)
    cre_squared = 0.5 * float(flux_norm(q_hat - q_h, u_h.problem, degree=10, per_element=True).sum())
    middle = float(flux_norm(q - 0.5 * (q_hat + q_h), u_h.problem, degree=10, per_element=True).sum())
    return abs(cre_squared - 2.0 * middle)


def equilibrated_element_residual(u_h: FeFunction, tractions: TractionSet, enrichment: int = 3,
                                  data: Optional[EquilibrationData] = None) -> EstimateReport:
    """
    eta_K^2 = B_K(e_K, e_K) with e_K solving the local Neumann problem with
    load f + div q_h and the tractions as boundary data. Cross-checked
    against sqrt(2) E_CRE of the FE flux built from the same tractions.
    """
    data = data or EquilibrationData.from_solution(u_h)
    coefficients, element, S = _local_neumann_solve(data, tractions, enrichment, subtract_flux=True)
    squared = np.maximum(np.einsum("kn,knm,km->k", coefficients, S, coefficients), 0.0)

    q_hat = element_flux_fe(data, tractions, enrichment)
    reference = np.sqrt(2.0) * cre(u_h, q_hat)
    value = float(np.sqrt(squared.sum()))
    if abs(value - reference) > CROSS_CHECK_TOL * max(value, reference, 1e-300):
        raise ContractViolation(
            f"Element residual estimate {value!r} differs from the FE-flux CRE bound {reference!r}"
        )
    report = EstimateReport.from_contributions(
        "element_residual",
        squared,
        BoundKind.GUARANTEED_UPPER,
        backend="fe",
        caveats=q_hat.caveats(),
        constants={"enrichment": float(enrichment)},
        extras={"cre_cross_check": reference},
    )
    logger.info(f"Equilibrated element residual (degree {element.degree}): {report.value:.6e}")
    return report
