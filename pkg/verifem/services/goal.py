"""
Goal Service - quantities of interest, the adjoint problem, DWR and the
guaranteed goal-oriented bounds
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from verifem.errors import InputError, MeshError
from verifem.services.equilibration import (
    EquilibratedFlux,
    EquilibrationData,
    cre,
    cre_upper_bound,
    equilibrate,
    equilibrate_solution,
)
from verifem.services.fem import (
    DiffusionProblem,
    FeFunction,
    FeSpace,
    assemble_stiffness,
    edge_integrals,
    element_integrals,
    energy_norm,
    flux,
    flux_inner,
    prolong,
    residual_eval,
    solve,
    solve_system,
)
from verifem.services.mesh import Mesh, uniform_refine
from verifem.services.quadrature import edge_rule
from verifem.services.reports import BoundKind, EstimateReport, GoalBounds

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle [x0, x1] x [y0, y1]"""

    x0: float
    x1: float
    y0: float
    y1: float

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise InputError(f"Empty region {self}")

    def contains(self, points: np.ndarray) -> np.ndarray:
        x, y = points[:, 0], points[:, 1]
        return (x >= self.x0) & (x <= self.x1) & (y >= self.y0) & (y <= self.y1)

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)


class QuantityOfInterest:
    """
    Linear functional
    Q(v) = int (f_Q v + q_Q . grad v) + int_{Gamma_N} g_Q v + int A grad u_Q . grad v

    f_Q and q_Q are piecewise constant on the mesh they are defined on and
    keep their values on every refinement of it. u_Q is a P1 lifting that
    vanishes on the neumann vertices.
    """

    def __init__(self, mesh: Mesh, name: str = "qoi", source: Optional[np.ndarray] = None,
                 flux: Optional[np.ndarray] = None,
                 neumann: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None,
                 lifting: Optional[FeFunction] = None):
        if source is None and flux is None and neumann is None and lifting is None:
            raise InputError("A quantity of interest needs at least one extraction field")
        self.mesh = mesh
        self.name = name
        self.source = None if source is None else np.asarray(source, dtype=float).reshape(mesh.num_elements)
        self.flux = None if flux is None else np.asarray(flux, dtype=float).reshape(mesh.num_elements, 2)
        self.neumann = neumann
        self.lifting = lifting
        if lifting is not None:
            neumann_vertices = np.unique(mesh.edges[mesh.edges_labeled("neumann")])
            lifted = prolong(lifting, mesh) if lifting.mesh is not mesh else lifting
            if np.any(lifted.coefficients[neumann_vertices] != 0.0):
                raise InputError("The lifting of a quantity of interest must vanish on the neumann vertices")

    def source_on(self, mesh: Mesh) -> np.ndarray:
        if self.source is None:
            return np.zeros(mesh.num_elements)
        return self.source[mesh.ancestors_on(self.mesh)]

    def flux_on(self, mesh: Mesh) -> np.ndarray:
        if self.flux is None:
            return np.zeros((mesh.num_elements, 2))
        return self.flux[mesh.ancestors_on(self.mesh)]

    def offset_on(self, mesh: Mesh, problem: DiffusionProblem) -> np.ndarray:
        """Piecewise constant q_Q + A grad u_Q, the part of Q acting on grad v"""
        offset = self.flux_on(mesh)
        if self.lifting is not None:
            A = problem.coefficient_on(mesh)
            offset = offset + np.einsum("kij,kj->ki", A, prolong(self.lifting, mesh).gradients())
        return offset

    def load_vector(self, space: FeSpace, problem: Optional[DiffusionProblem] = None) -> np.ndarray:
        """Q(phi_i) for every P1 basis function of the space"""
        mesh = space.mesh
        if not mesh.is_refinement_of(self.mesh):
            raise MeshError(f"Quantity '{self.name}' is not defined on this mesh")
        if self.lifting is not None and problem is None:
            raise InputError("Evaluating a lifting term needs the problem coefficient")
        local = np.repeat((self.source_on(mesh) * mesh.areas / 3.0)[:, None], 3, axis=1)
        if self.flux is not None or self.lifting is not None:
            offset = self.offset_on(mesh, problem) if problem is not None else self.flux_on(mesh)
            local = local + mesh.areas[:, None] * np.einsum("kd,kad->ka", offset, mesh.grad_lambda)
        load = np.bincount(mesh.triangles.ravel(), weights=local.ravel(), minlength=space.dof)

        edges = mesh.edges_labeled("neumann")
        if self.neumann is not None and edges.size:
            t, weights = edge_rule(3)
            X = mesh.edge_points(edges, t).reshape(-1, 2)
            normals = np.repeat(mesh.edge_normals[edges], len(t), axis=0)
            g = self.neumann(X, normals).reshape(len(edges), len(t))
            lengths = mesh.edge_lengths[edges]
            load += np.bincount(mesh.edges[edges, 0], weights=lengths * (g @ (weights * (1.0 - t))),
                                minlength=space.dof)
            load += np.bincount(mesh.edges[edges, 1], weights=lengths * (g @ (weights * t)), minlength=space.dof)
        return load

    def __call__(self, v: FeFunction) -> float:
        return qoi_eval(self, v)

    def __repr__(self) -> str:
        return f"QuantityOfInterest('{self.name}')"


def _region_elements(mesh: Mesh, region: Box) -> np.ndarray:
    elements = np.nonzero(region.contains(mesh.centroids))[0]
    if elements.size == 0:
        raise InputError(f"Region {region} contains no element centroid")
    return elements


def subdomain_average(mesh: Mesh, region: Box) -> QuantityOfInterest:
    """Q(v) = mean of v over the elements whose centroid lies in the region"""
    elements = _region_elements(mesh, region)
    measure = float(mesh.areas[elements].sum())
    source = np.zeros(mesh.num_elements)
    source[elements] = 1.0 / measure
    logger.info(f"Subdomain average over {elements.size} elements (measure {measure:.6g})")
    return QuantityOfInterest(mesh, "subdomain_average", source=source)


def flux_average(mesh: Mesh, region: Box, direction: Tuple[float, float],
                 problem: Optional[DiffusionProblem] = None) -> QuantityOfInterest:
    """Q(v) = mean over the region of A grad v . d"""
    d = np.asarray(direction, dtype=float)
    if d.shape != (2,) or not np.any(d):
        raise InputError(f"Flux direction must be a nonzero 2-vector, got {direction}")
    elements = _region_elements(mesh, region)
    measure = float(mesh.areas[elements].sum())
    A = problem.coefficient_on(mesh) if problem is not None else np.broadcast_to(np.eye(2), (mesh.num_elements, 2, 2))
    vectors = np.zeros((mesh.num_elements, 2))
    vectors[elements] = np.einsum("kij,j->ki", A[elements], d) / measure
    return QuantityOfInterest(mesh, "flux_average", flux=vectors)


def qoi_eval(Q: QuantityOfInterest, v: FeFunction) -> float:
    return float(Q.load_vector(v.space, v.problem) @ v.coefficients)


def qoi_reference(Q: QuantityOfInterest, problem: DiffusionProblem, levels: int = 2,
                  mesh: Optional[Mesh] = None) -> float:
    """
    Q(u) from the exact solution when the problem has one; otherwise Q of
    the solution on `levels` uniform refinements of the mesh
    """
    mesh = mesh or Q.mesh
    exact_value_needed = Q.source is not None or Q.neumann is not None
    exact_available = problem.exact_gradient is not None and (
        problem.exact_value is not None or not exact_value_needed
    )
    if exact_available:
        total = 0.0
        if Q.source is not None:
            source = Q.source_on(mesh)
            total += float(element_integrals(
                mesh, lambda el, B, X: source[el] * problem.exact_value(X), 10).sum())
        if Q.flux is not None or Q.lifting is not None:
            offset = Q.offset_on(mesh, problem)
            total += float(element_integrals(
                mesh, lambda el, B, X: np.einsum("md,md->m", offset[el], problem.exact_gradient(X)), 10).sum())
        if Q.neumann is not None:
            edges = mesh.edges_labeled("neumann")
            if edges.size:
                total += float(edge_integrals(
                    mesh, edges,
                    lambda e, t, X: Q.neumann(X, mesh.edge_normals[e]) * problem.exact_value(X), 5).sum())
        return total
    fine = mesh
    for _ in range(levels):
        fine = uniform_refine(fine)
    reference = solve(problem, FeSpace(fine))
    value = qoi_eval(Q, reference)
    logger.info(f"Reference value of {Q.name} on {fine.num_vertices} vertices: {value:.10g}")
    return value


# ------------------------------------------------------------------ adjoint

def solve_adjoint(Q: QuantityOfInterest, space: FeSpace, problem: DiffusionProblem) -> FeFunction:
    """B(v, u~_h) = Q(v) for all v in the space; B is symmetric"""
    matrix = assemble_stiffness(space, problem.coefficient_on(space.mesh))
    coefficients, info = solve_system(space, matrix, Q.load_vector(space, problem))
    logger.info(f"Solved adjoint of {Q.name} on {space.dof} dofs: {info['iterations']} CG iterations")
    return FeFunction(space, coefficients, problem, functional=Q, solver_info=info)


def adjoint_data(adjoint: FeFunction) -> EquilibrationData:
    """Equilibration data of an adjoint solution; the offset carries q_Q + A grad u_Q"""
    Q = adjoint.functional
    if not isinstance(Q, QuantityOfInterest):
        raise InputError("Adjoint data needs a solution whose functional is a quantity of interest")
    mesh = adjoint.mesh
    problem = adjoint.problem
    offset = -Q.offset_on(mesh, problem)
    source = Q.source_on(mesh)
    return EquilibrationData(
        mesh,
        problem,
        flux(adjoint).vectors + offset,
        source=lambda elements, points: source[elements],
        source_constant=True,
        neumann=Q.neumann,
        offset=offset,
    )


def dwr_estimate(Q: QuantityOfInterest, u_h: FeFunction, adjoint_plus: FeFunction) -> float:
    """Q(u) - Q(u_h) ~ R(u~_+), signed"""
    if not adjoint_plus.mesh.is_refinement_of(u_h.mesh):
        raise MeshError("The enriched adjoint must live on a refinement of the mesh of u_h")
    if adjoint_plus.mesh is u_h.mesh:
        logger.warning("DWR with the adjoint in the primal space vanishes by Galerkin orthogonality")
    value = residual_eval(u_h, adjoint_plus)
    logger.info(f"DWR estimate of {Q.name}: {value:.6e}")
    return value


# ------------------------------------------------------------------- bounds

def cs_goal_bound(value: float, primal: EstimateReport, adjoint: EstimateReport) -> GoalBounds:
    """Q(u_h) +- eta eta~ from two guaranteed energy bounds"""
    for report in (primal, adjoint):
        if report.bound_kind != BoundKind.GUARANTEED_UPPER:
            raise InputError(f"Estimate '{report.estimator}' is not a guaranteed upper bound")
    half_width = primal.value * adjoint.value
    caveats = sorted(set(primal.caveats) | set(adjoint.caveats))
    return GoalBounds(
        method="cauchy_schwarz",
        lower=value - half_width,
        upper=value + half_width,
        corrected=value,
        half_width=half_width,
        guaranteed=not caveats,
        caveats=caveats,
        extras={"primal": primal.value, "adjoint": adjoint.value},
    )


def _difference(u_h: FeFunction, q_hat: EquilibratedFlux):
    if q_hat.mesh is not u_h.mesh:
        raise MeshError("Equilibrated flux and solution must live on the same mesh")
    return q_hat - flux(u_h)


def _inner_degree(*fluxes: EquilibratedFlux) -> int:
    return max(2, sum(f.quadrature_degree for f in fluxes) // 2)


def optimal_scaling(u_h: FeFunction, q_hat: EquilibratedFlux, adjoint: FeFunction,
                    adjoint_hat: EquilibratedFlux) -> float:
    """s minimizing the parallelogram width: sqrt(E~ / E)"""
    primal_cre = cre(u_h, q_hat)
    adjoint_cre = cre(adjoint, adjoint_hat)
    if primal_cre == 0.0 or adjoint_cre == 0.0:
        return 1.0
    return float(np.sqrt(adjoint_cre / primal_cre))


def chi_bounds(u_h: FeFunction, q_hat: EquilibratedFlux, adjoint: FeFunction, adjoint_hat: EquilibratedFlux,
               s: float, primal_plus: Optional[FeFunction] = None,
               adjoint_plus: Optional[FeFunction] = None) -> Tuple[Tuple[float, float], Tuple[float, float]]:
    """
    ((lower, upper) of chi+, (lower, upper) of chi-) with
    chi_pm = |||s e pm s^{-1} e~|||^2.

    Upper values come from the combined equilibrated fluxes. Lower values
    are 2 R_pm(v) - |||v|||^2 for v built from the enriched solutions
    (0 without them).
    """
    if s <= 0.0:
        raise InputError(f"Scaling s must be positive, got {s}")
    primal_gap = _difference(u_h, q_hat)
    adjoint_gap = _difference(adjoint, adjoint_hat)
    degree = _inner_degree(q_hat, adjoint_hat)
    bounds = []
    for sign in (1.0, -1.0):
        combined = s * primal_gap + (sign / s) * adjoint_gap
        upper = float(flux_inner(combined, combined, u_h.problem, degree).sum())
        lower = 0.0
        if primal_plus is not None and adjoint_plus is not None:
            fine = primal_plus.mesh
            if adjoint_plus.mesh is not fine or not fine.is_refinement_of(u_h.mesh):
                raise MeshError("Enriched solutions must share a refinement of the mesh of u_h")
            v = (primal_plus - prolong(u_h, fine)) * s + (adjoint_plus - prolong(adjoint, fine)) * (sign / s)
            v.problem = u_h.problem
            functional = s * residual_eval(u_h, v) + (sign / s) * residual_eval(adjoint, v)
            lower = max(0.0, 2.0 * functional - energy_norm(v) ** 2)
        bounds.append((lower, max(upper, lower)))
    return bounds[0], bounds[1]


def parallelogram_bound(value: float, chi_plus: Tuple[float, float], chi_minus: Tuple[float, float],
                        s: float = 1.0, caveats: Optional[list] = None) -> GoalBounds:
    """Q(u) - Q(u_h) in [(chi+_low - chi-_upp)/4, (chi+_upp - chi-_low)/4]"""
    if s <= 0.0:
        raise InputError(f"Scaling s must be positive, got {s}")
    low = 0.25 * (chi_plus[0] - chi_minus[1])
    high = 0.25 * (chi_plus[1] - chi_minus[0])
    correction = 0.5 * (low + high)
    caveats = sorted(set(caveats or []))
    return GoalBounds(
        method="parallelogram",
        lower=value + low,
        upper=value + high,
        corrected=value + correction,
        correction=correction,
        half_width=0.5 * (high - low),
        guaranteed=not caveats,
        caveats=caveats,
        extras={"s": s, "chi_plus_lower": chi_plus[0], "chi_plus_upper": chi_plus[1],
                "chi_minus_lower": chi_minus[0], "chi_minus_upper": chi_minus[1]},
    )


def cre_goal_bound(value: float, u_h: FeFunction, q_hat: EquilibratedFlux, adjoint: FeFunction,
                   adjoint_hat: EquilibratedFlux) -> GoalBounds:
    """Q(u_h) + C_h +- E E~ with C_h = 1/2 int A^{-1} (q_hat - q_h) . (q~_hat - q~_h)"""
    elementwise = 0.5 * flux_inner(
        _difference(u_h, q_hat), _difference(adjoint, adjoint_hat), u_h.problem, _inner_degree(q_hat, adjoint_hat)
    )
    correction = float(elementwise.sum())
    half_width = cre(u_h, q_hat) * cre(adjoint, adjoint_hat)
    caveats = sorted(set(q_hat.caveats()) | set(adjoint_hat.caveats()))
    bounds = GoalBounds(
        method="cre",
        lower=value + correction - half_width,
        upper=value + correction + half_width,
        corrected=value + correction,
        correction=correction,
        half_width=half_width,
        guaranteed=not caveats,
        caveats=caveats,
        extras={"weak_half_width": 2.0 * half_width},
        element_corrections=elementwise.tolist(),
    )
    logger.info(f"CRE goal bound: [{bounds.lower:.10g}, {bounds.upper:.10g}] (C_h = {correction:.3e})")
    return bounds


def enriched_cre_goal_bound(value: float, u_h: FeFunction, q_hat: EquilibratedFlux, adjoint_plus: FeFunction,
                            adjoint_plus_hat: EquilibratedFlux) -> GoalBounds:
    """Q(u_h) + C_+ +- E E~_+ with C_+ = 1/2 int A^{-1} (q_hat - q_h) . (q~_hat_+ + q~_+)"""
    if not adjoint_plus.mesh.is_refinement_of(u_h.mesh):
        raise MeshError("The enriched adjoint must live on a refinement of the mesh of u_h")
    elementwise = 0.5 * flux_inner(
        _difference(u_h, q_hat), adjoint_plus_hat + flux(adjoint_plus), u_h.problem,
        _inner_degree(q_hat, adjoint_plus_hat)
    )
    correction = float(elementwise.sum())
    half_width = cre(u_h, q_hat) * cre(adjoint_plus, adjoint_plus_hat)
    caveats = sorted(set(q_hat.caveats()) | set(adjoint_plus_hat.caveats()))
    bounds = GoalBounds(
        method="enriched_cre",
        lower=value + correction - half_width,
        upper=value + correction + half_width,
        corrected=value + correction,
        correction=correction,
        half_width=half_width,
        guaranteed=not caveats,
        caveats=caveats,
    )
    logger.info(f"Enriched CRE goal bound: [{bounds.lower:.10g}, {bounds.upper:.10g}]")
    return bounds


def local_goal_indicators(element_corrections: np.ndarray, primal_squared: np.ndarray,
                          adjoint_squared: np.ndarray) -> np.ndarray:
    """
    C_K + theta eta_K with eta_K^2 = E^2 E~_K^2 / 2 + E~^2 E_K^2 / 2, where
    E_K^2 and E~_K^2 are the element CRE contributions and theta is the sign
    of C_h (ties go to +1)
    """
    corrections = np.asarray(element_corrections, dtype=float)
    primal_squared = np.asarray(primal_squared, dtype=float)
    adjoint_squared = np.asarray(adjoint_squared, dtype=float)
    if not (corrections.shape == primal_squared.shape == adjoint_squared.shape):
        raise InputError("Element records of the goal indicators differ in length")
    E2, Et2 = primal_squared.sum(), adjoint_squared.sum()
    eta = np.sqrt(np.maximum(0.5 * E2 * adjoint_squared + 0.5 * Et2 * primal_squared, 0.0))
    theta = 1.0 if corrections.sum() >= 0.0 else -1.0
    return corrections + theta * eta


# ----------------------------------------------------------------- pipeline

GOAL_METHODS = ("cre", "enriched_cre", "cs", "parallelogram", "dwr")


@dataclass
class GoalAnalysis:
    """Everything one goal-oriented run produces"""

    value: float
    bounds: Dict[str, GoalBounds]
    dwr: Optional[float]
    indicators: np.ndarray
    primal_backend: str
    reference: Optional[float] = None
    primal_flux: Optional[EquilibratedFlux] = None


def analyze_goal(u_h: FeFunction, Q: QuantityOfInterest, methods: Sequence[str] = GOAL_METHODS,
                 fe_enrichment: int = 3, scaling: Optional[float] = None,
                 reference: Optional[float] = None) -> GoalAnalysis:
    """
    Primal and adjoint equilibration, the requested bounds and the signed
    local indicators C_K + theta eta_K. The adjoint load is piecewise
    constant, so its flux always uses the analytic backend.
    """
    unknown = [m for m in methods if m not in GOAL_METHODS]
    if unknown:
        raise InputError(f"Unknown goal methods {unknown}, expected a subset of {', '.join(GOAL_METHODS)}")
    problem = u_h.problem
    mesh = u_h.mesh
    value = qoi_eval(Q, u_h)
    primal_hat = equilibrate_solution(u_h, None, fe_enrichment)
    adjoint = solve_adjoint(Q, FeSpace(mesh), problem)
    adjoint_hat = equilibrate(adjoint_data(adjoint), "analytic")

    bounds: Dict[str, GoalBounds] = {}
    plain = cre_goal_bound(value, u_h, primal_hat, adjoint, adjoint_hat)
    if "cre" in methods:
        bounds["cre"] = plain
    if "cs" in methods:
        bounds["cs"] = cs_goal_bound(value, cre_upper_bound(u_h, primal_hat), cre_upper_bound(adjoint, adjoint_hat))

    dwr = None
    if any(m in methods for m in ("enriched_cre", "dwr", "parallelogram")):
        fine = uniform_refine(mesh)
        adjoint_plus = solve_adjoint(Q, FeSpace(fine), problem)
        if "dwr" in methods:
            dwr = dwr_estimate(Q, u_h, adjoint_plus)
        if "enriched_cre" in methods:
            adjoint_plus_hat = equilibrate(adjoint_data(adjoint_plus), "analytic")
            bounds["enriched_cre"] = enriched_cre_goal_bound(value, u_h, primal_hat, adjoint_plus, adjoint_plus_hat)
        if "parallelogram" in methods:
            s = scaling or optimal_scaling(u_h, primal_hat, adjoint, adjoint_hat)
            primal_plus = solve(problem, FeSpace(fine))
            chi_plus, chi_minus = chi_bounds(u_h, primal_hat, adjoint, adjoint_hat, s, primal_plus, adjoint_plus)
            caveats = sorted(set(primal_hat.caveats()) | set(adjoint_hat.caveats()))
            bounds["parallelogram"] = parallelogram_bound(value, chi_plus, chi_minus, s, caveats)

    indicators = local_goal_indicators(
        plain.element_corrections, cre(u_h, primal_hat, per_element=True), cre(adjoint, adjoint_hat, per_element=True)
    )
    return GoalAnalysis(value, bounds, dwr, indicators, primal_hat.backend, reference, primal_hat)
