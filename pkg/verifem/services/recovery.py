"""
Recovery Service - Richardson extrapolation, nodal averaging, SPR and the
recovery-based bounds
"""

import logging
from typing import List, Optional

import numpy as np

from verifem.errors import DegenerateEstimateError, InputError, MeshError
from verifem.services.fem import (
    DiffusionProblem,
    FeFunction,
    edge_integrals,
    element_integrals,
    energy_norm,
    exact_energy_error,
    flux_norm,
    l2_norm,
    prolong,
    residual_eval,
)
from verifem.services.fields import ElementFlux, RecoveredFlux
from verifem.services.reports import BoundKind, EstimateReport
from verifem.services.workers import parallel_map

logger = logging.getLogger(__name__)

SINGULAR_RATIO = 1e-12
NEUMANN_MISMATCH_TOL = 1e-10


def zz_average(q_h: ElementFlux) -> RecoveredFlux:
    """Node value = arithmetic mean of q_h over the vertex patch"""
    mesh = q_h.mesh
    tri = mesh.triangles.ravel()
    counts = np.bincount(tri, minlength=mesh.num_vertices).astype(float)
    nodal = np.column_stack([
        np.bincount(tri, weights=np.repeat(q_h.vectors[:, d], 3), minlength=mesh.num_vertices) for d in range(2)
    ])
    return RecoveredFlux(mesh, nodal / counts[:, None], q_h.problem, method="zz")


def _patch_fit(mesh, vertex: int, values: np.ndarray):
    """
    Affine least-squares fit of centroid values over the patch of a vertex.
    Returns (patch nodes, fitted node values, full_rank flag).
    """
    patch = np.asarray(mesh.vertex_patch(vertex))
    nodes = np.unique(mesh.triangles[patch])
    centroids = mesh.centroids[patch]
    origin = mesh.vertices[vertex]
    scale = np.max(np.linalg.norm(centroids - origin, axis=1))
    samples = values[patch]
    if len(patch) >= 3:
        P = np.column_stack([np.ones(len(patch)), (centroids - origin) / scale])
        normal = P.T @ P
        eig = np.linalg.eigvalsh(normal)
        if eig[0] > SINGULAR_RATIO * eig[-1]:
            coefficients = np.linalg.solve(normal, P.T @ samples)
            local = (mesh.vertices[nodes] - origin) / scale
            fitted = np.column_stack([np.ones(len(nodes)), local]) @ coefficients
            return nodes, fitted, True
    mean = samples.mean(axis=0)
    return nodes, np.repeat(mean[None, :], len(nodes), axis=0), False


def spr_recover(q_h: ElementFlux) -> RecoveredFlux:
    """
    Superconvergent patch recovery with centroid sampling.

    Each node value is the average of the affine patch fits evaluated at
    that node. Patches with fewer than three centroids or a singular normal
    matrix fall back to their mean. These means do not join the average;
    they only set nodes that no full-rank patch covers.
    """
    mesh = q_h.mesh
    fits = parallel_map(lambda i: _patch_fit(mesh, i, q_h.vectors), range(mesh.num_vertices))

    nv = mesh.num_vertices
    total = np.zeros((nv, 2))
    count = np.zeros(nv)
    fallback_total = np.zeros((nv, 2))
    fallback_count = np.zeros(nv)
    for nodes, fitted, full_rank in fits:
        if full_rank:
            np.add.at(total, nodes, fitted)
            np.add.at(count, nodes, 1.0)
        else:
            np.add.at(fallback_total, nodes, fitted)
            np.add.at(fallback_count, nodes, 1.0)

    uncovered = count == 0
    nodal = np.empty((nv, 2))
    nodal[~uncovered] = total[~uncovered] / count[~uncovered, None]
    nodal[uncovered] = fallback_total[uncovered] / fallback_count[uncovered, None]
    degenerate = sum(1 for _, _, full_rank in fits if not full_rank)
    if degenerate:
        logger.info(f"SPR: {degenerate} of {nv} patches used the mean fallback")
    return RecoveredFlux(mesh, nodal, q_h.problem, method="spr")


def recovery_estimate(q_star: RecoveredFlux, q_h: ElementFlux, estimator: Optional[str] = None) -> EstimateReport:
    """eta = |||q* - q_h|||_q, an indicator"""
    if q_star.mesh is not q_h.mesh:
        raise MeshError("Recovered and FE fluxes must live on the same mesh")
    squared = flux_norm(q_star - q_h, q_h.problem, per_element=True)
    name = estimator or (q_star.method or "recovery")
    report = EstimateReport.from_contributions(name, squared, BoundKind.INDICATOR)
    logger.info(f"Recovery estimate ({name}): {report.value:.6e}")
    return report


def richardson_prefactor(alpha: float) -> float:
    if alpha <= 0.0:
        raise InputError(f"Assumed rate alpha must be positive, got {alpha}")
    return (1.0 - 2.0 ** (-2.0 * alpha)) ** -0.5


def _nested_difference(u_h: FeFunction, u_hstar: FeFunction) -> FeFunction:
    if u_hstar.mesh.parent_mesh is not u_h.mesh or u_hstar.mesh.refinement != "uniform":
        raise MeshError("u_hstar must live on the uniform refinement of the mesh of u_h")
    return u_hstar - prolong(u_h, u_hstar.mesh)


def richardson_estimate(u_h: FeFunction, u_hstar: FeFunction, alpha: float = 1.0) -> float:
    """[1 - 2^{-2 alpha}]^{-1/2} |||u_hstar - u_h|||"""
    return richardson_prefactor(alpha) * energy_norm(_nested_difference(u_h, u_hstar))


def richardson_report(u_h: FeFunction, u_hstar: FeFunction, alpha: float = 1.0) -> EstimateReport:
    """Richardson estimate with per-element contributions gathered on the coarse elements"""
    difference = _nested_difference(u_h, u_hstar)
    fine_squared = energy_norm(difference, per_element=True)
    squared = np.bincount(difference.mesh.parent, weights=fine_squared, minlength=u_h.mesh.num_elements)
    report = EstimateReport.from_contributions(
        "richardson", richardson_prefactor(alpha) ** 2 * squared, BoundKind.INDICATOR, constants={"alpha": alpha}
    )
    logger.info(f"Richardson estimate (alpha={alpha}): {report.value:.6e}")
    return report


def aubin_nitsche_constant(u_h: FeFunction, u_hstar: FeFunction, alpha: float = 1.0) -> float:
    """
    C = sqrt(||d||_0^2 (1 - 2^{-2a}) / (h^2 |||d|||^2 (1 - 2^{-2a-2})))
    with d = u_hstar - u_h and h the coarse mesh size
    """
    if alpha <= 0.0:
        raise InputError(f"Assumed rate alpha must be positive, got {alpha}")
    difference = _nested_difference(u_h, u_hstar)
    energy = energy_norm(difference)
    if energy == 0.0:
        raise DegenerateEstimateError("u_hstar equals the prolonged u_h; the constant is undefined")
    l2 = l2_norm(difference)
    h = u_h.mesh.h
    ratio = (1.0 - 2.0 ** (-2.0 * alpha)) / (1.0 - 2.0 ** (-2.0 * alpha - 2.0))
    return float(np.sqrt(l2 ** 2 * ratio / (h ** 2 * energy ** 2)))


def neumann_mismatch(q_star: RecoveredFlux, problem: DiffusionProblem) -> float:
    """int over the neumann boundary of (g - q* . n)^2"""
    mesh = q_star.mesh
    edges = mesh.edges_labeled("neumann")
    if edges.size == 0:
        return 0.0
    owner = mesh.edge_elements[edges, 0]

    def integrand(edge_ids, t, points):
        row = np.searchsorted(edges, edge_ids)
        elements = owner[row]
        normals = mesh.edge_normals[edge_ids]
        bary = mesh.barycentric(elements, points)
        trace = np.einsum("md,md->m", q_star.values(elements, bary), normals)
        return (problem.neumann_values(points, normals) - trace) ** 2

    return float(edge_integrals(mesh, edges, integrand).sum())


def recovery_guaranteed_bound(q_star: RecoveredFlux, q_h: ElementFlux, problem: DiffusionProblem,
                              constant: float) -> EstimateReport:
    """eta = |||q* - q_h|||_q + C h ||f + div q*||_0"""
    mesh = q_h.mesh
    first = flux_norm(q_star - q_h, problem)
    divergence = q_star.element_divergence()

    def integrand(elements, bary, points):
        return (problem.source_values(mesh, elements, points) + divergence[elements]) ** 2

    equilibrium = float(np.sqrt(element_integrals(mesh, integrand, 5).sum()))
    mismatch = neumann_mismatch(q_star, problem)
    caveats: List[str] = []
    if mismatch > NEUMANN_MISMATCH_TOL:
        caveats.append("neumann_mismatch")
        logger.warning(f"Recovered flux misses the neumann data: mismatch {mismatch:.3e}")
    value = first + constant * mesh.h * equilibrium
    report = EstimateReport(
        estimator=f"{q_star.method or 'recovery'}_guaranteed",
        value=value,
        bound_kind=BoundKind.GUARANTEED_UPPER,
        caveats=caveats,
        constants={"C": constant, "h": mesh.h},
        extras={"recovery_term": first, "equilibrium_term": equilibrium, "neumann_mismatch": mismatch},
    )
    logger.info(f"Recovery guaranteed bound: {value:.6e} (C={constant:.4f})")
    return report


def energy_lower_bound(w: FeFunction, u_h: FeFunction) -> EstimateReport:
    """eta = sqrt(max(0, -2 J(w - u_h))), J(v) = B(v, v)/2 - R(v)"""
    if not w.mesh.is_refinement_of(u_h.mesh):
        raise MeshError("w must live on a refinement of the mesh of u_h")
    v = w - prolong(u_h, w.mesh)
    v.problem, v.functional = u_h.problem, u_h.functional
    value = 2.0 * residual_eval(u_h, v) - energy_norm(v) ** 2
    report = EstimateReport(
        estimator="energy_lower",
        value=float(np.sqrt(max(value, 0.0))),
        bound_kind=BoundKind.GUARANTEED_LOWER,
        extras={"minus_two_J": value},
    )
    logger.info(f"Energy lower bound: {report.value:.6e}")
    return report


def reference_error(u_h: FeFunction, reference: Optional[FeFunction] = None,
                    problem: Optional[DiffusionProblem] = None) -> float:
    """Exact energy error when the problem knows its solution, else the error against a nested reference"""
    problem = problem or u_h.problem
    if problem is not None and problem.has_exact_solution:
        return exact_energy_error(u_h, problem)
    if reference is None:
        raise InputError("No exact solution and no reference solution available")
    return energy_norm(reference - prolong(u_h, reference.mesh))
