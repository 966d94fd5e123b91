"""
Adapt Service - marking, the optimal size map and the solve/estimate/mark/refine loop
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from verifem.config import AdaptConfig
from verifem.errors import InputError, VerifemError
from verifem.services.equilibration import EquilibratedFlux
from verifem.services.estimators import EstimationSession, EstimatorOptions
from verifem.services.fem import DiffusionProblem, FeFunction, FeSpace, exact_energy_error, solve
from verifem.services.goal import GoalAnalysis, QuantityOfInterest, analyze_goal
from verifem.services.mesh import Mesh, refine, uniform_refine
from verifem.services.reports import BoundKind, EstimateReport, StudyRecord

logger = logging.getLogger(__name__)

SPACE_DIMENSION = 2
SIZE_MAP_TOL = 1e-10
ZERO_CLAMP = 1e-6
MIN_FIT_POINTS = 3


def _indicator_array(indicators) -> np.ndarray:
    values = np.abs(np.asarray(indicators, dtype=float).ravel())
    if values.size == 0:
        raise InputError("Cannot mark elements from an empty indicator array")
    if not np.all(np.isfinite(values)):
        raise InputError("Indicators must be finite")
    return values


def mark_max(indicators, lam: float) -> np.ndarray:
    """Elements with |eta_K| >= lam * max |eta_j|, in increasing id order"""
    if not 0.0 <= lam <= 1.0:
        raise InputError(f"lambda out of [0,1]: {lam}")
    values = _indicator_array(indicators)
    return np.nonzero(values >= lam * values.max())[0]


def mark_dorfler(indicators, theta: float) -> np.ndarray:
    """
    Smallest set of largest indicators whose squares reach theta * sum eta_K^2.
    Ties are broken by element id.
    """
    if not 0.0 < theta <= 1.0:
        raise InputError(f"theta out of (0,1]: {theta}")
    values = _indicator_array(indicators)
    squared = values ** 2
    order = np.lexsort((np.arange(values.size), -squared))
    cumulative = np.cumsum(squared[order])
    count = int(np.searchsorted(cumulative, theta * cumulative[-1] * (1.0 - 1e-14))) + 1
    return np.sort(order[:min(count, values.size)])


def size_map(indicators, epsilon0: float, p: int = 1) -> np.ndarray:
    """
    Refinement ratios r_K = h_new / h_K minimising the element count under
    sum r_K^{2p} eta_K^2 = epsilon0^2 for a solution of local regularity p.
    """
    if epsilon0 <= 0.0:
        raise InputError(f"epsilon0 must be positive, got {epsilon0}")
    if p < 1:
        raise InputError(f"Polynomial degree must be at least 1, got {p}")
    eta = _indicator_array(indicators)
    positive = eta[eta > 0.0]
    if positive.size == 0:
        raise InputError("All indicators vanish; the size map is undefined")
    eta = np.where(eta > 0.0, eta, positive.min() * ZERO_CLAMP)

    d = SPACE_DIMENSION
    total = np.sum(eta ** (2.0 * d / (2 * p + d)))
    ratios = epsilon0 ** (1.0 / p) / (eta ** (2.0 / (2 * p + d)) * total ** (1.0 / (2 * p)))

    constraint = float(np.sum(ratios ** (2 * p) * eta ** 2))
    if abs(constraint - epsilon0 ** 2) > SIZE_MAP_TOL * epsilon0 ** 2:
        raise InputError(f"Size map misses its constraint: {constraint!r} vs {epsilon0 ** 2!r}")
    return ratios


@dataclass
class AdaptResult:
    """Per-iteration meshes, solutions, indicators and size maps of one adaptive run"""

    solution: FeFunction
    records: List[StudyRecord]
    meshes: List[Mesh]
    indicators: List[np.ndarray]
    reports: List[List[EstimateReport]] = field(default_factory=list)
    goals: List[GoalAnalysis] = field(default_factory=list)
    solutions: List[FeFunction] = field(default_factory=list)
    size_maps: List[np.ndarray] = field(default_factory=list)
    fluxes: List[Dict[str, EquilibratedFlux]] = field(default_factory=list)


def _reference(u_h: FeFunction, problem: DiffusionProblem, degree: int) -> Optional[float]:
    if not problem.has_exact_solution:
        return None
    return exact_energy_error(u_h, problem, degree)


def _energy_indicators(u_h: FeFunction, config: AdaptConfig, options: EstimatorOptions,
                       reference: Optional[float]):
    session = EstimationSession(u_h, options)
    reports = [r.with_reference(reference) for r in session.run(config.estimator)]
    report = next((r for r in reports if r.bound_kind != BoundKind.GUARANTEED_LOWER), reports[0])
    indicators = report.element_values()
    if indicators.size != u_h.mesh.num_elements:
        raise InputError(f"Estimator '{config.estimator}' has no element contributions to mark with")
    return report.value, indicators, reports, session.fluxes


def _step_size_map(indicators: np.ndarray, epsilon0: float) -> np.ndarray:
    # vanishing indicators leave every element as it is
    if not np.any(np.abs(indicators) > 0.0):
        return np.ones(indicators.size)
    return size_map(indicators, epsilon0)


def adapt_solve(problem: DiffusionProblem, mesh: Mesh, config: AdaptConfig,
                options: Optional[EstimatorOptions] = None, qoi: Optional[QuantityOfInterest] = None,
                goal_methods=("cre",), record_timings: bool = False, quadrature_degree: int = 10) -> AdaptResult:
    """
    Iterate solve -> estimate -> mark -> refine until the estimate drops to
    epsilon0 or max_iterations is reached. In goal mode the estimate is the
    half-width of the CRE goal interval and the marking uses the absolute
    local goal indicators.
    """
    options = options or EstimatorOptions()
    if config.mode == "goal":
        if qoi is None:
            raise InputError("Goal-oriented adaptivity needs a quantity of interest")
        goal_methods = tuple(dict.fromkeys(("cre",) + tuple(goal_methods)))

    records: List[StudyRecord] = []
    meshes: List[Mesh] = []
    all_indicators: List[np.ndarray] = []
    all_reports: List[List[EstimateReport]] = []
    goals: List[GoalAnalysis] = []
    solutions: List[FeFunction] = []
    size_maps: List[np.ndarray] = []
    fluxes: List[Dict[str, EquilibratedFlux]] = []
    u_h = None

    for iteration in range(config.max_iterations):
        start = time.perf_counter()
        try:
            u_h = solve(problem, FeSpace(mesh))
            reference = _reference(u_h, problem, quadrature_degree)
            if config.mode == "energy":
                eta, indicators, reports, step_fluxes = _energy_indicators(u_h, config, options, reference)
                all_reports.append(reports)
            else:
                analysis = analyze_goal(u_h, qoi, goal_methods, options.fe_enrichment)
                goals.append(analysis)
                eta = analysis.bounds["cre"].half_width
                indicators = np.abs(analysis.indicators)
                step_fluxes = {analysis.primal_backend: analysis.primal_flux}
            ratios = _step_size_map(indicators, config.epsilon0)
        except VerifemError as exc:
            logger.error(f"Adaptive iteration {iteration} failed: {exc.message}")
            exc.message = f"iteration {iteration}: {exc.message}"
            exc.args = (exc.message,)
            raise

        seconds = time.perf_counter() - start if record_timings else None
        effectivity = eta / reference if reference else None
        records.append(StudyRecord(iteration=iteration, N=mesh.num_vertices, h=mesh.h, eta=eta,
                                   ref_error=reference if config.mode == "energy" else None,
                                   i_eff=effectivity if config.mode == "energy" else None, seconds=seconds))
        meshes.append(mesh)
        all_indicators.append(indicators)
        solutions.append(u_h)
        size_maps.append(ratios)
        fluxes.append(dict(step_fluxes))
        logger.info(f"Adaptive iteration {iteration}: N={mesh.num_vertices} eta={eta:.6e}")

        if eta <= config.epsilon0:
            logger.info(f"Tolerance {config.epsilon0:g} reached after {iteration + 1} iterations")
            break
        if iteration == config.max_iterations - 1:
            break
        if config.marking == "max":
            marked = mark_max(indicators, config.lambda_)
        else:
            marked = mark_dorfler(indicators, config.theta)
        mesh = refine(mesh, marked)

    return AdaptResult(u_h, records, meshes, all_indicators, all_reports, goals, solutions, size_maps, fluxes)


def fit_slope(x, y, skip: int = 0) -> float:
    """Least-squares slope of log y against log x over the points after `skip`"""
    x = np.asarray(x, dtype=float)[skip:]
    y = np.asarray(y, dtype=float)[skip:]
    if x.size < MIN_FIT_POINTS:
        raise InputError(f"A rate fit needs at least {MIN_FIT_POINTS} points, got {x.size}")
    if np.any(x <= 0.0) or np.any(y <= 0.0):
        raise InputError("Rate fits need positive data")
    slope, _ = np.polyfit(np.log(x), np.log(y), 1)
    return float(slope)


def study_rates(records: List[StudyRecord], skip: int = 0, with_h: bool = True) -> Dict[str, float]:
    """
    Slopes of the error (reference error when known, estimate otherwise)
    against N and, for uniform sequences, against h. On graded meshes h is
    the largest element and says nothing about the rate.
    """
    errors = [r.ref_error if r.ref_error is not None else r.eta for r in records]
    rates = {"slope_N": fit_slope([r.N for r in records], errors, skip)}
    if with_h:
        rates["slope_h"] = fit_slope([r.h for r in records], errors, skip)
    rates["estimate_slope_N"] = fit_slope([r.N for r in records], [r.eta for r in records], skip)
    return rates


def convergence_study(problem: DiffusionProblem, mesh: Mesh, mode: str = "uniform", iterations: int = 4,
                      estimator: str = "cre_analytic", options: Optional[EstimatorOptions] = None,
                      adapt_config: Optional[AdaptConfig] = None, record_timings: bool = False,
                      quadrature_degree: int = 10):
    """
    StudyRecords of a uniform or adaptive refinement sequence and the fitted
    rates. Adaptive runs ignore the tolerance and take `iterations` steps.
    """
    if iterations < MIN_FIT_POINTS:
        raise InputError(f"A convergence study needs at least {MIN_FIT_POINTS} iterations, got {iterations}")
    options = options or EstimatorOptions()
    if mode == "adaptive":
        base = adapt_config or AdaptConfig(estimator=estimator)
        config = base.model_copy(update={"max_iterations": iterations, "epsilon0": 1e-300, "mode": "energy"})
        result = adapt_solve(problem, mesh, config, options, record_timings=record_timings,
                             quadrature_degree=quadrature_degree)
        records = result.records
    elif mode == "uniform":
        records = []
        for iteration in range(iterations):
            start = time.perf_counter()
            u_h = solve(problem, FeSpace(mesh))
            reference = _reference(u_h, problem, quadrature_degree)
            eta, _, _, _ = _energy_indicators(u_h, AdaptConfig(estimator=estimator), options, reference)
            seconds = time.perf_counter() - start if record_timings else None
            records.append(StudyRecord(iteration=iteration, N=mesh.num_vertices, h=mesh.h, eta=eta,
                                       ref_error=reference, i_eff=eta / reference if reference else None,
                                       seconds=seconds))
            logger.info(f"Uniform level {iteration}: N={mesh.num_vertices} eta={eta:.6e}")
            if iteration < iterations - 1:
                mesh = uniform_refine(mesh)
    else:
        raise InputError(f"Unknown study mode '{mode}', expected 'uniform' or 'adaptive'")
    rates = study_rates(records, with_h=mode == "uniform")
    logger.info(f"Study ({mode}) rates: {rates}")
    return records, rates
