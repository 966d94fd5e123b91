"""
Command runners behind the verifem CLI: solve, estimate, adapt and study
"""

import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from evaluation.metrics import EffectivityMetrics
from verifem.config import GoalConfig, RunConfig
from verifem.errors import ContractViolation, InputError
from verifem.exports.writers import write_report, write_study_csv, write_tractions_csv, write_vtk
from verifem.services.adapt import adapt_solve, convergence_study
from verifem.services.equilibration import EquilibratedFlux
from verifem.services.estimators import EstimationSession, EstimatorOptions, check_bound_ordering
from verifem.services.fem import (
    DiffusionProblem,
    FeFunction,
    FeSpace,
    energy_norm,
    exact_energy_error,
    flux,
    solve,
)
from verifem.services.goal import (
    Box,
    GoalAnalysis,
    QuantityOfInterest,
    analyze_goal,
    flux_average,
    qoi_reference,
    subdomain_average,
)
from verifem.services.mesh import Mesh, mesh_quality
from verifem.services.problems import problem_and_mesh
from verifem.services.reports import EstimateReport

logger = logging.getLogger(__name__)

GOAL_SLACK = 1e-8


class CommandResult(BaseModel):
    command: str
    output_dir: str
    files: List[str] = Field(default_factory=list)
    summary: Dict[str, float] = Field(default_factory=dict)
    metrics: Optional[EffectivityMetrics] = None

    model_config = {"arbitrary_types_allowed": True}


def _options(config: RunConfig) -> EstimatorOptions:
    return EstimatorOptions(alpha=config.alpha, patch_enrichment=config.patch_enrichment,
                            fe_enrichment=config.fe_enrichment)


def _setup(config: RunConfig):
    return problem_and_mesh(config.problem, config.n, **config.custom_parameters())


def _mesh_payload(mesh: Mesh) -> Dict:
    quality = mesh_quality(mesh)
    return {
        "vertices": mesh.num_vertices,
        "elements": mesh.num_elements,
        "edges": mesh.num_edges,
        "h": mesh.h,
        "max_depth": int(mesh.depth.max(initial=0)),
        "gamma0": quality.gamma0,
    }


def _reference_error(u_h: FeFunction, problem: DiffusionProblem, config: RunConfig) -> Optional[float]:
    if not problem.has_exact_solution:
        return None
    return exact_energy_error(u_h, problem, config.quadrature_degree)


def build_qoi(goal: GoalConfig, mesh: Mesh, problem: DiffusionProblem) -> QuantityOfInterest:
    region = Box(*goal.region)
    if goal.qoi == "subdomain_average":
        return subdomain_average(mesh, region)
    return flux_average(mesh, region, goal.direction, problem)


def _goal_payload(analysis: GoalAnalysis, name: str) -> Dict:
    return {
        "qoi": name,
        "value": analysis.value,
        "reference": analysis.reference,
        "dwr": analysis.dwr,
        "primal_backend": analysis.primal_backend,
        "bounds": {
            method: bounds.model_dump(mode="json", exclude={"element_corrections"})
            for method, bounds in analysis.bounds.items()
        },
    }


def check_goal_bounds(analysis: GoalAnalysis):
    """Caveat-free goal intervals must contain the reference value"""
    if analysis.reference is None:
        return
    slack = GOAL_SLACK * max(1.0, abs(analysis.reference))
    for method, bounds in analysis.bounds.items():
        if bounds.guaranteed and not bounds.contains(analysis.reference, slack):
            raise ContractViolation(
                f"Goal bound '{method}' [{bounds.lower!r}, {bounds.upper!r}] misses the reference {analysis.reference!r}"
            )


def _indicator_fields(reports: List[EstimateReport], mesh: Mesh) -> Dict[str, np.ndarray]:
    fields: Dict[str, np.ndarray] = {}
    for report in reports:
        values = report.element_values()
        if values.size != mesh.num_elements:
            continue
        name = f"{report.estimator}_{report.bound_kind.value}"
        if report.backend:
            name = f"{name}_{report.backend}"
        fields[name] = values
    return fields


def flux_cell_fields(fluxes: Dict[str, EquilibratedFlux]) -> Dict[str, np.ndarray]:
    """Element means of each equilibrated flux and its defect ||f + div q_hat||_K, keyed by backend"""
    fields: Dict[str, np.ndarray] = {}
    for backend, q_hat in fluxes.items():
        if q_hat is None:
            continue
        fields[f"q_hat_{backend}"] = q_hat.element_means()
        fields[f"defect_{backend}"] = q_hat.divergence_defect
    return fields


def _write_mesh(out: Path, index: int, u_h: FeFunction, cell_fields: Dict[str, np.ndarray]) -> str:
    mesh = u_h.mesh
    cells = {"flux": flux(u_h).vectors, "depth": mesh.depth.astype(float)}
    cells.update(cell_fields)
    path = write_vtk(out / f"mesh_{index:02d}.vtk", mesh, {"u_h": u_h.coefficients}, cells,
                     title=f"{u_h.problem.name} iteration {index}")
    return str(path)


def run_solve(config: RunConfig, out: Path) -> CommandResult:
    problem, mesh = _setup(config)
    u_h = solve(problem, FeSpace(mesh))
    reference = _reference_error(u_h, problem, config)
    payload = {
        "command": "solve",
        "problem": problem.name,
        "n": config.n,
        "mesh": _mesh_payload(mesh),
        "energy_norm": energy_norm(u_h),
        "reference_error": reference,
    }
    files = [str(write_report(out / "report.json", payload))]
    if config.output.vtk:
        files.append(_write_mesh(out, 0, u_h, {}))
    summary = {"energy_norm": energy_norm(u_h)}
    if reference is not None:
        summary["reference_error"] = reference
    return CommandResult(command="solve", output_dir=str(out), files=files, summary=summary)


def run_estimate(config: RunConfig, out: Path) -> CommandResult:
    if not config.estimators and config.goal is None:
        raise InputError("Nothing to estimate: set 'estimators' or add a [goal] section")
    problem, mesh = _setup(config)
    u_h = solve(problem, FeSpace(mesh))
    reference = _reference_error(u_h, problem, config)

    session = EstimationSession(u_h, _options(config))
    reports: List[EstimateReport] = []
    metrics = EffectivityMetrics()
    for name in config.estimators:
        for report in session.run(name):
            report = report.with_reference(reference)
            metrics.record_report(report)
            reports.append(report)
            logger.info(f"Estimator {report.estimator}: {report.value:.6e} ({report.bound_kind.value})")
    check_bound_ordering(reports, reference)

    payload = {
        "command": "estimate",
        "problem": problem.name,
        "n": config.n,
        "mesh": _mesh_payload(mesh),
        "reference_error": reference,
        "estimates": reports,
    }
    files: List[str] = []
    cell_fields = _indicator_fields(reports, mesh)
    fluxes = dict(session.fluxes)
    if config.goal is not None:
        Q = build_qoi(config.goal, mesh, problem)
        value_ref = qoi_reference(Q, problem)
        analysis = analyze_goal(u_h, Q, config.goal.methods, config.fe_enrichment, config.goal.scaling, value_ref)
        check_goal_bounds(analysis)
        payload["goal"] = _goal_payload(analysis, Q.name)
        cell_fields["goal_indicators"] = analysis.indicators
        if analysis.primal_flux is not None:
            fluxes.setdefault(analysis.primal_backend, analysis.primal_flux)
    if session.has_tractions:
        files.append(str(write_tractions_csv(out / "tractions.csv", session.tractions.rows())))
    files.insert(0, str(write_report(out / "report.json", payload)))
    if config.output.vtk:
        cell_fields.update(flux_cell_fields(fluxes))
        files.append(_write_mesh(out, 0, u_h, cell_fields))
    summary = {f"{report.estimator}_{report.bound_kind.value}": report.value for report in reports}
    return CommandResult(command="estimate", output_dir=str(out), files=files, summary=summary, metrics=metrics)


def run_adapt(config: RunConfig, out: Path) -> CommandResult:
    if config.adapt is None:
        raise InputError("The adapt command needs an [adapt] section")
    problem, mesh = _setup(config)
    qoi = None
    goal = config.goal or GoalConfig()
    if config.adapt.mode == "goal":
        qoi = build_qoi(goal, mesh, problem)
    result = adapt_solve(problem, mesh, config.adapt, _options(config), qoi, goal.methods,
                         config.output.record_timings, config.quadrature_degree)

    metrics = EffectivityMetrics()
    for record in result.records:
        metrics.record_study(record)
    for reports in result.reports:
        check_bound_ordering(reports, reports[0].reference_error if reports else None)
    payload = {
        "command": "adapt",
        "problem": problem.name,
        "n": config.n,
        "adapt": config.adapt.model_dump(by_alias=True),
        "records": result.records,
        "final_mesh": _mesh_payload(result.meshes[-1]),
        "final_size_map": result.size_maps[-1],
    }
    if result.reports:
        payload["final_estimates"] = result.reports[-1]
    if result.goals:
        payload["goal"] = [_goal_payload(analysis, qoi.name) for analysis in result.goals]

    files = [str(write_report(out / "report.json", payload)), str(write_study_csv(out / "study.csv", result.records))]
    if config.output.vtk:
        steps = zip(result.solutions, result.indicators, result.size_maps, result.fluxes)
        for index, (step, indicators, ratios, fluxes) in enumerate(steps):
            cell_fields = {"indicators": indicators, "size_map": ratios}
            cell_fields.update(flux_cell_fields(fluxes))
            files.append(_write_mesh(out, index, step, cell_fields))
    summary = {"iterations": float(len(result.records)), "eta": result.records[-1].eta}
    return CommandResult(command="adapt", output_dir=str(out), files=files, summary=summary, metrics=metrics)


def run_study(config: RunConfig, out: Path) -> CommandResult:
    if config.study is None:
        raise InputError("The study command needs a [study] section")
    problem, mesh = _setup(config)
    records, rates = convergence_study(
        problem, mesh, config.study.mode, config.study.iterations, config.study.estimator, _options(config),
        config.adapt, config.output.record_timings, config.quadrature_degree,
    )
    metrics = EffectivityMetrics()
    for record in records:
        metrics.record_study(record)
    payload = {
        "command": "study",
        "problem": problem.name,
        "n": config.n,
        "study": config.study,
        "records": records,
        "rates": rates,
    }
    files = [str(write_report(out / "report.json", payload)), str(write_study_csv(out / "study.csv", records))]
    return CommandResult(command="study", output_dir=str(out), files=files, summary=rates, metrics=metrics)


COMMANDS: Dict[str, Callable[[RunConfig, Path], CommandResult]] = {
    "solve": run_solve,
    "estimate": run_estimate,
    "adapt": run_adapt,
    "study": run_study,
}


def run(command: str, config: RunConfig, out_dir: Optional[str] = None) -> CommandResult:
    """Run one command; files go to out_dir, else to the configured output directory"""
    if command not in COMMANDS:
        raise InputError(f"Unknown command '{command}', expected one of {', '.join(COMMANDS)}")
    out = Path(out_dir or config.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    logger.info(f"Running '{command}' for problem {config.problem} into {out}")
    try:
        result = COMMANDS[command](config, out)
    except ValidationError as exc:
        # report model validators encode the estimator contracts
        error = exc.errors()[0]
        raise ContractViolation(f"{exc.title} contract failed: {error['msg']}") from exc
    logger.info(f"'{command}' finished: {len(result.files)} files written")
    return result
