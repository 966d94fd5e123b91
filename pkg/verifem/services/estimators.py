"""
Estimator registry: runs the named estimators on one solution and shares
the intermediate results they have in common
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional

from verifem.errors import ContractViolation, InputError
from verifem.services.equilibration import (
    EquilibratedFlux,
    EquilibrationData,
    TractionSet,
    build_tractions,
    cre_upper_bound,
    element_flux_analytic,
    element_flux_fe,
    equilibrated_element_residual,
)
from verifem.services.fem import FeFunction, FeSpace, flux, solve
from verifem.services.mesh import uniform_refine
from verifem.services.recovery import (
    aubin_nitsche_constant,
    energy_lower_bound,
    recovery_estimate,
    recovery_guaranteed_bound,
    richardson_report,
    spr_recover,
    zz_average,
)
from verifem.services.reports import BoundKind, EstimateReport
from verifem.services.residual import (
    explicit_indicators,
    flux_free_estimate,
    flux_free_lower_bound,
    flux_free_patches,
    residual_data,
)

logger = logging.getLogger(__name__)

ESTIMATOR_NAMES = (
    "zz",
    "spr",
    "spr_guaranteed",
    "explicit",
    "flux_free",
    "cre_analytic",
    "cre_fe",
    "element_residual",
    "richardson",
    "energy_lower",
)

ORDERING_SLACK = 1e-8


@dataclass
class EstimatorOptions:
    alpha: float = 1.0
    patch_enrichment: int = 2
    fe_enrichment: int = 3


class EstimationSession:
    """Estimators of one solution; refined solutions and tractions are computed once"""

    def __init__(self, u_h: FeFunction, options: Optional[EstimatorOptions] = None):
        self.u_h = u_h
        self.options = options or EstimatorOptions()
        self._refined: Optional[FeFunction] = None
        self._data: Optional[EquilibrationData] = None
        self._tractions: Optional[TractionSet] = None
        self.fluxes: Dict[str, EquilibratedFlux] = {}

    @property
    def refined(self) -> FeFunction:
        """Solution on the uniform refinement"""
        if self._refined is None:
            self._refined = solve(self.u_h.problem, FeSpace(uniform_refine(self.u_h.mesh)))
        return self._refined

    @property
    def data(self) -> EquilibrationData:
        if self._data is None:
            self._data = EquilibrationData.from_solution(self.u_h)
        return self._data

    @property
    def tractions(self) -> TractionSet:
        if self._tractions is None:
            self._tractions = build_tractions(self.data)
        return self._tractions

    @property
    def has_tractions(self) -> bool:
        return self._tractions is not None

    def equilibrated_flux(self, backend: str) -> EquilibratedFlux:
        if backend not in self.fluxes:
            if backend == "analytic":
                self.fluxes[backend] = element_flux_analytic(self.data, self.tractions)
            else:
                self.fluxes[backend] = element_flux_fe(self.data, self.tractions, self.options.fe_enrichment)
        return self.fluxes[backend]

    def run(self, name: str) -> List[EstimateReport]:
        u_h = self.u_h
        if name == "zz":
            return [recovery_estimate(zz_average(flux(u_h)), flux(u_h), "zz")]
        if name == "spr":
            return [recovery_estimate(spr_recover(flux(u_h)), flux(u_h), "spr")]
        if name == "spr_guaranteed":
            constant = aubin_nitsche_constant(u_h, self.refined, self.options.alpha)
            return [recovery_guaranteed_bound(spr_recover(flux(u_h)), flux(u_h), u_h.problem, constant)]
        if name == "explicit":
            return [explicit_indicators(residual_data(u_h))]
        if name == "flux_free":
            solutions = flux_free_patches(u_h, self.options.patch_enrichment)
            return [flux_free_estimate(solutions, u_h), flux_free_lower_bound(solutions, u_h)]
        if name == "cre_analytic":
            return [cre_upper_bound(u_h, self.equilibrated_flux("analytic"))]
        if name == "cre_fe":
            return [cre_upper_bound(u_h, self.equilibrated_flux("fe"))]
        if name == "element_residual":
            return [equilibrated_element_residual(u_h, self.tractions, self.options.fe_enrichment, self.data)]
        if name == "richardson":
            return [richardson_report(u_h, self.refined, self.options.alpha)]
        if name == "energy_lower":
            return [energy_lower_bound(self.refined, u_h)]
        raise InputError(f"Unknown estimator '{name}', expected one of {', '.join(ESTIMATOR_NAMES)}")


def check_bound_ordering(reports: List[EstimateReport], reference_error: Optional[float] = None):
    """
    Guaranteed lower bounds must not exceed guaranteed upper bounds (or the
    reference error). Bounds carrying caveats are left out.
    """
    lowers = [r for r in reports if r.bound_kind == BoundKind.GUARANTEED_LOWER and r.guaranteed]
    uppers = [r for r in reports if r.bound_kind == BoundKind.GUARANTEED_UPPER and r.guaranteed]
    for low in lowers:
        for up in uppers:
            if low.value > up.value * (1.0 + ORDERING_SLACK):
                raise ContractViolation(
                    f"Lower bound '{low.estimator}' = {low.value!r} exceeds upper bound '{up.estimator}' = {up.value!r}"
                )
    if reference_error is None:
        return
    for low in lowers:
        if low.value > reference_error * (1.0 + ORDERING_SLACK):
            raise ContractViolation(
                f"Lower bound '{low.estimator}' = {low.value!r} exceeds the reference error {reference_error!r}"
            )
    for up in uppers:
        if up.value < reference_error * (1.0 - ORDERING_SLACK):
            raise ContractViolation(
                f"Upper bound '{up.estimator}' = {up.value!r} is below the reference error {reference_error!r}"
            )
    logger.info(f"Bound ordering holds for {len(lowers)} lower and {len(uppers)} upper bounds")
