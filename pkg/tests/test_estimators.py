"""
Tests for the estimator session and the ordering of lower and upper bounds
"""

import numpy as np
import pytest

from verifem.errors import ContractViolation
from verifem.services.estimators import EstimationSession, check_bound_ordering
from verifem.services.fem import FeSpace, exact_energy_error, solve
from verifem.services.mesh import l_shape_mesh, unit_square_mesh
from verifem.services.reports import BoundKind, EstimateReport

MESHES = {
    "sin_sin": unit_square_mesh,
    "fig1": lambda n: unit_square_mesh(n, "fig1"),
    "lshape": l_shape_mesh,
}

CASES = [(name, n) for name in ("sin_sin", "fig1") for n in (4, 8, 16, 32)] + [("lshape", n) for n in (2, 4, 8, 16)]


def _solve_case(request, name, n):
    problem = request.getfixturevalue(name)
    return solve(problem, FeSpace(MESHES[name](n)))


class TestBoundOrdering:
    @pytest.mark.parametrize("name,n", CASES)
    def test_lower_error_upper(self, request, name, n):
        """Test energy and flux-free lower bounds <= error <= flux-free and CRE upper bounds"""
        u_h = _solve_case(request, name, n)
        error = exact_energy_error(u_h)
        session = EstimationSession(u_h)
        reports = [r for estimator in ("energy_lower", "flux_free", "cre_analytic") for r in session.run(estimator)]
        lowers = [r for r in reports if r.bound_kind == BoundKind.GUARANTEED_LOWER]
        uppers = [r for r in reports if r.bound_kind == BoundKind.GUARANTEED_UPPER]
        assert {r.estimator for r in lowers} == {"energy_lower", "flux_free_lower"}

        for report in lowers:
            assert report.value <= error * (1.0 + 1e-8), report.estimator
        flux_free = next(r for r in uppers if r.estimator == "flux_free")
        assert flux_free.value >= error * (1.0 - 1e-8)
        for report in uppers:
            if report.guaranteed:
                assert report.value >= error * (1.0 - 1e-8), report.estimator
        assert max(r.value for r in lowers) <= min(r.value for r in uppers if r.guaranteed or r is flux_free)
        check_bound_ordering(reports, error)

    def test_crossed_bounds_rejected(self):
        """Test a lower bound above an upper bound is a contract violation"""
        reports = [
            EstimateReport(estimator="energy_lower", value=2.0, bound_kind=BoundKind.GUARANTEED_LOWER),
            EstimateReport(estimator="cre", value=1.0, bound_kind=BoundKind.GUARANTEED_UPPER),
        ]
        with pytest.raises(ContractViolation):
            check_bound_ordering(reports)

    def test_caveated_bounds_skipped(self):
        """Test bounds with caveats are left out of the ordering check"""
        reports = [
            EstimateReport(estimator="energy_lower", value=0.5, bound_kind=BoundKind.GUARANTEED_LOWER),
            EstimateReport(estimator="cre", value=0.1, bound_kind=BoundKind.GUARANTEED_UPPER,
                           caveats=["source_not_piecewise_constant"]),
        ]
        check_bound_ordering(reports, reference_error=0.6)


class TestEfficiency:
    def test_cre_effectivity_stays_flat(self, fig1):
        """Test the fig1 CRE effectivity stays in [1, 3.5] without drifting under refinement"""
        sizes, effectivities = [], []
        for n in (4, 8, 16, 32):
            u_h = solve(fig1, FeSpace(unit_square_mesh(n, "fig1")))
            report = EstimationSession(u_h).run("cre_analytic")[0]
            assert report.guaranteed
            effectivity = report.value / exact_energy_error(u_h)
            assert 1.0 - 1e-6 <= effectivity <= 3.5
            sizes.append(u_h.mesh.h)
            effectivities.append(effectivity)
        slope, _ = np.polyfit(np.log(1.0 / np.asarray(sizes)), effectivities, 1)
        assert abs(slope) <= 0.2
