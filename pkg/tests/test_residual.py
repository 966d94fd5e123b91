"""
Unit tests for the explicit residual indicator and the flux-free estimates
"""

import numpy as np
import pytest

from verifem.services.fem import FeFunction, FeSpace, exact_energy_error, interpolate, solve
from verifem.services.mesh import unit_square_mesh
from verifem.services.problems import custom_problem
from verifem.services.reports import BoundKind
from verifem.services.residual import (
    explicit_indicators,
    flux_free_bounds,
    flux_free_estimate,
    flux_free_lower_bound,
    flux_free_patch_solve,
    flux_free_patches,
    residual_data,
)


@pytest.fixture(scope="module")
def sin_sin_patches(sin_sin_solution):
    return flux_free_patches(sin_sin_solution, enrichment=2)


class TestExplicitIndicators:
    def test_caveat_and_kind(self, sin_sin_solution):
        """Test the explicit estimate is an indicator with an unknown constant"""
        report = explicit_indicators(residual_data(sin_sin_solution))
        assert report.bound_kind == BoundKind.INDICATOR
        assert "unknown_constant" in report.caveats
        assert not report.guaranteed
        assert len(report.contributions) == sin_sin_solution.mesh.num_elements

    def test_zero_residual(self):
        """Test a linear solution with f = 0 has no residual"""
        problem = custom_problem(f=0.0)
        u_h = FeFunction(FeSpace(unit_square_mesh(3)), np.zeros(16), problem)
        assert explicit_indicators(residual_data(u_h)).value == 0.0

    def test_indicator_decreases_under_refinement(self, sin_sin):
        """Test the indicator follows the error on finer meshes"""
        values = [explicit_indicators(residual_data(solve(sin_sin, FeSpace(unit_square_mesh(n))))).value
                  for n in (4, 8)]
        assert values[1] < values[0]


class TestFluxFreePatches:
    def test_one_solution_per_vertex(self, sin_sin_solution, sin_sin_patches):
        """Test every vertex gets a patch problem"""
        assert len(sin_sin_patches) == sin_sin_solution.mesh.num_vertices
        assert [p.vertex for p in sin_sin_patches] == list(range(sin_sin_solution.mesh.num_vertices))
        assert all(p.degree == 3 for p in sin_sin_patches)

    def test_interior_patch_has_zero_mean(self, sin_sin_solution):
        """Test patches away from the dirichlet boundary are normalized"""
        mesh = sin_sin_solution.mesh
        center = int(np.argmin(np.linalg.norm(mesh.vertices - 0.5, axis=1)))
        solution = flux_free_patch_solve(center, sin_sin_solution)
        assert solution.mean_zero
        assert solution.mean == pytest.approx(0.0, abs=1e-10)
        assert sorted(solution.elements.tolist()) == sorted(mesh.vertex_patch(center))

    def test_patch_solution_is_local(self, sin_sin_solution):
        """Test z_i ignores u_h away from the patch of vertex i"""
        mesh = sin_sin_solution.mesh
        center = int(np.argmin(np.linalg.norm(mesh.vertices - 0.5, axis=1)))
        far = int(np.argmin(np.linalg.norm(mesh.vertices - 0.125, axis=1)))
        coefficients = sin_sin_solution.coefficients.copy()
        coefficients[far] += 1.0
        perturbed = FeFunction(sin_sin_solution.space, coefficients, sin_sin_solution.problem)
        before = flux_free_patch_solve(center, sin_sin_solution)
        after = flux_free_patch_solve(center, perturbed)
        assert np.array_equal(before.elements, after.elements)
        assert np.allclose(before.coefficients, after.coefficients, rtol=1e-13, atol=1e-15)
        assert not np.allclose(flux_free_patch_solve(far, sin_sin_solution).coefficients,
                               flux_free_patch_solve(far, perturbed).coefficients)

    def test_patch_order_does_not_matter(self, sin_sin_solution, sin_sin_patches):
        """Test the bounds are unchanged when the patches are summed in reverse"""
        shuffled = list(reversed(sin_sin_patches))
        upper = flux_free_estimate(sin_sin_patches, sin_sin_solution).value
        lower = flux_free_lower_bound(sin_sin_patches, sin_sin_solution).value
        assert flux_free_estimate(shuffled, sin_sin_solution).value == pytest.approx(upper, rel=1e-12)
        assert flux_free_lower_bound(shuffled, sin_sin_solution).value == pytest.approx(lower, rel=1e-12)

    def test_zero_residual_gives_zero_patch(self):
        """Test z_i = 0 without residual data"""
        problem = custom_problem(f=0.0)
        u_h = interpolate(FeSpace(unit_square_mesh(2)), lambda p: np.zeros(len(p)), problem)
        assert flux_free_patch_solve(4, u_h, problem).is_zero


class TestFluxFreeBounds:
    def test_upper_bound_above_error(self, sin_sin_solution, sin_sin_patches):
        """Test the flux-free estimate bounds the error on the 8x8 mesh"""
        report = flux_free_estimate(sin_sin_patches, sin_sin_solution)
        assert report.bound_kind == BoundKind.GUARANTEED_UPPER
        assert report.caveats == ["local_enrichment"]
        assert report.value >= exact_energy_error(sin_sin_solution)

    def test_lower_bound_below_error(self, sin_sin_solution, sin_sin_patches):
        """Test |R(v)| / |||v||| never exceeds the error"""
        report = flux_free_lower_bound(sin_sin_patches, sin_sin_solution)
        assert report.bound_kind == BoundKind.GUARANTEED_LOWER
        error = exact_energy_error(sin_sin_solution)
        assert 0.0 < report.value <= error * (1.0 + 1e-8)
        assert report.extras["test_norm"] > 0.0

    def test_bounds_from_one_patch_set(self, fig1_solution):
        """Test lower <= upper on the fig1 problem"""
        upper, lower = flux_free_bounds(fig1_solution, enrichment=2)
        assert lower.value <= upper.value
        assert upper.estimator == "flux_free"
        assert lower.estimator == "flux_free_lower"
