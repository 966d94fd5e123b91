"""
Unit tests for the equilibrated flux construction and the CRE bounds
"""

import numpy as np
import pytest

from verifem.errors import InputError, MeshError
from verifem.services.equilibration import (
    EquilibrationData,
    build_tractions,
    cre,
    cre_upper_bound,
    edge_traction,
    element_equilibrium_residual,
    equilibrate,
    equilibrate_solution,
    equilibrated_element_residual,
    nodal_projection,
    nodal_projections,
    prager_synge_gap,
    solve_node_system,
)
from verifem.services.fem import FeSpace, exact_energy_error, flux, interpolate, solve
from verifem.services.mesh import uniform_refine, unit_square_mesh
from verifem.services.problems import custom_problem, piecewise_constant_projection
from verifem.services.reports import BoundKind


@pytest.fixture(scope="module")
def constant_source_solution():
    """f = 1 with an anisotropic coefficient on the 4x4 square"""
    problem = custom_problem(a11=2.0, a12=0.5, a22=1.0, f=1.0)
    return solve(problem, FeSpace(unit_square_mesh(4)))


@pytest.fixture(scope="module")
def fig1_tractions(fig1_solution):
    data = EquilibrationData.from_solution(fig1_solution)
    return data, build_tractions(data)


class TestEdgeTraction:
    def test_constant_traction(self):
        """Test equal moments c l / 2 give the constant c"""
        assert np.allclose(edge_traction(2.0, np.array([3.0, 3.0])), [3.0, 3.0])

    def test_linear_traction(self):
        """Test the endpoint values of an affine traction"""
        # t(s) = 1 - s on a unit edge: moments 1/3 and 1/6
        assert np.allclose(edge_traction(1.0, np.array([1.0 / 3.0, 1.0 / 6.0])), [1.0, 0.0])

    def test_degenerate_edge(self):
        """Test zero-length edges are rejected"""
        with pytest.raises(MeshError):
            edge_traction(0.0, np.array([1.0, 1.0]))


class TestNodeSystems:
    def test_interior_compatibility(self, constant_source_solution):
        """Test sum of Q_i^K over the patch vanishes at interior vertices"""
        data = EquilibrationData.from_solution(constant_source_solution)
        Q = nodal_projections(data)
        scale = np.linalg.norm(data.load_vector())
        mesh = data.mesh
        for i in np.setdiff1d(np.arange(mesh.num_vertices), mesh.dirichlet_vertices):
            local = [np.nonzero(mesh.triangles[K] == i)[0][0] for K in mesh.vertex_patch(i)]
            assert abs(Q[mesh.vertex_patch(i), local].sum()) <= 1e-10 * scale

    def test_single_projection(self, constant_source_solution):
        """Test one entry agrees with the full table"""
        mesh = constant_source_solution.mesh
        K = mesh.vertex_patch(6)[0]
        local = int(np.nonzero(mesh.triangles[K] == 6)[0][0])
        table = nodal_projections(EquilibrationData.from_solution(constant_source_solution))
        assert nodal_projection(6, K, constant_source_solution) == pytest.approx(table[K, local], abs=1e-14)
        with pytest.raises(InputError):
            nodal_projection(6, mesh.num_elements - 1, constant_source_solution)

    def test_linear_field_needs_no_correction(self):
        """Test a continuous flux with f = 0 keeps the mean moments"""
        problem = custom_problem(f=0.0)
        u_h = interpolate(FeSpace(unit_square_mesh(3)), lambda p: 1.0 + p[:, 0] - 2.0 * p[:, 1], problem)
        data = EquilibrationData.from_solution(u_h)
        system = solve_node_system(5, data)
        assert system.interior
        assert np.allclose(system.corrections, 0.0, atol=1e-12)

    def test_node_equations_hold(self, constant_source_solution):
        """Test sum over the edges of sigma b_hat = Q_i^K"""
        data = EquilibrationData.from_solution(constant_source_solution)
        system = solve_node_system(7, data)
        assert np.allclose(system.sigma @ system.b_hat, system.rhs, atol=1e-10)


class TestAnalyticFlux:
    def test_exact_equilibrium(self, constant_source_solution):
        """Test per-element equilibrium and zero divergence defect"""
        data = EquilibrationData.from_solution(constant_source_solution)
        tractions = build_tractions(data)
        q_hat = equilibrate(data, "analytic", tractions=tractions)
        scale = np.abs(data.source_moments).sum() + np.abs(tractions.coefficients).sum()
        assert element_equilibrium_residual(data, tractions).max() <= 1e-12 * scale
        assert q_hat.divergence_defect.max() <= 1e-10
        assert q_hat.trace_mismatch.max() <= 1e-10
        assert q_hat.admissible
        assert q_hat.caveats() == []

    def test_upper_bound(self, fig1_solution):
        """Test sqrt(2) E_CRE bounds the fig1 error"""
        q_hat = equilibrate_solution(fig1_solution)
        assert q_hat.backend == "analytic"
        report = cre_upper_bound(fig1_solution, q_hat)
        assert report.bound_kind == BoundKind.GUARANTEED_UPPER
        assert report.guaranteed
        error = exact_energy_error(fig1_solution)
        assert error <= report.value * (1.0 + 1e-8)
        assert report.value / error <= 3.5

    def test_cre_contributions(self, fig1_solution):
        """Test element terms of E_CRE^2 add up"""
        q_hat = equilibrate_solution(fig1_solution)
        E = cre(fig1_solution, q_hat)
        assert cre(fig1_solution, q_hat, per_element=True).sum() == pytest.approx(E ** 2, rel=1e-12)
        assert cre_upper_bound(fig1_solution, q_hat).value == pytest.approx(np.sqrt(2.0) * E, rel=1e-12)

    def test_prager_synge_identity(self, fig1_solution):
        """Test 2 E^2 = |||q - q_h|||^2 + |||q - q_hat|||^2 for an admissible flux"""
        q_hat = equilibrate_solution(fig1_solution)
        E = cre(fig1_solution, q_hat)
        assert prager_synge_gap(fig1_solution, q_hat) / (2.0 * E ** 2) <= 0.02

    def test_unknown_backend(self, fig1_solution):
        """Test backend names are checked"""
        with pytest.raises(InputError):
            equilibrate(EquilibrationData.from_solution(fig1_solution), "rtn")


class TestElementResidual:
    def test_matches_fe_flux_bound(self, fig1_solution, fig1_tractions):
        """Test the element residual estimate equals the FE-flux CRE bound"""
        data, tractions = fig1_tractions
        report = equilibrated_element_residual(fig1_solution, tractions, data=data)
        assert report.value == pytest.approx(report.extras["cre_cross_check"], rel=1e-10)
        assert report.backend == "fe"

    def test_fe_flux_keeps_tractions(self, fig1_solution, fig1_tractions):
        """Test the FE flux reuses the traction set it was given"""
        data, tractions = fig1_tractions
        q_hat = equilibrate(data, "fe", enrichment=3, tractions=tractions)
        assert q_hat.backend == "fe"
        assert q_hat.tractions is tractions
        assert cre(fig1_solution, q_hat) > 0.0


class TestProjectedSource:
    @pytest.mark.parametrize("n", [8, 16])
    def test_prager_synge_against_refined_solution(self, sin_sin, n):
        """Test the hypercircle identity with a three-times refined reference flux"""
        mesh = unit_square_mesh(n)
        problem = piecewise_constant_projection(sin_sin, mesh)
        u_h = solve(problem, FeSpace(mesh))
        reference = solve(problem, FeSpace(uniform_refine(uniform_refine(uniform_refine(mesh)))))
        q_hat = equilibrate_solution(u_h)
        assert q_hat.backend == "analytic"
        assert q_hat.caveats() == []
        E = cre(u_h, q_hat)
        assert prager_synge_gap(u_h, q_hat, exact_flux=flux(reference)) / (2.0 * E ** 2) <= 0.02

    @pytest.mark.parametrize("n", [8, 16])
    def test_element_residual_cross_check(self, sin_sin, n):
        """Test the element residual estimate agrees with its CRE cross-check"""
        mesh = unit_square_mesh(n)
        u_h = solve(piecewise_constant_projection(sin_sin, mesh), FeSpace(mesh))
        data = EquilibrationData.from_solution(u_h)
        report = equilibrated_element_residual(u_h, build_tractions(data), data=data)
        assert report.value == pytest.approx(report.extras["cre_cross_check"], rel=1e-10)
