"""
Unit tests for P1 assembly, the global solve and the norms
"""

import numpy as np
import pytest

from verifem.errors import InputError, MeshError
from verifem.services.fem import (
    FeFunction,
    FeSpace,
    assemble_stiffness,
    bilinear,
    energy_norm,
    exact_energy_error,
    interpolate,
    l2_norm,
    mass_matrix,
    prolong,
    residual_eval,
    solve,
)
from verifem.services.mesh import uniform_refine, unit_square_mesh
from verifem.services.problems import build_problem, custom_problem, piecewise_constant_projection


class TestAssembly:
    @pytest.fixture
    def space(self):
        return FeSpace(unit_square_mesh(4))

    def test_stiffness_symmetric_with_constant_kernel(self, space):
        """Test rows of the stiffness matrix sum to zero"""
        A = np.broadcast_to(np.eye(2), (space.mesh.num_elements, 2, 2))
        K = assemble_stiffness(space, A)
        assert abs(K - K.T).max() == 0.0
        assert np.allclose(K @ np.ones(space.dof), 0.0, atol=1e-13)

    def test_mass_matrix_measures_domain(self, space):
        """Test 1^T M 1 equals the area"""
        M = mass_matrix(space)
        assert np.ones(space.dof) @ (M @ np.ones(space.dof)) == pytest.approx(1.0, rel=1e-13)

    def test_l2_norm_of_constant(self, space):
        """Test ||1||_0 = 1 on the unit square"""
        assert l2_norm(FeFunction(space, np.ones(space.dof))) == pytest.approx(1.0, rel=1e-13)

    def test_coefficient_count_checked(self, space):
        """Test wrong coefficient vectors are rejected"""
        with pytest.raises(InputError):
            FeFunction(space, np.zeros(3))


class TestSolve:
    def test_solution_vanishes_on_dirichlet(self, sin_sin_solution):
        """Test dirichlet dofs are zero"""
        dirichlet = sin_sin_solution.space.dirichlet_dofs
        assert np.all(sin_sin_solution.coefficients[dirichlet] == 0.0)

    def test_galerkin_orthogonality(self, sin_sin_solution):
        """Test R(phi_i) vanishes for a free basis function"""
        space = sin_sin_solution.space
        i = int(space.free_dofs[len(space.free_dofs) // 2])
        basis = np.zeros(space.dof)
        basis[i] = 1.0
        v = FeFunction(space, basis, sin_sin_solution.problem)
        assert abs(residual_eval(sin_sin_solution, v)) < 1e-9

    def test_pythagoras(self, sin_sin):
        """Test |||u|||^2 = |||u_h|||^2 + |||e|||^2"""
        u_h = solve(sin_sin, FeSpace(unit_square_mesh(16)))
        error = exact_energy_error(u_h)
        assert energy_norm(u_h) ** 2 + error ** 2 == pytest.approx(np.pi ** 2 / 2.0, rel=1e-4)

    def test_first_order_convergence(self, sin_sin):
        """Test the energy error halves with h"""
        errors = [exact_energy_error(solve(sin_sin, FeSpace(unit_square_mesh(n)))) for n in (8, 16)]
        assert 1.8 <= errors[0] / errors[1] <= 2.2

    def test_bilinear_matches_energy(self, sin_sin_solution):
        """Test B(u_h, u_h) = |||u_h|||^2"""
        assert bilinear(sin_sin_solution, sin_sin_solution) == pytest.approx(
            energy_norm(sin_sin_solution) ** 2, rel=1e-12
        )

    def test_custom_coefficient_must_be_spd(self):
        """Test an indefinite custom coefficient is rejected"""
        with pytest.raises(InputError):
            custom_problem(a11=1.0, a12=2.0, a22=1.0)

    def test_unknown_problem(self):
        """Test unknown catalogue names"""
        with pytest.raises(InputError):
            build_problem("heat")


class TestNestedSpaces:
    def test_prolongation_is_exact_for_linear_fields(self):
        """Test prolongation reproduces a linear function"""
        mesh = unit_square_mesh(3)
        fine = uniform_refine(mesh)

        def linear(points):
            return 1.0 + 2.0 * points[:, 0] - 3.0 * points[:, 1]

        coarse = interpolate(FeSpace(mesh), linear)
        assert np.allclose(prolong(coarse, fine).coefficients, linear(fine.vertices), atol=1e-14)

    def test_prolongation_needs_nesting(self):
        """Test prolongation onto an unrelated mesh"""
        coarse = interpolate(FeSpace(unit_square_mesh(2)), lambda p: p[:, 0])
        with pytest.raises(MeshError):
            prolong(coarse, unit_square_mesh(4))

    def test_difference_across_meshes(self, sin_sin):
        """Test subtraction prolongs to the finer mesh"""
        mesh = unit_square_mesh(4)
        u_h = solve(sin_sin, FeSpace(mesh))
        u_fine = solve(sin_sin, FeSpace(uniform_refine(mesh)))
        difference = u_fine - u_h
        assert difference.mesh is u_fine.mesh
        assert energy_norm(difference) > 0.0

    def test_projected_source(self, sin_sin):
        """Test the projected source is constant per element and keeps its mean"""
        mesh = unit_square_mesh(4)
        projected = piecewise_constant_projection(sin_sin, mesh)
        fine = uniform_refine(mesh)
        assert projected.source_is_piecewise_constant(fine)
        values = projected.element_source(fine)
        assert np.array_equal(values, np.repeat(projected.means, 4))
        assert projected.projection_defect() > 0.0
