"""
Unit tests for marking, the size map and the adaptive and uniform studies
"""

import numpy as np
import pytest

from verifem.config import AdaptConfig
from verifem.errors import InputError
from verifem.services.adapt import (
    adapt_solve,
    convergence_study,
    fit_slope,
    mark_dorfler,
    mark_max,
    size_map,
    study_rates,
)
from verifem.services.mesh import l_shape_mesh, unit_square_mesh


class TestMarking:
    def test_max_marking(self):
        """Test elements above lambda times the largest indicator"""
        assert mark_max([4.0, 3.0, 2.0, 1.0], 0.8).tolist() == [0]
        assert mark_max([4.0, 3.0, 2.0, 1.0], 0.5).tolist() == [0, 1, 2]

    def test_max_marking_limits(self):
        """Test lambda = 0 marks everything and equal indicators are all marked"""
        assert mark_max([4.0, 3.0, 2.0, 1.0], 0.0).tolist() == [0, 1, 2, 3]
        assert mark_max([2.0, 2.0, 2.0], 1.0).tolist() == [0, 1, 2]

    def test_signed_indicators_use_magnitude(self):
        """Test goal indicators are marked by their absolute value"""
        assert mark_max([-5.0, 1.0, 4.5], 0.8).tolist() == [0, 2]

    def test_marking_errors(self):
        """Test invalid fractions and indicator arrays"""
        with pytest.raises(InputError):
            mark_max([], 0.5)
        with pytest.raises(InputError):
            mark_max([1.0, 2.0], 1.5)
        with pytest.raises(InputError):
            mark_max([1.0, np.nan], 0.5)
        with pytest.raises(InputError):
            mark_dorfler([1.0, 2.0], 0.0)

    def test_dorfler_marking(self):
        """Test the smallest bulk set of largest indicators"""
        indicators = [1.0, 4.0, 2.0, 3.0]
        assert mark_dorfler(indicators, 0.5).tolist() == [1]
        assert mark_dorfler(indicators, 0.9).tolist() == [1, 2, 3]
        assert mark_dorfler(indicators, 1.0).tolist() == [0, 1, 2, 3]

    def test_dorfler_ties_by_id(self):
        """Test equal indicators are taken in element order"""
        assert mark_dorfler([1.0, 1.0, 1.0, 1.0], 0.5).tolist() == [0, 1]


class TestSizeMap:
    def test_uniform_indicators(self):
        """Test r_K = epsilon0 / (eta sqrt(M)) for equal indicators"""
        eta = np.full(8, 0.2)
        ratios = size_map(eta, 1e-2)
        assert np.allclose(ratios, 1e-2 / (0.2 * np.sqrt(8.0)), rtol=1e-12)

    def test_constraint_holds(self):
        """Test sum r_K^2 eta_K^2 = epsilon0^2"""
        eta = np.array([0.5, 0.1, 0.05, 0.3, 0.0])
        ratios = size_map(eta, 1e-3)
        assert np.sum(ratios[:4] ** 2 * eta[:4] ** 2) == pytest.approx(1e-6, rel=1e-6)
        assert ratios[1] > ratios[0]

    def test_size_map_errors(self):
        """Test nonpositive tolerances and vanishing indicators"""
        with pytest.raises(InputError):
            size_map([0.1, 0.2], 0.0)
        with pytest.raises(InputError):
            size_map([0.0, 0.0], 1e-3)


class TestAdaptSolve:
    def test_large_tolerance_stops_at_once(self, sin_sin):
        """Test a reached tolerance ends the loop after one solve"""
        config = AdaptConfig(epsilon0=1e3, estimator="zz")
        result = adapt_solve(sin_sin, unit_square_mesh(4), config)
        assert len(result.records) == 1
        assert result.records[0].N == 25
        assert result.records[0].seconds is None

    def test_refines_toward_the_corner(self, lshape):
        """Test the L-shape loop refines around the re-entrant corner"""
        config = AdaptConfig(lambda_=0.8, epsilon0=1e-8, max_iterations=4, estimator="cre_analytic")
        result = adapt_solve(lshape, l_shape_mesh(2), config)
        assert len(result.records) == 4
        counts = [record.N for record in result.records]
        assert counts == sorted(counts) and counts[-1] > counts[0]
        final = result.meshes[-1]
        smallest = int(np.argmin(final.areas))
        assert np.linalg.norm(final.vertices[final.triangles[smallest]], axis=1).min() <= 1e-12
        assert all(record.i_eff is not None for record in result.records)

    def test_size_map_per_iteration(self, lshape):
        """Test every iteration carries a size map meeting the tolerance constraint"""
        config = AdaptConfig(lambda_=0.5, epsilon0=1e-2, max_iterations=3, estimator="cre_analytic")
        result = adapt_solve(lshape, l_shape_mesh(1), config)
        assert len(result.size_maps) == len(result.meshes) == len(result.solutions) == 3
        for mesh, indicators, ratios in zip(result.meshes, result.indicators, result.size_maps):
            assert ratios.shape == (mesh.num_elements,)
            assert np.all(ratios > 0.0)
            assert np.sum(ratios ** 2 * indicators ** 2) == pytest.approx(1e-4, rel=1e-6)

    def test_equilibrated_fluxes_per_iteration(self, lshape):
        """Test CRE runs keep the flux of every iteration"""
        config = AdaptConfig(epsilon0=1e-8, max_iterations=2, estimator="cre_analytic")
        result = adapt_solve(lshape, l_shape_mesh(1), config)
        assert [list(fluxes) for fluxes in result.fluxes] == [["analytic"], ["analytic"]]
        for mesh, fluxes in zip(result.meshes, result.fluxes):
            assert fluxes["analytic"].mesh is mesh

    def test_deterministic(self, lshape):
        """Test two runs give identical records"""
        config = AdaptConfig(epsilon0=1e-8, max_iterations=3, estimator="zz")
        first = adapt_solve(lshape, l_shape_mesh(1), config)
        second = adapt_solve(lshape, l_shape_mesh(1), config)
        assert [r.model_dump() for r in first.records] == [r.model_dump() for r in second.records]

    def test_goal_mode_needs_quantity(self, sin_sin):
        """Test goal adaptivity without a quantity of interest"""
        with pytest.raises(InputError):
            adapt_solve(sin_sin, unit_square_mesh(2), AdaptConfig(mode="goal"))

    def test_indicator_free_estimator(self, sin_sin):
        """Test marking needs element contributions"""
        with pytest.raises(InputError):
            adapt_solve(sin_sin, unit_square_mesh(2), AdaptConfig(estimator="energy_lower"))


class TestRates:
    def test_fit_slope(self):
        """Test an exact power law"""
        x = np.array([10.0, 100.0, 1000.0])
        assert fit_slope(x, 3.0 * x ** -0.5) == pytest.approx(-0.5, rel=1e-12)
        assert fit_slope([1.0, 2.0, 4.0, 8.0], [9.0, 1.0, 0.5, 0.25], skip=1) == pytest.approx(-1.0)

    def test_fit_needs_three_points(self):
        """Test short series are rejected"""
        with pytest.raises(InputError):
            fit_slope([1.0, 2.0], [1.0, 0.5])

    def test_uniform_study_rate(self, sin_sin):
        """Test first order convergence in h on the sin-sin problem"""
        records, rates = convergence_study(sin_sin, unit_square_mesh(4), "uniform", 3, estimator="zz")
        assert [r.N for r in records] == [25, 81, 289]
        assert 0.8 <= rates["slope_h"] <= 1.2
        assert rates == study_rates(records)

    def test_adaptive_study_has_no_h_rate(self, sin_sin):
        """Test graded meshes report rates against N only"""
        records, rates = convergence_study(sin_sin, unit_square_mesh(2), "adaptive", 3, estimator="zz")
        assert len(records) == 3
        assert "slope_h" not in rates
        assert set(rates) == {"slope_N", "estimate_slope_N"}
        assert rates == study_rates(records, with_h=False)

    def test_sin_sin_first_order(self, sin_sin):
        """Test the energy error decays like h on n = 8 to 64"""
        records, rates = convergence_study(sin_sin, unit_square_mesh(8), "uniform", 4, estimator="zz")
        assert [r.N for r in records] == [81, 289, 1089, 4225]
        assert 0.85 <= rates["slope_h"] <= 1.15


class TestLShapeRates:
    def test_uniform_rate_is_limited_by_the_corner(self, lshape):
        """Test uniform refinement converges like N^(-1/3)"""
        records, rates = convergence_study(lshape, l_shape_mesh(2), "uniform", 4, estimator="zz")
        assert -0.40 <= rates["slope_N"] <= -0.27

    def test_adaptive_rate_recovers_optimality(self, lshape):
        """Test max marking with CRE indicators beats the uniform rate"""
        config = AdaptConfig(lambda_=0.8, epsilon0=1e-12, max_iterations=12, estimator="cre_analytic")
        result = adapt_solve(lshape, l_shape_mesh(2), config)
        assert len(result.records) == 12
        N = [r.N for r in result.records]
        errors = [r.ref_error for r in result.records]
        assert fit_slope(N, errors, skip=3) <= -0.45

    def test_study_arguments(self, sin_sin):
        """Test study modes and lengths"""
        with pytest.raises(InputError):
            convergence_study(sin_sin, unit_square_mesh(2), "uniform", 2)
        with pytest.raises(InputError):
            convergence_study(sin_sin, unit_square_mesh(2), "random", 3)
