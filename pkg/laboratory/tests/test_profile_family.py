"""
Comprehensive tests for the profile family H_s.
Tests both happy path and edge cases for regimes, s-smoothing windows, support and brackets.
"""
import numpy as np
import pytest
from django.test import SimpleTestCase

from laboratory.exceptions import BracketNotFoundError, PreconditionError
from laboratory.services.profile_family import (
    F,
    ProfileEvaluator,
    bracket_samples,
    exhaust_bracket,
    h_tilde,
    h_tilde_gradient,
    h_tilde_hessian,
    section_curve,
    smooth_in_s,
    surface_grid,
)
from laboratory.tests.factories import ConeSpecFactory, ModelParamsFactory, ProfileEvaluatorFactory, TestData


class ProfileEvaluatorTestCase(SimpleTestCase):
    """Test cases for evaluator construction and the raw family."""

    def setUp(self):
        """Set up test dependencies."""
        self.params = ModelParamsFactory()
        self.evaluator = ProfileEvaluatorFactory(params=self.params)

    def test_nonpositive_height_rejected(self):
        """Test c must be positive."""
        with self.assertRaises(PreconditionError):
            ProfileEvaluatorFactory(c=0.0)

    def test_window_centres_restricted(self):
        """Test smoothing windows only at the regime boundaries."""
        with self.assertRaises(PreconditionError):
            ProfileEvaluatorFactory(windows=(0.5,))
        with self.assertRaises(PreconditionError):
            smooth_in_s(self.evaluator, 2.0, 1e-3)

    def test_smoothing_radius_range(self):
        """Test the radius must lie in (0, 1/4)."""
        with self.assertRaises(PreconditionError):
            ProfileEvaluatorFactory(smoothing_radius=0.3)

    def test_upper_regime_value(self):
        """Test F_2(1, 1) = c + 2 where U_2 is on its plateau."""
        self.assertEqual(F(2.0, [1.0, 1.0], TestData.C, self.params), TestData.C + 2.0)

    def test_window_lookup(self):
        """Test window_of finds the centre only inside B(s*, eps_s)."""
        self.assertEqual(self.evaluator.window_of(1.0005), 1.0)
        self.assertIsNone(self.evaluator.window_of(1.5))
        self.assertIsNone(self.evaluator.raw().window_of(0.0))

    def test_value_outside_windows_is_raw_family(self):
        """Test H_s = h_tilde away from the windows."""
        p = self.evaluator.cone.p_star
        self.assertEqual(self.evaluator.value(3.0, p), h_tilde(3.0, p, self.evaluator))

    def test_gradient_matches_difference_quotient(self):
        """Test the analytic p-gradient against central differences."""
        cone = self.evaluator.cone
        p = cone.to_p([0.06, 0.9])
        gradient = h_tilde_gradient(2.0, p, self.evaluator)
        h = 1e-7
        for i in range(2):
            step = np.zeros(2)
            step[i] = h
            quotient = (self.evaluator.value(2.0, p + step) - self.evaluator.value(2.0, p - step)) / (2.0 * h)
            self.assertAlmostEqual(gradient[i], quotient, delta=1e-5 * (1.0 + abs(quotient)))

    def test_hessian_matches_gradient_differences(self):
        """Test the analytic p-Hessian against central differences of the gradient."""
        p = self.evaluator.cone.to_p([0.06, 0.9])
        hessian = h_tilde_hessian(2.0, p, self.evaluator)
        h = 1e-7
        for i in range(2):
            step = np.zeros(2)
            step[i] = h
            column = (h_tilde_gradient(2.0, p + step, self.evaluator)
                      - h_tilde_gradient(2.0, p - step, self.evaluator)) / (2.0 * h)
            np.testing.assert_allclose(hessian[:, i], column, rtol=1e-5, atol=1e-5)
        np.testing.assert_allclose(hessian, hessian.T, atol=1e-9)


class TestRegimeContinuity:
    """F_s is continuous across s = -1, 0, 1."""

    @pytest.mark.parametrize("center", [-1.0, 0.0, 1.0])
    def test_one_sided_limits(self, evaluator, center):
        raw = evaluator.raw()
        rng = np.random.default_rng(3)
        Y = rng.uniform(0.0, 1.5, size=(200, 2))
        middle = raw.F_jet(center, Y)[0]
        for side in (-1e-12, 1e-12):
            jump = np.max(np.abs(raw.F_jet(center + side, Y)[0] - middle))
            assert jump < 1e-10


class TestMonotonicity:
    """d/ds H_s >= 0 on and off the smoothing windows."""

    @pytest.mark.parametrize("s", [-4.0, -1.5, -0.5, 0.5, 2.0, 4.0])
    def test_outside_windows(self, evaluator, s):
        for p in bracket_samples(evaluator.cone, count=16, seed=1):
            assert evaluator.s_derivative(s, p) >= -1e-8

    @pytest.mark.parametrize("center", [-1.0, 0.0, 1.0])
    def test_inside_windows(self, evaluator, center):
        radius = evaluator.smoothing_radius
        points = bracket_samples(evaluator.cone, count=4, seed=2)
        for offset in np.linspace(-0.9, 0.9, 7):
            for p in points:
                assert evaluator.s_derivative(center + offset * radius, p) >= -1e-8


class TestSmoothingWindows:
    """Inside B(s*, eps_s) the smoothed family joins the raw one."""

    @pytest.mark.parametrize("center", [-1.0, 0.0, 1.0])
    def test_joins_raw_family_near_window_edges(self, evaluator, center):
        raw = evaluator.raw()
        radius = evaluator.smoothing_radius
        p = evaluator.cone.to_p([0.9, 1.05])
        for s in (center - 0.96 * radius, center + 0.96 * radius):
            assert evaluator.value(s, p) == pytest.approx(raw.value(s, p), abs=1e-8)

    @pytest.mark.parametrize("center", [-1.0, 0.0, 1.0])
    def test_equals_raw_family_at_window_rim(self, evaluator, center):
        raw = evaluator.raw()
        radius = evaluator.smoothing_radius
        for p in bracket_samples(evaluator.cone, count=8, seed=4):
            for s in (center - 0.97 * radius, center + 0.97 * radius):
                assert evaluator.window_of(s) == center
                assert evaluator.value(s, p) == raw.value(s, p)

    @pytest.mark.parametrize("center", [-1.0, 0.0, 1.0])
    @pytest.mark.parametrize("divisor", [50.0, None])
    def test_difference_quotient_across_window_edges(self, evaluator, center, divisor):
        radius = evaluator.smoothing_radius
        h = 1e-9 if divisor is None else radius / divisor
        points = np.vstack([
            evaluator.cone.p_star[None, :],
            [[0.2, 0.0]],
            bracket_samples(evaluator.cone, count=8, seed=6),
        ])
        for edge in (center - radius, center + radius):
            for p in points:
                slope = (evaluator.value(edge + h, p) - evaluator.value(edge - h, p)) / (2.0 * h)
                assert slope >= -1e-8, (edge, h, p)

    def test_window_jet_shapes(self, evaluator):
        value, gradient, hessian = evaluator.jet(0.0, evaluator.cone.p_star)
        assert isinstance(value, float)
        assert gradient.shape == (2,)
        assert hessian.shape == (2, 2)


class TestSupport:
    """H_s vanishes on the cone boundary and beyond radius R."""

    @pytest.mark.parametrize("s", [-3.0, -0.5, 0.5, 3.0])
    def test_boundary_samples(self, evaluator, s):
        cone = evaluator.cone
        rng = np.random.default_rng(5)
        face = rng.uniform(0.0, 1.5, size=(32, 2))
        face[:, 0] = 0.0
        far = np.abs(rng.normal(size=(32, 2)))
        far *= (cone.R * 1.2 / np.linalg.norm(far, axis=1))[:, None]
        P = cone.to_p(np.vstack([face, far]))
        assert np.all(evaluator.values(s, P) == 0.0)


class TestExhaustingBracket:
    """Brackets H_{s_lo} < H < H_{s_hi} on sampled momenta."""

    @pytest.fixture
    def samples(self, arnold_cone):
        axis = np.linspace(0.1, 1.4, 8)
        grid = np.array([[a, b] for a in axis for b in axis])
        return np.vstack([arnold_cone.p_star[None, :], arnold_cone.to_p(grid)])

    def test_bracket_for_constant_above_height(self, evaluator, samples):
        level = TestData.C + 1.0
        s_lo, s_hi = exhaust_bracket(lambda p, q, t: level, evaluator, samples=samples)
        assert s_lo == -2.0
        assert s_hi >= 2.0
        assert np.all(evaluator.values(s_hi, samples) > level)
        assert np.all(evaluator.values(s_lo, samples) < level)

    def test_zero_hamiltonian_has_no_lower_bracket(self, evaluator, samples):
        with pytest.raises(BracketNotFoundError):
            exhaust_bracket(lambda p, q, t: 0.0, evaluator, samples=samples, max_doublings=4)


class TestExports:
    """Section curves and surfaces feed the plot export."""

    def test_section_curve_shape(self, evaluator):
        t = np.linspace(0.0, 2.0, 41)
        values = section_curve(evaluator, 1.0, t)
        assert values.shape == (41,)
        assert values[0] == 0.0

    def test_surface_grid(self, evaluator):
        grid = surface_grid(evaluator, 1.0, count=11)
        assert grid.shape == (121, 3)

    def test_surface_grid_needs_plane(self, params):
        cone = ConeSpecFactory(A=np.eye(3).tolist(), p_star=[1.0, 1.0, 1.0])
        with pytest.raises(PreconditionError):
            surface_grid(ProfileEvaluator(cone, params, 3.0), 1.0)
