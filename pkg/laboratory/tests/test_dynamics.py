"""
Comprehensive tests for dynamics services.
Tests both happy path and edge cases for mechanical systems, integrators and the sigma-composed cutoff.
"""
import math

import numpy as np
import pytest
from django.test import SimpleTestCase

from laboratory.exceptions import PreconditionError, WindowInfeasibleError
from laboratory.services.dynamics import (
    FourierTerm,
    MechanicalSystem,
    SigmaProfile,
    arnold_system,
    flow_map,
    integrate,
    monodromy_determinant,
    profile_hamiltonian,
    quadratic_hamiltonian,
    richardson_defect,
    sigma_compose,
    symplectic_defect,
    vector_field,
)
from laboratory.tests.factories import ConeSpecFactory, MechanicalSystemFactory, ModelParamsFactory, SigmaProfileFactory, TestData


class MechanicalSystemTestCase(SimpleTestCase):
    """Test cases for the normalized mechanical Hamiltonian."""

    def setUp(self):
        """Set up test dependencies."""
        self.system = MechanicalSystemFactory()
        self.cone = ConeSpecFactory()

    def test_oscillation_bound(self):
        """Test M = amplitude (max - min) = 0.2 for the Arnold potential."""
        self.assertAlmostEqual(self.system.M, 4.0 * TestData.ARNOLD_AMPLITUDE, places=12)

    def test_potential_normalized_to_zero_max(self):
        """Test V(0) = max V = 0."""
        self.assertAlmostEqual(self.system.potential([0.0, 0.0]), 0.0, places=10)
        self.assertAlmostEqual(self.system.potential([0.5, 0.5]), -self.system.M, places=10)

    def test_kinetic_at_base_point(self):
        """Test p1^2/2 - p2^2/2 = 2 at p* = (2, 0)."""
        self.assertEqual(self.system.kinetic(self.cone.p_star), 2.0)

    def test_factory_matches_named_system(self):
        """Test arnold_system builds the same Hamiltonian as the factory."""
        named = arnold_system(TestData.ARNOLD_AMPLITUDE)
        self.assertEqual(named.to_dict(), self.system.to_dict())

    def test_invalid_signature_rejected(self):
        """Test signature entries other than +-1 are rejected."""
        with self.assertRaises(PreconditionError):
            MechanicalSystem(signature=(1, 2))

    def test_frequency_dimension_checked(self):
        """Test each Fourier frequency has the system dimension."""
        with self.assertRaises(PreconditionError):
            MechanicalSystem(signature=(1, -1), terms=(FourierTerm(k=(1, 0, 0), cos=1.0),))

    def test_negative_amplitude_rejected(self):
        """Test the amplitude must be nonnegative."""
        with self.assertRaises(PreconditionError):
            MechanicalSystemFactory(amplitude=-0.1)

    def test_vector_field_signs(self):
        """Test p' = -dH/dq and q' = dH/dp."""
        p = np.array([1.0, 0.5])
        p_dot, q_dot = vector_field(self.system, p, [0.1, 0.0])
        np.testing.assert_allclose(q_dot, [1.0, -0.5])
        expected = self.system.amplitude * 2.0 * math.pi * math.sin(2.0 * math.pi * 0.1)
        self.assertAlmostEqual(p_dot[0], expected, places=12)
        self.assertAlmostEqual(p_dot[1], 0.0, places=14)


class TestIntegrators:
    """Energy, symplecticity and reversibility of the integrators."""

    state0 = ([1.0, 0.3], [0.1, 0.2])

    @pytest.mark.parametrize("scheme", ["leapfrog", "midpoint"])
    def test_energy_drift(self, arnold_system, scheme):
        trajectory = integrate(arnold_system, self.state0, 5.0, 1e-2, scheme=scheme, order=4)
        assert trajectory.max_energy_defect < 1e-6

    def test_monodromy_is_symplectic(self, arnold_system):
        (_, _), monodromy, _ = flow_map(arnold_system, self.state0, 2.0, 1e-2)
        assert symplectic_defect(monodromy) < 1e-10
        assert monodromy_determinant(monodromy) == pytest.approx(1.0, abs=1e-10)

    def test_backward_integration_returns(self, arnold_system):
        forward = integrate(arnold_system, self.state0, 1.5, 1e-2, scheme="leapfrog", order=4)
        backward = integrate(arnold_system, forward.final_state, -1.5, 1e-2, scheme="leapfrog", order=4)
        p, q = backward.final_state
        np.testing.assert_allclose(p, self.state0[0], atol=1e-10)
        np.testing.assert_allclose(q, self.state0[1], atol=1e-10)
        assert backward.times[-1] == -1.5

    def test_run_ends_exactly_at_T(self, arnold_system):
        trajectory = integrate(arnold_system, self.state0, 0.333, 0.1)
        assert trajectory.times[-1] == 0.333
        assert trajectory.times.size == 5

    def test_zero_time_rejected(self, arnold_system):
        with pytest.raises(PreconditionError):
            integrate(arnold_system, self.state0, 0.0, 1e-2)

    def test_nonpositive_step_rejected(self, arnold_system):
        with pytest.raises(PreconditionError):
            integrate(arnold_system, self.state0, 1.0, 0.0)

    def test_leapfrog_needs_separable(self):
        H = quadratic_hamiltonian(np.eye(2))
        with pytest.raises(PreconditionError):
            integrate(H, ([1.0, 0.0], [0.0, 0.0]), 1.0, 0.1, scheme="leapfrog")

    def test_richardson_defect_shrinks(self, arnold_system):
        coarse = richardson_defect(arnold_system, self.state0, 1.0, 0.02)
        fine = richardson_defect(arnold_system, self.state0, 1.0, 0.01)
        assert fine < coarse
        assert fine < 1e-3

    def test_profile_orbit_moves_with_constant_velocity(self, evaluator):
        H = profile_hamiltonian(evaluator, 2.0)
        p0 = evaluator.cone.to_p([0.06, 0.9])
        trajectory = integrate(H, (p0, [0.0, 0.0]), 1.0, 0.1)
        np.testing.assert_allclose(trajectory.p[-1], p0, atol=1e-12)
        np.testing.assert_allclose(trajectory.displacement, evaluator.gradient(2.0, p0), atol=1e-10)


class SigmaComposedTestCase(SimpleTestCase):
    """Test cases for F = c sigma(H) W_1."""

    def setUp(self):
        """Set up test dependencies."""
        self.system = MechanicalSystemFactory()
        self.cone = ConeSpecFactory()
        self.params = ModelParamsFactory()
        self.composed = sigma_compose(self.system, SigmaProfileFactory(), self.cone, self.params)

    def test_infeasible_window_rejected(self):
        """Test e_hi above kinetic(p*) - M = 1.8 is infeasible."""
        with self.assertRaises(WindowInfeasibleError):
            sigma_compose(self.system, SigmaProfile(1.8, 1.9, 3.0), self.cone, self.params)

    def test_degenerate_window_rejected(self):
        """Test e_hi must exceed e_lo."""
        with self.assertRaises(PreconditionError):
            SigmaProfile(0.3, 0.3, 3.0)

    def test_levels_below_and_above_window(self):
        """Test F = 0 below e_lo and F = c above e_hi near p*."""
        q = np.zeros(2)
        self.assertEqual(self.composed.value(np.array([0.5, 0.1]), q), 0.0)
        self.assertAlmostEqual(self.composed.value(np.array([1.0, 0.2]), q), 3.0, places=12)

    def test_zero_off_cone(self):
        """Test F vanishes for momenta outside the cone."""
        self.assertEqual(self.composed.value(np.array([-1.0, 0.0]), np.zeros(2)), 0.0)

    def test_gradient_matches_difference_quotient(self):
        """Test dF/dp and dF/dq against central differences."""
        p = np.array([1.0, 0.7])
        q = np.zeros(2)
        grad_p, grad_q = self.composed.gradient(p, q)
        h = 1e-6
        for i in range(2):
            step = np.zeros(2)
            step[i] = h
            dp = (self.composed.value(p + step, q) - self.composed.value(p - step, q)) / (2.0 * h)
            dq = (self.composed.value(p, q + step) - self.composed.value(p, q - step)) / (2.0 * h)
            self.assertAlmostEqual(grad_p[i], dp, delta=1e-5 * (1.0 + abs(dp)))
            self.assertAlmostEqual(grad_q[i], dq, delta=1e-5 * (1.0 + abs(dq)))

    def test_hessian_matches_gradient_differences(self):
        """Test the (p, q) Hessian against differences of the gradient."""
        p = np.array([1.0, 0.7])
        q = np.array([0.05, -0.03])
        hess = self.composed.hessian(p, q)
        h = 1e-6
        for i in range(4):
            step = np.zeros(4)
            step[i] = h
            plus = np.concatenate(self.composed.gradient(p + step[:2], q + step[2:]))
            minus = np.concatenate(self.composed.gradient(p - step[:2], q - step[2:]))
            np.testing.assert_allclose(hess[:, i], (plus - minus) / (2.0 * h), atol=1e-4)
