"""
Comprehensive tests for orbit search services.
Tests both happy path and edge cases for integrable seeds, shooting, continuation and the cutoff diagnostics.
"""
import math

import numpy as np
import pytest
from django.test import SimpleTestCase

from laboratory.exceptions import InfeasibleClassError, PreconditionError
from laboratory.services.dynamics import SigmaProfile, integrate, sigma_compose
from laboratory.services.orbit_search import (
    SOURCE_CONTINUATION,
    SOURCE_SEED,
    cutoff_leak_check,
    dense_scan,
    direct_search,
    find_orbit,
    homology_class,
    integrable_oracle_defect,
    integrable_orbit,
    period_map_check,
    predicted_f_period,
    refine_orbit,
    shoot,
)
from laboratory.tests.factories import (
    ConeSpecFactory,
    HomologyClassFactory,
    MechanicalSystemFactory,
    ModelParamsFactory,
    SigmaProfileFactory,
    TestData,
)

SIGNATURE = (1, -1)


class IntegrableOrbitTestCase(SimpleTestCase):
    """Test cases for the closed-form orbits at zero potential."""

    def test_theorem_class_seed(self):
        """Test class (1, 0) at E = 1/4 has T = sqrt(2) and p0 = (1/sqrt(2), 0)."""
        record = integrable_orbit((1, 0), 0.25, SIGNATURE)
        self.assertAlmostEqual(record.period, math.sqrt(2.0), places=15)
        np.testing.assert_allclose(record.p0, [1.0 / math.sqrt(2.0), 0.0], atol=1e-15)
        self.assertTrue(record.certified)
        self.assertEqual(record.source, SOURCE_SEED)

    def test_null_class_infeasible(self):
        """Test class (1, 1) has sum sigma alpha^2 = 0 and no orbit."""
        with self.assertRaises(InfeasibleClassError):
            integrable_orbit((1, 1), 0.25, SIGNATURE)

    def test_negative_energy_infeasible(self):
        """Test a timelike class needs positive energy under signature (1, -1)."""
        with self.assertRaises(InfeasibleClassError):
            integrable_orbit((2, 1), -0.5, SIGNATURE)

    def test_signature_dimension_checked(self):
        """Test the signature length must match the class."""
        with self.assertRaises(PreconditionError):
            integrable_orbit((1, 0), 0.25, (1, -1, 1))

    def test_seed_closes_under_integration(self):
        """Test the closed form closes in its class at amplitude zero."""
        system = MechanicalSystemFactory(amplitude=0.0)
        alpha = HomologyClassFactory(alpha=(2, 1))
        record = integrable_orbit(alpha, 0.5, SIGNATURE)
        residual = shoot(system, alpha, record.initial_state, record.period, step=1e-2)
        self.assertLess(float(np.linalg.norm(residual)), 1e-12)

    def test_shoot_needs_positive_period(self):
        """Test shooting rejects T <= 0."""
        with self.assertRaises(PreconditionError):
            shoot(MechanicalSystemFactory(), (1, 0), ([1.0, 0.0], [0.0, 0.0]), 0.0)


class TestShooting:
    """Refinement, continuation and certification."""

    def test_zero_amplitude_returns_seed(self, arnold_system):
        record = find_orbit(arnold_system, (1, 0), 0.25, amplitude=0.0)
        assert record.source == SOURCE_SEED
        assert record.period == math.sqrt(2.0)

    def test_refine_recovers_closed_form(self, arnold_system):
        free = arnold_system.with_amplitude(0.0)
        seed = integrable_orbit((1, 0), 0.25, SIGNATURE)
        alpha = seed.alpha
        p, q, period = refine_orbit(free, alpha, 0.25, seed.p0 + 1e-3, seed.q0, seed.period, step=1e-2)
        record = integrable_orbit(alpha, 0.25, SIGNATURE)
        record.p0, record.period = p, period
        assert integrable_oracle_defect(record, SIGNATURE) < 1e-10

    @pytest.mark.integration
    def test_continued_orbit_is_certified(self, arnold_system):
        record = find_orbit(arnold_system, (1, 0), 0.25)
        assert record.source == SOURCE_CONTINUATION
        assert record.certified, record.flags
        assert record.homology == (1, 0)
        assert abs(record.monodromy_determinant - 1.0) < 1e-7

    def test_homology_of_integrated_loop(self, arnold_system):
        record = integrable_orbit((1, 0), 0.25, SIGNATURE)
        trajectory = integrate(arnold_system.with_amplitude(0.0), record.initial_state, record.period, 1e-2)
        assert homology_class(trajectory) == (1, 0)

    def test_degenerate_window_rejected(self, arnold_system):
        with pytest.raises(PreconditionError):
            dense_scan(arnold_system, (1, 0), [(0.3, 0.3)])

    @pytest.mark.slow
    def test_direct_search_at_zero_amplitude(self, arnold_system):
        records = direct_search(arnold_system.with_amplitude(0.0), (1, 0), 0.25, n_starts=4)
        for record in records:
            assert record.certified, record.flags
            assert record.period == pytest.approx(math.sqrt(2.0), abs=1e-8)


@pytest.mark.slow
class TestAcceptanceScan:
    """One certified orbit per window for every default class."""

    @pytest.mark.parametrize("alpha", TestData.ORBIT_CLASSES)
    def test_windows_resolved(self, arnold_system, alpha):
        result = dense_scan(arnold_system, alpha, TestData.WINDOWS)
        assert result.unresolved == []
        assert len(result.records) == len(TestData.WINDOWS)
        for record in result.records:
            assert record.certified, record.flags
            assert record.window[0] < record.energy < record.window[1]


class SigmaCompositionTestCase(SimpleTestCase):
    """Test cases for the period map and cutoff diagnostics of F."""

    def setUp(self):
        """Set up test dependencies."""
        self.system = MechanicalSystemFactory()
        self.sigma = SigmaProfileFactory()
        self.composed = sigma_compose(self.system, self.sigma, ConeSpecFactory(), ModelParamsFactory())

    def test_predicted_period_at_window_centre(self):
        """Test T_F = T_H (e_hi - e_lo) / (c sigma'(1/2))."""
        slope = float(SigmaProfile.step(0.5)[1])
        expected = 1.0 * self.sigma.width / (self.sigma.c * slope)
        self.assertAlmostEqual(predicted_f_period(self.sigma, 1.0, 0.25), expected, places=12)

    def test_predicted_period_stationary_at_edge(self):
        """Test sigma' = 0 at e_lo means no finite period."""
        with self.assertRaises(PreconditionError):
            predicted_f_period(self.sigma, 1.0, self.sigma.e_lo)

    @pytest.mark.integration
    def test_period_map_closes(self):
        """Test the F-flow closes after the predicted period."""
        record = find_orbit(self.system, (1, 0), 0.25)
        result = period_map_check(self.composed, record)
        self.assertTrue(result.passed, result.details)

    def test_period_map_at_zero_amplitude(self):
        """Test the period map on the closed-form orbit of the free system."""
        free = self.system.with_amplitude(0.0)
        composed = sigma_compose(free, SigmaProfile(0.2, 0.3, 3.0), ConeSpecFactory(), ModelParamsFactory())
        record = integrable_orbit((1, 0), 0.25, SIGNATURE)
        result = period_map_check(composed, record, step=1e-2)
        self.assertTrue(result.passed, result.details)

    def test_cutoff_leak(self):
        """Test the cutoff region has no speed combination near alpha = (1, 0)."""
        result = cutoff_leak_check(self.composed, (1, 0), samples=2000)
        self.assertTrue(result.passed, result.details)
        self.assertLessEqual(result.details["required_radius"], 100.0)

    def test_cutoff_leak_needs_large_radius(self):
        """Test R below 10 max(e_hi + M, |alpha|) is a precondition error."""
        composed = sigma_compose(self.system, self.sigma, ConeSpecFactory(R=5.0), ModelParamsFactory())
        with self.assertRaises(PreconditionError):
            cutoff_leak_check(composed, (1, 0), samples=100)

    def test_cutoff_leak_needs_plane(self):
        """Test the leak check is limited to n = 2."""
        cone = ConeSpecFactory(A=np.eye(3).tolist(), p_star=[1.0, 1.0, 1.0])
        system = MechanicalSystemFactory(signature=(1, 1, 1), terms=())
        composed = sigma_compose(system, SigmaProfile(0.2, 0.3, 3.0), cone, ModelParamsFactory())
        with self.assertRaises(PreconditionError):
            cutoff_leak_check(composed, (1, 0, 0))
