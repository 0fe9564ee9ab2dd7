"""
Comprehensive tests for experiment configuration serializers.
Tests both happy path and edge cases for section defaults, precondition checks and output formatting.
"""
import numpy as np
from django.conf import settings
from django.test import SimpleTestCase, override_settings

from laboratory.serializers import (
    ConeSpecSerializer,
    CriticalPointReportSerializer,
    ExperimentConfigSerializer,
    OrbitRecordSerializer,
    PotentialSerializer,
)
from laboratory.services.cone_geometry import ConeSpec
from laboratory.services.critical_points import find_plus_point
from laboratory.services.experiment_services import default_config_data
from laboratory.services.orbit_search import integrable_orbit
from laboratory.tests.factories import ExperimentConfigDataFactory, ProfileEvaluatorFactory, TestData


class ExperimentConfigSerializerTestCase(SimpleTestCase):
    """Test cases for ExperimentConfigSerializer."""

    def setUp(self):
        """Set up test dependencies."""
        self.valid_data = ExperimentConfigDataFactory()

    def test_default_config_is_valid(self):
        """Test the built-in Arnold configuration validates."""
        serializer = ExperimentConfigSerializer(data=default_config_data())
        self.assertTrue(serializer.is_valid(), serializer.errors)
        self.assertIsInstance(serializer.validated_data["cone"]["geometry"], ConeSpec)
        self.assertEqual(len(serializer.validated_data["orbit_class_list"]), 4)

    def test_factory_config_is_valid(self):
        """Test the factory configuration validates."""
        serializer = ExperimentConfigSerializer(data=self.valid_data)
        self.assertTrue(serializer.is_valid(), serializer.errors)
        self.assertEqual(serializer.validated_data["c"], TestData.C)

    def test_omitted_sections_use_settings_defaults(self):
        """Test model and integrator fall back to settings.LAB."""
        data = {key: value for key, value in self.valid_data.items() if key not in ("model",)}
        serializer = ExperimentConfigSerializer(data=data)
        self.assertTrue(serializer.is_valid(), serializer.errors)
        self.assertEqual(serializer.validated_data["model"]["delta"], settings.LAB["DELTA"])
        self.assertEqual(serializer.validated_data["integrator"]["step"], settings.LAB["INTEGRATOR_STEP"])
        self.assertEqual(serializer.validated_data["threads"], settings.LAB["THREADS"])

    @override_settings(LAB={**settings.LAB, "MULTISTART": 5})
    def test_settings_override_reaches_defaults(self):
        """Test overridden LAB settings are read at validation time."""
        data = {key: value for key, value in self.valid_data.items() if key != "multistart"}
        serializer = ExperimentConfigSerializer(data=data)
        self.assertTrue(serializer.is_valid(), serializer.errors)
        self.assertEqual(serializer.validated_data["multistart"], 5)

    def test_default_height_when_c_omitted(self):
        """Test c defaults to the largest pairing plus one."""
        data = {**self.valid_data, "c": None}
        serializer = ExperimentConfigSerializer(data=data)
        self.assertTrue(serializer.is_valid(), serializer.errors)
        self.assertEqual(serializer.validated_data["c"], 3.0)

    def test_theorem_hypothesis_failure(self):
        """Test alpha = (2, 1) with c = 3 reports the hypothesis."""
        serializer = ExperimentConfigSerializer(data=TestData.INVALID_CONFIG)
        self.assertFalse(serializer.is_valid())
        self.assertIn("alphas", serializer.errors)
        self.assertIn("Theorem hypothesis", str(serializer.errors["alphas"][0]))

    def test_nonpositive_height_rejected(self):
        """Test c <= 0 is rejected."""
        serializer = ExperimentConfigSerializer(data={**self.valid_data, "c": 0.0})
        self.assertFalse(serializer.is_valid())
        self.assertIn("c", serializer.errors)

    def test_reversed_window_rejected(self):
        """Test e_lo >= e_hi is rejected."""
        serializer = ExperimentConfigSerializer(data={**self.valid_data, "windows": [[0.3, 0.2]]})
        self.assertFalse(serializer.is_valid())
        self.assertIn("windows", serializer.errors)

    def test_window_above_feasible_energy_rejected(self):
        """Test a window above kinetic(p*) - M is rejected."""
        serializer = ExperimentConfigSerializer(data={**self.valid_data, "windows": [[1.8, 1.9]]})
        self.assertFalse(serializer.is_valid())
        self.assertIn("windows", serializer.errors)

    def test_windows_require_potential(self):
        """Test orbit classes without a potential are rejected."""
        data = {key: value for key, value in self.valid_data.items() if key != "potential"}
        serializer = ExperimentConfigSerializer(data=data)
        self.assertFalse(serializer.is_valid())
        self.assertIn("potential", serializer.errors)

    def test_class_dimension_mismatch(self):
        """Test classes must match the cone dimension."""
        serializer = ExperimentConfigSerializer(data={**self.valid_data, "alphas": [[1, 0, 0]]})
        self.assertFalse(serializer.is_valid())
        self.assertIn("alphas", serializer.errors)

    def test_smoothing_radius_range(self):
        """Test the s-smoothing radius must lie in (0, 1/4)."""
        serializer = ExperimentConfigSerializer(data={**self.valid_data, "smoothing_radius": 0.5})
        self.assertFalse(serializer.is_valid())
        self.assertIn("smoothing_radius", serializer.errors)

    def test_invalid_integrator_order(self):
        """Test only orders 2 and 4 are accepted."""
        serializer = ExperimentConfigSerializer(data={**self.valid_data, "integrator": {"order": 3}})
        self.assertFalse(serializer.is_valid())
        self.assertIn("integrator", serializer.errors)

    def test_invalid_model_constants(self):
        """Test the scale separation eps <= delta / 100 is enforced."""
        serializer = ExperimentConfigSerializer(data={**self.valid_data, "model": {"delta": 1e-2, "eps": 1e-3}})
        self.assertFalse(serializer.is_valid())
        self.assertIn("model", serializer.errors)


class SectionSerializerTestCase(SimpleTestCase):
    """Test cases for the cone and potential sections."""

    def test_singular_matrix_rejected(self):
        """Test a singular A is reported on the matrix field."""
        serializer = ConeSpecSerializer(data={"A": [[1.0, 2.0], [2.0, 4.0]], "p_star": [1.0, 2.0]})
        self.assertFalse(serializer.is_valid())
        self.assertIn("A", serializer.errors)

    def test_non_square_matrix_rejected(self):
        """Test A must be square."""
        serializer = ConeSpecSerializer(data={"A": [[1.0, 0.0]], "p_star": [1.0, 0.0]})
        self.assertFalse(serializer.is_valid())
        self.assertIn("A", serializer.errors)

    def test_base_point_length_checked(self):
        """Test p_star must have n components."""
        serializer = ConeSpecSerializer(data={"A": TestData.ARNOLD_A, "p_star": [2.0]})
        self.assertFalse(serializer.is_valid())
        self.assertIn("p_star", serializer.errors)

    def test_invalid_signature(self):
        """Test signature entries other than +-1 are rejected."""
        serializer = PotentialSerializer(data={"signature": [1, 0]})
        self.assertFalse(serializer.is_valid())
        self.assertIn("signature", serializer.errors)

    def test_potential_builds_system(self):
        """Test the potential section builds a MechanicalSystem."""
        serializer = PotentialSerializer(data=default_config_data()["potential"])
        self.assertTrue(serializer.is_valid(), serializer.errors)
        self.assertAlmostEqual(serializer.validated_data["system"].M, 0.2, places=12)


class TestOutputSerializers:
    """Reports and orbit records serialize to plain data."""

    def test_critical_point_report(self):
        report = find_plus_point(ProfileEvaluatorFactory(), 3.0, (1, 0), uniqueness_seeds=0, multistart=0)
        data = CriticalPointReportSerializer(report).data
        assert data["alpha"] == [1, 0]
        assert data["minus_candidates"] == []
        assert all(isinstance(x, float) for x in data["p_plus"])
        assert data["passed"] is True

    def test_orbit_record(self):
        record = integrable_orbit((1, 0), 0.25, (1, -1))
        data = OrbitRecordSerializer(record).data
        assert data["alpha"] == [1, 0]
        assert data["window"] is None
        assert data["homology"] == [1, 0]
        assert np.allclose(data["monodromy"], record.monodromy)
        assert data["certified"] is True
