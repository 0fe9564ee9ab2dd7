"""
Comprehensive tests for the lab management command.
Tests both happy path and edge cases for suite runs, report envelopes, exit codes and determinism.
"""
import json
from io import StringIO

import pytest
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from laboratory.exceptions import ConfigurationError
from laboratory.management.commands.lab import parse_seed
from laboratory.services.experiment_services import SECTION_S_VALUES, ExperimentService
from laboratory.tests.factories import TestData
from torus_lab.utils.output_utils import read_jsonl


def run_lab(*args, **options):
    out = StringIO()
    err = StringIO()
    call_command("lab", *args, stdout=out, stderr=err, **options)
    return out.getvalue(), err.getvalue()


def read_json(path):
    with path.open(encoding="utf-8") as handle:
        return json.load(handle)


class ParseSeedTestCase(SimpleTestCase):
    """Test cases for --seed parsing."""

    def test_accepts_full_range(self):
        """Test 0 and 2^64 - 1 are accepted."""
        self.assertEqual(parse_seed("0"), 0)
        self.assertEqual(parse_seed(str(2 ** 64 - 1)), 2 ** 64 - 1)
        self.assertIsNone(parse_seed(None))

    def test_rejects_out_of_range(self):
        """Test negative and oversized seeds raise ConfigurationError."""
        with self.assertRaises(ConfigurationError):
            parse_seed("-1")
        with self.assertRaises(ConfigurationError):
            parse_seed(str(2 ** 64))

    def test_rejects_non_integer(self):
        """Test text seeds raise ConfigurationError."""
        with self.assertRaises(ConfigurationError):
            parse_seed("abc")


class TestLabCommand:
    """End-to-end suite runs through call_command."""

    def test_verify_model_success(self, lab_output):
        stdout, _ = run_lab("verify-model", out=str(lab_output))
        report = read_json(lab_output / "report.json")
        assert report["responseCode"] == "00"
        assert report["data"]["failed"] == 0
        assert report["data"]["config"]["c"] == TestData.C
        assert (lab_output / "summary.csv").read_text().startswith("check,subject,passed,value")
        assert "verify-model passed" in stdout

    def test_invalid_config_exits_two(self, lab_output, tmp_path):
        config = tmp_path / "invalid.json"
        config.write_text(json.dumps(TestData.INVALID_CONFIG), encoding="utf-8")
        with pytest.raises(CommandError) as excinfo:
            run_lab("verify-lemma", config=str(config), out=str(lab_output))
        assert excinfo.value.returncode == 2
        failure = read_json(lab_output / "failure.json")
        assert failure["responseCode"] == "02"
        assert "Theorem hypothesis" in failure["responseDescription"]
        assert failure["data"]["error"] == "ConfigurationError"
        assert not (lab_output / "report.json").exists()

    def test_malformed_json_exits_two(self, lab_output, tmp_path):
        config = tmp_path / "broken.json"
        config.write_text("{not json", encoding="utf-8")
        with pytest.raises(CommandError) as excinfo:
            run_lab("verify-model", config=str(config), out=str(lab_output))
        assert excinfo.value.returncode == 2

    def test_missing_config_exits_two(self, lab_output, tmp_path):
        with pytest.raises(CommandError) as excinfo:
            run_lab("verify-model", config=str(tmp_path / "absent.json"), out=str(lab_output))
        assert excinfo.value.returncode == 2

    def test_bad_seed_exits_two(self, lab_output):
        with pytest.raises(CommandError) as excinfo:
            run_lab("verify-model", seed="-5", out=str(lab_output))
        assert excinfo.value.returncode == 2
        assert read_json(lab_output / "failure.json")["responseCode"] == "02"

    def test_bad_thread_count_exits_two(self, lab_output):
        with pytest.raises(CommandError) as excinfo:
            run_lab("verify-model", threads=0, out=str(lab_output))
        assert excinfo.value.returncode == 2

    def test_export_plots_files(self, lab_output):
        run_lab("export-plots", out=str(lab_output))
        plots = lab_output / "plots"
        for name in ("cone.csv", "dual_cone.csv", "figure_cone.csv", "u_hat.csv", "u_hat_eps.csv",
                     "profile_surface_s1.csv"):
            assert (plots / name).exists(), name
        for s in SECTION_S_VALUES:
            assert (plots / f"profile_section_s{s:g}.csv").exists()
        summary = (lab_output / "summary.csv").read_text().splitlines()
        assert summary[0] == "file,rows"

    def test_same_seed_gives_identical_bytes(self, tmp_path):
        first, second = tmp_path / "first", tmp_path / "second"
        run_lab("verify-model", seed="7", out=str(first))
        run_lab("verify-model", seed="7", out=str(second))
        for name in ("summary.csv", "report.json"):
            assert (first / name).read_bytes() == (second / name).read_bytes()

    @pytest.mark.slow
    def test_verify_profile_success(self, lab_output):
        run_lab("verify-profile", out=str(lab_output))
        assert read_json(lab_output / "report.json")["responseCode"] == "00"

    @pytest.mark.slow
    def test_verify_lemma_success(self, lab_output):
        run_lab("verify-lemma", out=str(lab_output))
        report = read_json(lab_output / "report.json")
        assert report["responseCode"] == "00"
        reports = read_jsonl(lab_output / "reports.jsonl")
        assert len(reports) == len(ExperimentService.load_config().s_values)
        assert all(r["passed"] for r in reports)

    @pytest.mark.slow
    def test_arnold_success(self, lab_output):
        run_lab("arnold", out=str(lab_output), threads=2)
        report = read_json(lab_output / "report.json")
        assert report["responseCode"] == "00"
        orbits = read_jsonl(lab_output / "orbits.jsonl")
        certified = [o for o in orbits if o["source"] != "direct"]
        assert len(certified) >= len(TestData.ORBIT_CLASSES) * len(TestData.WINDOWS)
        assert all(o["certified"] for o in certified)
        assert (lab_output / "checks.csv").exists()


class LoadConfigTestCase(SimpleTestCase):
    """Test cases for ExperimentService.load_config."""

    def test_default_config(self):
        """Test the Arnold default loads with its four orbit classes."""
        config = ExperimentService.load_config()
        self.assertEqual(config.c, TestData.C)
        self.assertEqual([tuple(a) for a in config.orbit_classes], list(TestData.ORBIT_CLASSES))
        self.assertEqual(config.windows, TestData.WINDOWS)

    def test_override_keeps_other_fields(self):
        """Test threads and seed overrides leave the rest untouched."""
        config = ExperimentService.load_config()
        changed = config.override(threads=3, seed=11)
        self.assertEqual((changed.threads, changed.seed), (3, 11))
        self.assertEqual(changed.c, config.c)

    def test_non_object_rejected(self):
        """Test a JSON list is not a configuration."""
        with self.assertRaises(ConfigurationError):
            ExperimentService.load_config(data=[1, 2, 3])

    def test_unknown_suite_rejected(self):
        """Test run() rejects suite names outside the registry."""
        with self.assertRaises(ConfigurationError):
            ExperimentService.run("verify-everything", ExperimentService.load_config(), None)
