"""
Experiment Services

Configuration loading and the six laboratory suites. Each suite writes its
artifacts through a ResultSink, returns the data for the success envelope, and
raises InvariantViolation after its artifacts are on disk when a check fails.
"""
import logging
import traceback
from dataclasses import dataclass, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from rest_framework.exceptions import ParseError
from rest_framework.parsers import JSONParser

from laboratory.exceptions import ConfigurationError, InfeasibleClassError, InvariantViolation, LabError
from laboratory.serializers import (
    ConeSpecSerializer,
    CriticalPointReportSerializer,
    ExperimentConfigSerializer,
    ModelParamsSerializer,
    OrbitRecordSerializer,
)
from laboratory.services.common import CheckResult, sobol_points
from laboratory.services.cone_geometry import ConeSpec, HomologyClass, cone_rays, figure_cone
from laboratory.services.critical_points import (
    cutoff_region_check,
    find_plus_point,
    gradient_range_claim_check,
    modulus_formula_check,
    morse_bott_check,
    report_summary,
    trace_plus_branch,
)
from laboratory.services.dynamics import (
    MechanicalSystem,
    SigmaProfile,
    arnold_potential_terms,
    sigma_compose,
)
from laboratory.services.model_functions import (
    ModelParams,
    model_blocks,
    second_derivative_bound_check,
    sign_pattern_check,
    smooth_curve,
    u_hat_jet,
)
from laboratory.services.orbit_search import (
    OrbitRecord,
    cutoff_leak_check,
    dense_scan,
    direct_search,
    integrable_oracle_defect,
    integrable_orbit,
    period_map_check,
    refine_orbit,
)
from laboratory.services.profile_family import (
    WINDOW_CENTERS,
    ProfileEvaluator,
    bracket_samples,
    section_curve,
    surface_grid,
)
from torus_lab.utils.output_utils import ResultSink

logger = logging.getLogger(__name__)

SUITES = ("verify-model", "verify-profile", "verify-lemma", "scan-orbits", "arnold", "export-plots")

DEFAULT_S_VALUES = (-5.0, -3.0, -1.0, -0.5, 0.0, 0.5, 1.0, 3.0, 5.0)
ARNOLD_CLASSES = ((1, 0), (2, 1), (2, -1), (3, 1))
ARNOLD_WINDOWS = ((0.2, 0.3), (0.45, 0.55), (0.9, 1.0))
ARNOLD_AMPLITUDE = 0.05
SECTION_S_VALUES = (-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0)

JUNCTION_TOL = 1e-12
MONOTONE_TOL = 1e-9
BLOCK_IDENTITY_TOL = 1e-10
CONTINUITY_TOL = 1e-10
S_MONOTONE_TOL = 1e-8
ORACLE_TOL = 1e-10
LEAK_SAMPLES = 10_000
EXPLORATORY_STARTS = 16

CHECK_HEADER = ("check", "subject", "passed", "value")


def default_config_data() -> Dict[str, Any]:
    """Arnold cone, c = 3, the theorem class (1, 0) and the four orbit classes."""
    return {
        "cone": {"A": [[1.0, 1.0], [-1.0, 1.0]], "p_star": [2.0, 0.0], "R": 100.0},
        "model": {},
        "c": 3.0,
        "alphas": [[1, 0]],
        "s_values": list(DEFAULT_S_VALUES),
        "orbit_classes": [list(alpha) for alpha in ARNOLD_CLASSES],
        "windows": [list(window) for window in ARNOLD_WINDOWS],
        "potential": {
            "signature": [1, -1],
            "terms": [{"k": list(t.k), "cos": t.cos, "sin": t.sin} for t in arnold_potential_terms()],
            "amplitude": ARNOLD_AMPLITUDE,
        },
    }


def _error_messages(errors, prefix: str = "") -> List[str]:
    if isinstance(errors, dict):
        messages = []
        for key, value in errors.items():
            messages.extend(_error_messages(value, f"{prefix}{key}." if key != "non_field_errors" else prefix))
        return messages
    if isinstance(errors, list):
        messages = []
        for index, value in enumerate(errors):
            nested = isinstance(value, (dict, list))
            messages.extend(_error_messages(value, f"{prefix}{index}." if nested else prefix))
        return messages
    return [f"{prefix.rstrip('.') or 'config'}: {errors}"]


def _plain_errors(errors):
    if isinstance(errors, dict):
        return {str(k): _plain_errors(v) for k, v in errors.items()}
    if isinstance(errors, list):
        return [_plain_errors(v) for v in errors]
    return str(errors)


@dataclass(frozen=True)
class ExperimentConfig:
    """A validated experiment configuration with its domain objects built."""

    cone: ConeSpec
    params: ModelParams
    c: float
    alphas: Tuple[HomologyClass, ...]
    s_values: Tuple[float, ...]
    orbit_classes: Tuple[HomologyClass, ...]
    windows: Tuple[Tuple[float, float], ...]
    system: Optional[MechanicalSystem]
    step: float
    order: int
    smoothing_radius: float
    multistart: int
    uniqueness_seeds: int
    threads: int
    seed: int
    output_dir: Optional[str] = None

    @classmethod
    def from_validated(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        potential = data.get("potential")
        return cls(
            cone=data["cone"]["geometry"],
            params=data["model"]["params"],
            c=float(data["c"]),
            alphas=tuple(data["alpha_classes"]),
            s_values=tuple(float(s) for s in data["s_values"]) or DEFAULT_S_VALUES,
            orbit_classes=tuple(data["orbit_class_list"]),
            windows=tuple((float(lo), float(hi)) for lo, hi in data["windows"]),
            system=potential["system"] if potential else None,
            step=float(data["integrator"]["step"]),
            order=int(data["integrator"]["order"]),
            smoothing_radius=float(data["smoothing_radius"]),
            multistart=int(data["multistart"]),
            uniqueness_seeds=int(data["uniqueness_seeds"]),
            threads=int(data["threads"]),
            seed=int(data["seed"]),
            output_dir=data.get("output_dir"),
        )

    def override(self, threads: Optional[int] = None, seed: Optional[int] = None) -> "ExperimentConfig":
        return replace(
            self,
            threads=self.threads if threads is None else int(threads),
            seed=self.seed if seed is None else int(seed),
        )

    def evaluator(self) -> ProfileEvaluator:
        return ProfileEvaluator(self.cone, self.params, self.c, smoothing_radius=self.smoothing_radius)

    def composed(self, window: Tuple[float, float]):
        return sigma_compose(self.system, SigmaProfile(window[0], window[1], self.c), self.cone, self.params)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "cone": ConeSpecSerializer(self.cone).data,
            "model": ModelParamsSerializer(self.params).data,
            "c": self.c,
            "alphas": [list(alpha) for alpha in self.alphas],
            "s_values": list(self.s_values),
            "orbit_classes": [list(alpha) for alpha in self.orbit_classes],
            "windows": [list(window) for window in self.windows],
            "potential": self.system.to_dict() if self.system is not None else None,
            "integrator": {"step": self.step, "order": self.order},
            "smoothing_radius": self.smoothing_radius,
            "multistart": self.multistart,
            "uniqueness_seeds": self.uniqueness_seeds,
            "seed": self.seed,
        }


class CheckLedger:
    """Collects named check outcomes for summary.csv and the final verdict."""

    def __init__(self, suite: str):
        self.suite = suite
        self.rows: List[Tuple[str, str, bool, Any]] = []
        self.failures: List[Dict[str, Any]] = []

    def record(self, check: str, subject: str, result, value: Any = "", witness: Any = None) -> bool:
        passed = bool(result)
        if isinstance(result, CheckResult) and witness is None:
            witness = result.witness
        self.rows.append((check, subject, passed, value))
        if not passed:
            self.failures.append({"check": check, "subject": subject, "value": value, "witness": witness})
            logger.warning(f"{self.suite}: check {check} failed for {subject} (value={value})")
        return passed

    def write(self, sink: ResultSink):
        sink.write_csv("summary.csv", CHECK_HEADER, self.rows)

    def raise_on_failure(self):
        if self.failures:
            first = self.failures[0]
            raise InvariantViolation(
                first["check"],
                f"{self.suite}: {len(self.failures)} check(s) failed, first {first['check']} for {first['subject']}",
                witness=self.failures,
            )

    def summary(self) -> Dict[str, Any]:
        return {"suite": self.suite, "checks": len(self.rows), "failed": len(self.failures)}


class ExperimentService:
    """Service class for loading configurations and running laboratory suites."""

    @staticmethod
    def load_config(path: Optional[str] = None, data: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
        """
        Parse and validate an experiment configuration

        Args:
            path: JSON file; when both path and data are None the Arnold default is used
            data: already parsed configuration

        Returns:
            ExperimentConfig

        Raises:
            ConfigurationError: unreadable file, invalid JSON or failed validation
        """
        if data is None and path is None:
            data = default_config_data()
        elif data is None:
            try:
                with open(path, "rb") as stream:
                    data = JSONParser().parse(stream)
            except OSError as e:
                raise ConfigurationError(f"Cannot read config {path}: {e}")
            except ParseError as e:
                raise ConfigurationError(f"Config {path} is not valid JSON: {e.detail}")
        if not isinstance(data, dict):
            raise ConfigurationError("Config must be a JSON object")

        serializer = ExperimentConfigSerializer(data=data)
        if not serializer.is_valid():
            errors = _plain_errors(serializer.errors)
            logger.warning(f"Config validation failed: {errors}")
            raise ConfigurationError(
                "Invalid experiment configuration: " + "; ".join(_error_messages(errors)),
                witness=errors,
            )
        return ExperimentConfig.from_validated(serializer.validated_data)

    @staticmethod
    def run(suite: str, config: ExperimentConfig, sink: ResultSink) -> Dict[str, Any]:
        """
        Run one suite and return the data for its success envelope

        Note: failures are raised only after summary.csv and the suite's JSONL are written.
        """
        handlers = {
            "verify-model": ExperimentService.verify_model,
            "verify-profile": ExperimentService.verify_profile,
            "verify-lemma": ExperimentService.verify_lemma,
            "scan-orbits": ExperimentService.scan_orbits,
            "arnold": ExperimentService.arnold,
            "export-plots": ExperimentService.export_plots,
        }
        if suite not in handlers:
            raise ConfigurationError(f"Unknown suite {suite!r}; expected one of {', '.join(SUITES)}")
        logger.info(f"Running suite {suite} with seed {config.seed} on {config.threads} thread(s)")
        try:
            data = handlers[suite](config, sink)
        except LabError:
            raise
        except Exception as e:
            logger.error(f"Unexpected error in suite {suite}: {str(e)}")
            logger.error(f"Full traceback: {traceback.format_exc()}")
            raise
        data["config"] = config.to_dict()
        return data

    # ---- suites -------------------------------------------------------------------------

    @staticmethod
    def verify_model(config: ExperimentConfig, sink: ResultSink) -> Dict[str, Any]:
        params = config.params
        ledger = CheckLedger("verify-model")

        for junction in params.junctions:
            left = u_hat_jet(np.nextafter(junction, -np.inf), params)
            right = u_hat_jet(junction, params)
            mismatch = max(abs(float(left[0]) - float(right[0])), abs(float(left[1]) - float(right[1])))
            ledger.record("junction_c1", f"x={junction:.17g}", mismatch < JUNCTION_TOL, mismatch)

        curve = smooth_curve(params)
        lowest = float(np.min(curve.first))
        witness = float(curve.x[int(np.argmin(curve.first))])
        ledger.record("monotone", "u_hat_eps'", lowest >= -MONOTONE_TOL, lowest, witness)
        ledger.record("sign_pattern", "u_hat_eps''", sign_pattern_check(curve, params))
        bound = second_derivative_bound_check(curve, params)
        ledger.record("concavity_bound", "u_hat_eps''", bound, bound.details.get("value", bound.details.get("bound")))

        blocks = model_blocks(params)
        n = config.cone.n
        rng = np.random.default_rng(config.seed)
        for s in (1.0, 2.0, 5.0):
            y = -rng.uniform(0.0, 1.0, size=(334, n))
            d_s = float(params.d_s(s))
            error = float(np.max(np.abs(blocks.U(y + d_s, s)[0] - blocks.V(y, s)[0])))
            ledger.record("block_identity", f"s={s:g}", error < BLOCK_IDENTITY_TOL, error)

            k = max(abs(s), 1.0)
            directions = np.abs(rng.normal(size=(64, n)))
            directions /= np.linalg.norm(directions, axis=1)[:, None]
            R = config.cone.R
            plateau = directions * R * (1.0 - d_s - (params.b_edge + 8.0 * params.eps) / k)
            support = directions * R * (1.0 - d_s)
            plateau_ok = bool(np.all(blocks.W(plateau, s, R)[0] == 1.0))
            support_ok = bool(np.all(blocks.W(support, s, R)[0] == 0.0))
            ledger.record("w_plateau", f"s={s:g}", plateau_ok)
            ledger.record("w_support", f"s={s:g}", support_ok)

        ledger.write(sink)
        ledger.raise_on_failure()
        return ledger.summary()

    @staticmethod
    def verify_profile(config: ExperimentConfig, sink: ResultSink) -> Dict[str, Any]:
        evaluator = config.evaluator()
        raw = evaluator.raw()
        cone = config.cone
        n = cone.n
        ledger = CheckLedger("verify-profile")

        Y = 1.5 * sobol_points(n, 200, config.seed)
        for center in WINDOW_CENTERS:
            middle = raw.F_jet(center, Y)[0]
            for side in (-1e-12, 1e-12):
                jump = float(np.max(np.abs(raw.F_jet(center + side, Y)[0] - middle)))
                ledger.record("regime_continuity", f"s={center:g}{'-' if side < 0 else '+'}", jump < CONTINUITY_TOL, jump)

        grid = set(np.round(np.linspace(-5.0, 5.0, 51), 12).tolist())
        for center in evaluator.windows:
            grid.update((center + evaluator.smoothing_radius * np.linspace(-1.0, 1.0, 11)).tolist())
        P = bracket_samples(cone, count=16, seed=config.seed)
        worst, witness = np.inf, None
        for s in sorted(grid):
            for p in P:
                slope = evaluator.s_derivative(s, p)
                if slope < worst:
                    worst, witness = slope, {"s": s, "p": p.tolist()}
        ledger.record("s_monotone", f"{len(grid)}x{len(P)} samples", worst >= -S_MONOTONE_TOL, worst, witness)

        # finite differences straddling each window edge
        radius = evaluator.smoothing_radius
        for center in evaluator.windows:
            worst, witness = np.inf, None
            for edge in (center - radius, center + radius):
                for h in (radius / 50.0, 1e-9):
                    for p in P:
                        slope = (evaluator.value(edge + h, p) - evaluator.value(edge - h, p)) / (2.0 * h)
                        if slope < worst:
                            worst, witness = slope, {"s": edge, "h": h, "p": p.tolist()}
            ledger.record("s_monotone_edge", f"s*={center:g}", worst >= -S_MONOTONE_TOL, worst, witness)

        boundary = []
        rng = np.random.default_rng(config.seed)
        for i in range(n):
            face = rng.uniform(0.0, 1.5, size=(32, n))
            face[:, i] = 0.0
            boundary.append(face)
        outside = np.abs(rng.normal(size=(32, n)))
        outside *= (cone.R * rng.uniform(1.0, 1.5, size=32) / np.linalg.norm(outside, axis=1))[:, None]
        boundary.append(outside)
        boundary_p = cone.to_p(np.vstack(boundary))
        for s in (-3.0, -0.5, 0.5, 3.0):
            largest = float(np.max(np.abs(evaluator.values(s, boundary_p))))
            ledger.record("compact_support", f"s={s:g}", largest == 0.0, largest)

        ledger.write(sink)
        ledger.raise_on_failure()
        return ledger.summary()

    @staticmethod
    def verify_lemma(config: ExperimentConfig, sink: ResultSink) -> Dict[str, Any]:
        evaluator = config.evaluator()
        ledger = CheckLedger("verify-lemma")
        reports = []
        slopes = {}
        for alpha in config.alphas:
            for s in config.s_values:
                report = find_plus_point(
                    evaluator, s, alpha,
                    uniqueness_seeds=config.uniqueness_seeds,
                    multistart=config.multistart,
                    seed=config.seed,
                    threads=config.threads,
                )
                reports.append(report)
                summary = report_summary(report)
                ledger.record("critical_point_report", f"alpha={alpha} s={s:g}", report.passed,
                              summary["action"], {"failed": report.failed_flags(), "s": s})
                hessian = evaluator.hessian(s, report.p_plus)
                ledger.record("morse_bott", f"alpha={alpha} s={s:g}", morse_bott_check(0.5 * (hessian + hessian.T)))
                if evaluator.window_of(s) is None:
                    region = cutoff_region_check(evaluator, s, alpha, seed=config.seed)
                    ledger.record("cutoff_region", f"alpha={alpha} s={s:g}", region, region.details["max_action"])
            _, slope = trace_plus_branch(evaluator, alpha, config.s_values, threads=config.threads)
            slopes[str(alpha)] = slope

        if config.cone.n == 2:
            coverage = gradient_range_claim_check(config.params)
            ledger.record("gradient_coverage", "20x20 grid", coverage, coverage.details["failures"])
        modulus = modulus_formula_check(config.params, seed=config.seed)
        ledger.record("modulus_formula", "seed region", modulus, modulus.details["max_relative_error"])

        sink.write_jsonl("reports.jsonl", (CriticalPointReportSerializer(r).data for r in reports))
        ledger.write(sink)
        ledger.raise_on_failure()
        return {**ledger.summary(), "reports": len(reports), "plus_branch_slope": slopes}

    @staticmethod
    def _orbit_search(config: ExperimentConfig, ledger: CheckLedger):
        """Dense scan per seeded class, direct search for classes without an integrable seed."""
        system = config.system
        records: List[OrbitRecord] = []
        exploratory: List[OrbitRecord] = []
        for alpha in config.orbit_classes:
            try:
                integrable_orbit(alpha, config.windows[0][0], system.signature)
            except InfeasibleClassError:
                logger.info(f"Class {alpha} has no integrable seed; searching directly")
                for window in config.windows:
                    energy = 0.5 * (window[0] + window[1])
                    found = direct_search(system, alpha, energy, n_starts=EXPLORATORY_STARTS,
                                          seed=config.seed, step=config.step, order=config.order)
                    for record in found:
                        record.window = window
                    exploratory.extend(found)
                continue
            scan = dense_scan(system, alpha, config.windows, step=config.step, order=config.order,
                              threads=config.threads)
            for record in scan.records:
                ledger.record("orbit_certificate", f"alpha={alpha} window={record.window}",
                              record.certified, record.shooting_residual,
                              {k: v for k, v in record.flags.items() if not v})
            for window in scan.unresolved:
                ledger.record("orbit_found", f"alpha={alpha} window={window}", False, witness=list(window))
            records.extend(scan.records)
        return records, exploratory

    @staticmethod
    def _orbit_rows(records: List[OrbitRecord], extra=None):
        for record in records:
            row = [
                str(record.alpha), record.window[0], record.window[1], record.energy, record.period,
                record.shooting_residual, record.monodromy_determinant, record.source, record.certified,
            ]
            if extra is not None:
                row.extend(extra(record))
            yield row

    @staticmethod
    def scan_orbits(config: ExperimentConfig, sink: ResultSink) -> Dict[str, Any]:
        if config.system is None or not config.windows:
            raise ConfigurationError("scan-orbits needs a potential and at least one energy window")
        ledger = CheckLedger("scan-orbits")
        records, exploratory = ExperimentService._orbit_search(config, ledger)
        sink.write_jsonl("orbits.jsonl", (OrbitRecordSerializer(r).data for r in [*records, *exploratory]))
        sink.write_csv(
            "summary.csv",
            ("alpha", "e_lo", "e_hi", "energy", "period", "residual", "determinant", "source", "certified"),
            ExperimentService._orbit_rows([*records, *exploratory]),
        )
        ledger.raise_on_failure()
        return {**ledger.summary(), "orbits": len(records), "exploratory": len(exploratory)}

    @staticmethod
    def arnold(config: ExperimentConfig, sink: ResultSink) -> Dict[str, Any]:
        if config.system is None or not config.windows:
            raise ConfigurationError("arnold needs a potential and at least one energy window")
        ledger = CheckLedger("arnold")
        composed = {window: config.composed(window) for window in config.windows}

        records, exploratory = ExperimentService._orbit_search(config, ledger)

        flat = config.system.with_amplitude(0.0)
        for alpha in config.orbit_classes:
            for window in config.windows:
                energy = 0.5 * (window[0] + window[1])
                try:
                    seed = integrable_orbit(alpha, energy, flat.signature)
                except InfeasibleClassError:
                    continue
                p0, q0, period = refine_orbit(flat, alpha, energy, seed.p0 * (1.0 + 1e-3), seed.q0,
                                              seed.period * (1.0 + 1e-3), step=config.step, order=config.order)
                refined = replace(seed, p0=p0, q0=q0, period=period)
                defect = integrable_oracle_defect(refined, flat.signature)
                ledger.record("integrable_oracle", f"alpha={alpha} energy={energy:g}", defect < ORACLE_TOL, defect)

        period_checks = {}
        for record in records:
            check = period_map_check(composed[record.window], record, step=config.step, order=config.order)
            period_checks[id(record)] = check
            ledger.record("period_map", f"alpha={record.alpha} window={record.window}",
                          check, check.details["closure_residual"])

        if config.cone.n == 2:
            for alpha in config.alphas:
                for window, F in composed.items():
                    leak = cutoff_leak_check(F, alpha, samples=LEAK_SAMPLES, seed=config.seed)
                    ledger.record("cutoff_leak", f"alpha={alpha} window={window}", leak, leak.details["margin"])

        def period_columns(record):
            check = period_checks.get(id(record))
            if check is None:
                return ["", ""]
            return [check.details["f_period"], check.details["closure_residual"]]

        sink.write_jsonl("orbits.jsonl", (OrbitRecordSerializer(r).data for r in [*records, *exploratory]))
        sink.write_csv(
            "summary.csv",
            ("alpha", "e_lo", "e_hi", "energy", "period", "residual", "determinant", "source", "certified",
             "f_period", "f_closure"),
            ExperimentService._orbit_rows([*records, *exploratory], period_columns),
        )
        sink.write_csv("checks.csv", CHECK_HEADER, ledger.rows)
        ledger.raise_on_failure()
        return {**ledger.summary(), "orbits": len(records), "exploratory": len(exploratory)}

    @staticmethod
    def export_plots(config: ExperimentConfig, sink: ResultSink) -> Dict[str, Any]:
        written = []

        def csv(name, header, rows):
            rows = list(rows)
            sink.write_csv(f"plots/{name}", header, rows)
            written.append((name, len(rows)))

        cones = [("cone.csv", "dual_cone.csv", config.cone)]
        if config.cone.n == 2:
            cones.append(("figure_cone.csv", "figure_dual_cone.csv", figure_cone(config.cone.R)))
        for primal_name, dual_name, cone in cones:
            generators, dual = cone_rays(cone)
            csv(primal_name, ("ray", *[f"x{i + 1}" for i in range(cone.n)]),
                ([i + 1, *row] for i, row in enumerate(generators)))
            csv(dual_name, ("ray", *[f"x{i + 1}" for i in range(cone.n)]),
                ([i + 1, *row] for i, row in enumerate(dual)))

        params = config.params
        x = np.linspace(-0.05, params.b_edge + 0.05, 2001)
        value, first, second = u_hat_jet(x, params)
        csv("u_hat.csv", ("x", "u", "du", "d2u"), zip(x, value, first, second))
        curve = smooth_curve(params)
        csv("u_hat_eps.csv", ("x", "u", "du", "d2u"), curve.to_rows(stride=max(1, curve.x.size // 2000)))

        evaluator = config.evaluator()
        t = np.linspace(0.0, 2.0, 401)
        for s in SECTION_S_VALUES:
            csv(f"profile_section_s{s:g}.csv", ("t", "F"), zip(t, section_curve(evaluator, s, t)))
        if config.cone.n == 2:
            csv("profile_surface_s1.csv", ("y1", "y2", "H"), surface_grid(evaluator, 1.0).tolist())

        sink.write_csv("summary.csv", ("file", "rows"), written)
        return {"suite": "export-plots", "files": [name for name, _ in written]}
