"""
Orbit Search Services

Closed orbits of mechanical systems in a prescribed homology class: closed-form
seeds at zero potential, shooting with free period and an energy constraint,
continuation in the potential amplitude, dense energy scans and the
diagnostics for the sigma-composed cutoff Hamiltonian.
"""
import logging
import math
import traceback
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize

from laboratory.exceptions import (
    ContinuationStallError,
    InfeasibleClassError,
    IntegrationError,
    NoConvergenceError,
    NonClosureError,
    PreconditionError,
    RegionViolationError,
)
from laboratory.services.common import CheckResult, ordered_map
from laboratory.services.cone_geometry import HomologyClass
from laboratory.services.dynamics import (
    MechanicalSystem,
    SigmaComposedHamiltonian,
    SigmaProfile,
    Trajectory,
    integrate,
    monodromy_determinant,
)

logger = logging.getLogger(__name__)

SHOOTING_TOL = 1e-8
ENERGY_TOL = 1e-8
CLOSURE_TOL = 1e-6
DETERMINANT_TOL = 1e-7
MAX_CONTINUATION_STEP = 0.05
MULTIPLE_SHOOTING_AMPLITUDE = 0.2
MULTIPLE_SHOOTING_SEGMENTS = 8
SCAN_FRACTIONS = (0.5, 0.75, 0.25, 0.9, 0.1)
CERTIFICATE_POINTS = 100

SOURCE_SEED = "integrable-seed"
SOURCE_CONTINUATION = "continuation"
SOURCE_DIRECT = "direct"


@dataclass
class OrbitRecord:
    """A closed orbit in class alpha on the level {H = energy}."""

    alpha: HomologyClass
    energy: float
    period: float
    p0: np.ndarray
    q0: np.ndarray
    shooting_residual: float
    monodromy: np.ndarray
    continuation_parameter: float
    source: str
    half_step_residual: Optional[float] = None
    energy_defect: float = 0.0
    window: Optional[Tuple[float, float]] = None
    homology: Optional[Tuple[int, ...]] = None
    details: Dict[str, Any] = field(default_factory=dict)

    @property
    def initial_state(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.p0, self.q0

    @property
    def monodromy_determinant(self) -> float:
        return monodromy_determinant(self.monodromy)

    @property
    def flags(self) -> Dict[str, bool]:
        flags = {
            "residual": self.shooting_residual < SHOOTING_TOL,
            "energy": self.energy_defect < ENERGY_TOL,
            "class": self.homology is not None and tuple(self.homology) == tuple(self.alpha),
            "determinant": abs(self.monodromy_determinant - 1.0) < DETERMINANT_TOL,
        }
        if self.half_step_residual is not None:
            flags["half_step"] = self.half_step_residual < 10.0 * max(self.shooting_residual, SHOOTING_TOL)
        if self.window is not None:
            flags["in_window"] = self.window[0] < self.energy < self.window[1]
        return flags

    @property
    def certified(self) -> bool:
        return all(self.flags.values())


@dataclass
class ScanResult:
    records: List[OrbitRecord]
    unresolved: List[Tuple[float, float]]


def _alpha(alpha) -> HomologyClass:
    return alpha if isinstance(alpha, HomologyClass) else HomologyClass(tuple(alpha))


def integrable_orbit(alpha, energy: float, signature: Sequence[int]) -> OrbitRecord:
    """
    Closed form at zero potential: T = sqrt(sum sigma_i alpha_i^2 / (2 energy)), p = sigma alpha / T.

    Raises:
        InfeasibleClassError: sum sigma_i alpha_i^2 and energy differ in sign, or energy = 0
    """
    alpha = _alpha(alpha)
    sigma = np.array(signature, dtype=float)
    if sigma.size != alpha.n:
        raise PreconditionError(f"signature has {sigma.size} entries, class has {alpha.n}")
    a = alpha.as_array()
    kinetic = float(np.sum(sigma * a * a))
    if energy == 0 or kinetic * energy <= 0:
        raise InfeasibleClassError(
            f"class {alpha} has no orbit at energy {energy} for signature {tuple(int(x) for x in sigma)} "
            f"(sum sigma alpha^2 = {kinetic})",
            witness={"kinetic": kinetic, "energy": energy},
        )
    period = math.sqrt(kinetic / (2.0 * energy))
    n = alpha.n
    monodromy = np.eye(2 * n)
    monodromy[n:, :n] = period * np.diag(sigma)
    return OrbitRecord(
        alpha=alpha,
        energy=float(energy),
        period=period,
        p0=sigma * a / period,
        q0=np.zeros(n),
        shooting_residual=0.0,
        monodromy=monodromy,
        continuation_parameter=0.0,
        source=SOURCE_SEED,
        homology=tuple(alpha),
    )


def shoot(system, alpha, state0, T: float, step: float = 1e-3, scheme: str = "auto", order: int = 4) -> np.ndarray:
    """(p(T) - p(0), q(T) - q(0) - alpha) with q lifted."""
    if not T > 0:
        raise PreconditionError(f"period must be positive, got {T}")
    alpha = _alpha(alpha)
    trajectory = integrate(system, state0, T, step, scheme=scheme, order=order)
    p0, q0 = (np.asarray(v, dtype=float) for v in state0)
    p1, q1 = trajectory.final_state
    return np.concatenate([p1 - p0, q1 - q0 - alpha.as_array()])


def homology_class(trajectory: Trajectory, tol: float = CLOSURE_TOL) -> Tuple[int, ...]:
    """
    Integer winding of a closed loop.

    Raises:
        NonClosureError: p does not close, or the q displacement is not integral, within tol
    """
    p_gap = float(np.linalg.norm(trajectory.p[-1] - trajectory.p[0]))
    displacement = trajectory.displacement
    winding = np.rint(displacement)
    defect = float(np.max(np.abs(displacement - winding)))
    if p_gap >= tol or defect >= tol:
        raise NonClosureError(
            f"trajectory does not close: |dp| = {p_gap:.3e}, winding defect = {defect:.3e}",
            witness={"p_gap": p_gap, "defect": defect},
        )
    return tuple(int(w) for w in winding)


class ShootingProblem:
    """
    Periodic boundary-value problem in class alpha with free period and an energy row.

    Unknowns are p0, q0 without its first component (pinned for phase), the interior
    segment states and T. Residuals are the segment matching conditions plus H(x0) - energy.
    """

    def __init__(self, system: MechanicalSystem, alpha: HomologyClass, energy: float, q_pin: float,
                 segments: int = 1, step: float = 1e-3, scheme: str = "auto", order: int = 4):
        self.system = system
        self.alpha = alpha
        self.energy = energy
        self.q_pin = q_pin
        self.segments = segments
        self.step = step
        self.scheme = scheme
        self.order = order
        self.n = system.n
        self._cache_x = None
        self._cache = None

    @property
    def size(self) -> int:
        n = self.n
        return (2 * n - 1) + 2 * n * (self.segments - 1) + 1

    def pack(self, p0, q0, interior: Sequence[np.ndarray], T: float) -> np.ndarray:
        return np.concatenate([p0, q0[1:], *interior, [T]])

    def unpack(self, x: np.ndarray):
        n = self.n
        p0 = x[:n]
        q0 = np.concatenate([[self.q_pin], x[n:2 * n - 1]])
        interior = [x[2 * n - 1 + 2 * n * k: 2 * n - 1 + 2 * n * (k + 1)] for k in range(self.segments - 1)]
        return np.concatenate([p0, q0]), interior, float(x[-1])

    def _evaluate(self, x: np.ndarray):
        if self._cache_x is not None and np.array_equal(x, self._cache_x):
            return self._cache
        n, K = self.n, self.segments
        start, interior, T = self.unpack(x)
        if not T > 0:
            raise NoConvergenceError(f"shooting period left the positive axis (T={T})")
        starts = [start, *interior]
        lift = np.concatenate([np.zeros(n), self.alpha.as_array()])
        rows = 2 * n * K + 1
        residual = np.empty(rows)
        jac = np.zeros((rows, self.size))

        def columns(k):
            if k == 0:
                keep = [i for i in range(2 * n) if i != n]
                return np.arange(2 * n - 1), keep
            offset = 2 * n - 1 + 2 * n * (k - 1)
            return np.arange(offset, offset + 2 * n), list(range(2 * n))

        for k, state in enumerate(starts):
            trajectory = integrate(self.system, (state[:n], state[n:]), T / K, self.step,
                                   scheme=self.scheme, order=self.order, variational=True)
            end = np.concatenate(trajectory.final_state)
            target_index = (k + 1) % K
            target = starts[target_index] + (lift if k == K - 1 else 0.0)
            block = slice(2 * n * k, 2 * n * (k + 1))
            residual[block] = end - target
            cols, keep = columns(k)
            jac[block, cols] += trajectory.monodromy[:, keep]
            t_cols, t_keep = columns(target_index)
            jac[block, t_cols] -= np.eye(2 * n)[:, t_keep]
            p_dot_q_dot = np.concatenate(self._field(end))
            jac[block, -1] = p_dot_q_dot / K

        residual[-1] = self.system.value(start[:n], start[n:]) - self.energy
        h_p, h_q = self.system.gradient(start[:n], start[n:])
        cols, keep = columns(0)
        jac[-1, cols] = np.concatenate([h_p, h_q])[keep]

        self._cache_x = x.copy()
        self._cache = (residual, jac)
        return self._cache

    def _field(self, state):
        h_p, h_q = self.system.gradient(state[:self.n], state[self.n:])
        return -h_q, h_p

    def residual(self, x):
        return self._evaluate(x)[0]

    def jacobian(self, x):
        return self._evaluate(x)[1]


def refine_orbit(
    system: MechanicalSystem,
    alpha: HomologyClass,
    energy: float,
    p0: np.ndarray,
    q0: np.ndarray,
    T: float,
    segments: int = 1,
    step: float = 1e-3,
    scheme: str = "auto",
    order: int = 4,
):
    """
    Levenberg-Marquardt on the shooting problem from a guess (p0, q0, T).

    Returns:
        (p0, q0, T) of the converged orbit

    Raises:
        NoConvergenceError: the boundary-value residual stayed above tolerance
    """
    problem = ShootingProblem(system, alpha, energy, float(q0[0]), segments, step, scheme, order)
    interior = []
    if segments > 1:
        guess = integrate(system, (p0, q0), T, step, scheme=scheme, order=order)
        count = guess.times.size - 1
        for k in range(1, segments):
            index = int(round(k * count / segments))
            interior.append(np.concatenate([guess.p[index], guess.q[index]]))
    x0 = problem.pack(np.asarray(p0, dtype=float), np.asarray(q0, dtype=float), interior, T)
    try:
        result = optimize.least_squares(
            problem.residual,
            x0,
            jac=problem.jacobian,
            method="lm",
            ftol=1e-14,
            xtol=1e-14,
            gtol=1e-14,
            max_nfev=200,
        )
    except (IntegrationError, NoConvergenceError) as e:
        raise NoConvergenceError(f"shooting failed for class {alpha} at energy {energy}: {e}") from e
    start, _, period = problem.unpack(result.x)
    residual = problem.residual(result.x)
    shooting = float(np.linalg.norm(residual[:-1]))
    if shooting >= SHOOTING_TOL or abs(residual[-1]) >= ENERGY_TOL:
        raise NoConvergenceError(
            f"shooting residual {shooting:.3e} (energy defect {abs(residual[-1]):.3e}) "
            f"above tolerance for class {alpha} at energy {energy}",
            witness={"residual": shooting, "T": period},
        )
    n = system.n
    return start[:n], start[n:], period


def certify(record: OrbitRecord, system: MechanicalSystem, step: float, scheme: str = "auto", order: int = 4) -> OrbitRecord:
    """Recompute residual, monodromy, class, half-step residual and energy defect for a record."""
    trajectory = integrate(system, (record.p0, record.q0), record.period, step,
                           scheme=scheme, order=order, variational=True)
    n = system.n
    end_p, end_q = trajectory.final_state
    residual = np.concatenate([end_p - record.p0, end_q - record.q0 - record.alpha.as_array()])
    record.shooting_residual = float(np.linalg.norm(residual))
    record.monodromy = trajectory.monodromy
    try:
        record.homology = homology_class(trajectory)
    except NonClosureError:
        record.homology = None
        record.details["closure"] = "failed"
    half = shoot(system, record.alpha, (record.p0, record.q0), record.period, 0.5 * step, scheme, order)
    record.half_step_residual = float(np.linalg.norm(half))
    indices = np.linspace(0, trajectory.times.size - 1, CERTIFICATE_POINTS).round().astype(int)
    record.energy_defect = float(np.max(np.abs(trajectory.energy[indices] - record.energy)))
    if record.homology is not None and record.homology != tuple(record.alpha):
        record.details["class_mismatch"] = list(record.homology)
    return record


def find_orbit(
    system: MechanicalSystem,
    alpha,
    energy: float,
    amplitude: Optional[float] = None,
    step: float = 1e-3,
    order: int = 4,
    scheme: str = "auto",
    segments: Optional[int] = None,
) -> OrbitRecord:
    """
    Continue the integrable seed from zero potential to the requested amplitude.

    Args:
        amplitude: target potential strength; defaults to system.amplitude
        segments: shooting segments; defaults to 1, or 8 above amplitude 0.2

    Raises:
        InfeasibleClassError: no integrable seed at this energy
        ContinuationStallError: the continuation step fell below 1e-4 of the amplitude
    """
    alpha = _alpha(alpha)
    target = system.amplitude if amplitude is None else float(amplitude)
    seed = integrable_orbit(alpha, energy, system.signature)
    if target == 0:
        return seed
    try:
        p0, q0, T = seed.p0, seed.q0, seed.period
        reached = 0.0
        increment = min(MAX_CONTINUATION_STEP, target)
        successes = 0
        while reached < target:
            trial = min(reached + increment, target)
            count = segments or (MULTIPLE_SHOOTING_SEGMENTS if trial > MULTIPLE_SHOOTING_AMPLITUDE else 1)
            try:
                p0, q0, T = refine_orbit(system.with_amplitude(trial), alpha, energy, p0, q0, T,
                                         segments=count, step=step, scheme=scheme, order=order)
            except NoConvergenceError as e:
                increment *= 0.5
                successes = 0
                logger.warning(f"Continuation step to amplitude {trial} failed ({e}); halving to {increment}")
                if increment < 1e-4 * target:
                    raise ContinuationStallError(
                        f"continuation stalled at amplitude {reached} for class {alpha} at energy {energy}",
                        last_amplitude=reached,
                        witness={"p0": np.asarray(p0).tolist(), "T": T},
                    ) from e
                continue
            reached = trial
            successes += 1
            if successes >= 3:
                increment = min(2.0 * increment, MAX_CONTINUATION_STEP)
                successes = 0
            logger.debug(f"Continued class {alpha} to amplitude {reached} (T={T:.15g})")

        final = system.with_amplitude(target)
        record = OrbitRecord(
            alpha=alpha,
            energy=float(energy),
            period=T,
            p0=np.asarray(p0, dtype=float),
            q0=np.asarray(q0, dtype=float),
            shooting_residual=math.inf,
            monodromy=np.eye(2 * system.n),
            continuation_parameter=target,
            source=SOURCE_CONTINUATION,
        )
        return certify(record, final, step, scheme, order)
    except (ContinuationStallError, PreconditionError):
        raise
    except Exception as e:
        logger.error(f"Unexpected error during orbit continuation: {str(e)}")
        logger.error(f"Full traceback: {traceback.format_exc()}")
        raise


def direct_search(
    system: MechanicalSystem,
    alpha,
    energy: float,
    n_starts: int = 16,
    seed: int = 0,
    step: float = 1e-3,
    order: int = 4,
) -> List[OrbitRecord]:
    """Random multistart over the energy shell; for classes without an integrable seed."""
    alpha = _alpha(alpha)
    rng = np.random.default_rng(seed)
    a = alpha.as_array()
    records: List[OrbitRecord] = []
    for _ in range(n_starts):
        q0 = np.concatenate([[0.0], rng.uniform(0.0, 1.0, size=system.n - 1)])
        direction = rng.normal(size=system.n)
        kinetic_unit = system.kinetic(direction)
        budget = energy - system.potential(q0)
        if kinetic_unit == 0 or budget / kinetic_unit <= 0:
            continue
        p0 = direction * math.sqrt(budget / kinetic_unit)
        speed = float(np.linalg.norm(system.sigma * p0))
        if speed == 0:
            continue
        T = float(np.linalg.norm(a)) / speed
        try:
            p, q, period = refine_orbit(system, alpha, energy, p0, q0, T, step=step, order=order)
        except NoConvergenceError:
            continue
        if any(abs(r.period - period) < 1e-8 and np.linalg.norm(r.p0 - p) < 1e-6 for r in records):
            continue
        record = OrbitRecord(
            alpha=alpha, energy=float(energy), period=period, p0=p, q0=q,
            shooting_residual=math.inf, monodromy=np.eye(2 * system.n),
            continuation_parameter=system.amplitude, source=SOURCE_DIRECT,
        )
        records.append(certify(record, system, step, order=order))
    logger.info(f"Direct search for class {alpha} at energy {energy}: {len(records)} orbits")
    return records


def dense_scan(
    system: MechanicalSystem,
    alpha,
    windows: Sequence[Tuple[float, float]],
    amplitude: Optional[float] = None,
    step: float = 1e-3,
    order: int = 4,
    threads: int = 1,
) -> ScanResult:
    """
    One orbit with energy strictly inside each window; windows that stall are kept as unresolved.

    Raises:
        PreconditionError: a degenerate window (e_lo >= e_hi)
    """
    alpha = _alpha(alpha)
    windows = [(float(lo), float(hi)) for lo, hi in windows]
    for lo, hi in windows:
        if not hi > lo:
            raise PreconditionError(f"degenerate energy window ({lo}, {hi})")

    def solve(window):
        lo, hi = window
        for fraction in SCAN_FRACTIONS:
            energy = lo + fraction * (hi - lo)
            try:
                record = find_orbit(system, alpha, energy, amplitude=amplitude, step=step, order=order)
            except NoConvergenceError as e:
                logger.warning(f"Scan of class {alpha} at energy {energy} failed: {e}")
                continue
            record.window = window
            return record
        return None

    results = ordered_map(solve, windows, threads)
    records = [record for record in results if record is not None]
    unresolved = [window for window, record in zip(windows, results) if record is None]
    return ScanResult(records=records, unresolved=unresolved)


def predicted_f_period(sigma: SigmaProfile, T_H: float, energy: float) -> float:
    """T_F = T_H (e_hi - e_lo) / (c sigma'(r)) with r the energy's position in the window."""
    _, slope, _ = sigma.step((energy - sigma.e_lo) / sigma.width)
    slope = float(slope)
    if slope <= 0:
        raise PreconditionError(f"energy {energy} lies where sigma' vanishes; the F-orbit is stationary")
    return T_H * sigma.width / (sigma.c * slope)


def period_map_check(composed: SigmaComposedHamiltonian, record: OrbitRecord, step: float = 1e-3,
                     order: int = 4, tol: float = CLOSURE_TOL) -> CheckResult:
    """
    Integrate X_F for the predicted period from the orbit's initial point and measure closure.

    Raises:
        RegionViolationError: the H-orbit leaves the region W_1 = 1
    """
    system = composed.system
    trajectory = integrate(system, (record.p0, record.q0), record.period, step, scheme="auto", order=order)
    cutoff = composed.cutoff(trajectory.p)[0]
    lowest = float(np.min(cutoff))
    if lowest < 1.0 - 1e-9:
        raise RegionViolationError(
            f"orbit leaves the region W_1 = 1 (min W_1 = {lowest:.12g})",
            witness=trajectory.p[int(np.argmin(cutoff))].tolist(),
        )
    T_F = predicted_f_period(composed.sigma, record.period, record.energy)
    # same resolution per H-orbit as the H integration
    f_step = step * T_F / record.period
    flow = integrate(composed, (record.p0, record.q0), T_F, f_step, scheme="midpoint", order=order)
    end_p, end_q = flow.final_state
    residual = float(np.linalg.norm(np.concatenate([
        end_p - record.p0, end_q - record.q0 - record.alpha.as_array(),
    ])))
    details = {"f_period": T_F, "closure_residual": residual, "min_cutoff": lowest}
    return CheckResult(residual < tol, witness=None if residual < tol else [end_p.tolist(), end_q.tolist()],
                       details=details)


def _angular_intervals(kinetic_of_angle, level: float, count: int = 4097) -> List[Tuple[float, float]]:
    """Sub-intervals of (0, pi/2) where kinetic_of_angle <= level, edges refined by brentq."""
    angles = np.linspace(0.0, 0.5 * math.pi, count)
    values = np.array([kinetic_of_angle(t) for t in angles]) - level
    below = values <= 0
    intervals = []
    i = 0
    while i < count:
        if not below[i]:
            i += 1
            continue
        j = i
        while j + 1 < count and below[j + 1]:
            j += 1
        lo = angles[i] if i == 0 else optimize.brentq(lambda t: kinetic_of_angle(t) - level, angles[i - 1], angles[i])
        hi = angles[j] if j == count - 1 else optimize.brentq(lambda t: kinetic_of_angle(t) - level, angles[j], angles[j + 1])
        if hi > lo:
            intervals.append((float(lo), float(hi)))
        i = j + 1
    return intervals


def cutoff_leak_check(composed: SigmaComposedHamiltonian, alpha, samples: int = 10_000, seed: int = 0) -> CheckResult:
    """
    Sampled check that the cutoff region creates no orbits in class alpha (n = 2).

    On the annulus |y|/R in [1 - 2d, 1] with kinetic <= e_hi + M the speed combinations
    q1' +- q2' stay at least 1/2 away from alpha1 +- alpha2; where kinetic > e_hi + M,
    p' vanishes exactly and |q'| < |alpha| / 2.
    """
    alpha = _alpha(alpha)
    cone = composed.cone
    system = composed.system
    if cone.n != 2:
        raise PreconditionError("cutoff leak check is defined for n = 2 only")
    a = alpha.as_array()
    bound = composed.sigma.e_hi + system.M
    required = 10.0 * max(abs(composed.sigma.e_hi) + system.M, float(np.linalg.norm(a)))
    if cone.R < required:
        raise PreconditionError(
            f"cutoff radius R={cone.R:g} is below 10 max(e_hi + M, |alpha|) = {required:g}",
            witness={"R": cone.R, "required": required},
        )
    d = composed.params.d_plateau
    r_lo, r_hi = cone.R * (1.0 - 2.0 * d), cone.R

    def unit(t):
        return np.array([math.cos(t), math.sin(t)])

    def kinetic_of_angle(t):
        return system.kinetic(cone.to_p(unit(t)))

    rng = np.random.default_rng(seed)

    # slivers where kinetic <= bound: the level for the inner radius contains them all
    slivers = _angular_intervals(kinetic_of_angle, bound / r_lo ** 2)
    low_points = []
    if slivers:
        lengths = np.array([hi - lo for lo, hi in slivers])
        attempts = 0
        while len(low_points) < samples and attempts < 50 * samples:
            attempts += 1
            k = rng.choice(len(slivers), p=lengths / lengths.sum())
            theta = rng.uniform(*slivers[k])
            r = rng.uniform(r_lo, r_hi)
            p = cone.to_p(r * unit(theta))
            if system.kinetic(p) <= bound:
                low_points.append(p)
    high_points = []
    attempts = 0
    while len(high_points) < samples and attempts < 50 * samples:
        attempts += 1
        theta = rng.uniform(0.0, 0.5 * math.pi)
        r = rng.uniform(r_lo, r_hi)
        p = cone.to_p(r * unit(theta))
        if system.kinetic(p) > bound:
            high_points.append(p)

    margin = math.inf
    margin_witness = None
    if low_points:
        P = np.array(low_points)
        Q = rng.uniform(0.0, 1.0, size=P.shape)
        _, q_dot, _ = composed.jets(P, Q)
        plus = np.abs(q_dot[:, 0] + q_dot[:, 1] - (a[0] + a[1]))
        minus = np.abs(q_dot[:, 0] - q_dot[:, 1] - (a[0] - a[1]))
        distance = np.maximum(plus, minus)
        worst = int(np.argmin(distance))
        margin = float(distance[worst])
        margin_witness = P[worst].tolist()

    max_speed = 0.0
    max_p_dot = 0.0
    speed_witness = None
    if high_points:
        P = np.array(high_points)
        Q = rng.uniform(0.0, 1.0, size=P.shape)
        _, q_dot, f_q = composed.jets(P, Q)
        speeds = np.linalg.norm(q_dot, axis=1)
        worst = int(np.argmax(speeds))
        max_speed = float(speeds[worst])
        max_p_dot = float(np.max(np.abs(f_q)))
        speed_witness = P[worst].tolist()

    leak_ok = margin >= 0.5
    speed_ok = max_speed < 0.5 * float(np.linalg.norm(a)) and max_p_dot == 0.0
    details = {
        "margin": margin,
        "max_speed": max_speed,
        "max_p_dot": max_p_dot,
        "low_samples": len(low_points),
        "high_samples": len(high_points),
        "required_radius": required,
    }
    witness = None if leak_ok else margin_witness
    if leak_ok and not speed_ok:
        witness = speed_witness
    return CheckResult(leak_ok and speed_ok, witness=witness, details=details)


def integrable_oracle_defect(record: OrbitRecord, signature: Sequence[int]) -> float:
    """Largest deviation of a zero-amplitude record from the closed form."""
    seed = integrable_orbit(record.alpha, record.energy, signature)
    return float(max(
        abs(record.period - seed.period),
        np.max(np.abs(record.p0 - seed.p0)),
    ))
