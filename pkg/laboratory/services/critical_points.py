"""
Critical Point Services

Locates and certifies the critical points of the shifted action
p -> H_s(p) - <p, alpha>: the distinguished maximum p+ near the plateau edge,
the secondary candidates p-, and the Morse-Bott criterion for tori of
fiberwise orbits.
"""
import logging
import math
import traceback
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate as sp_integrate
from scipy import optimize

from laboratory.exceptions import AsymmetryError, NoConvergenceError, PreconditionError
from laboratory.services.common import CheckResult, newton_solve, ordered_map, sobol_points
from laboratory.services.cone_geometry import ConeSpec, HomologyClass, check_cone_separation
from laboratory.services.dynamics import FiberwiseHamiltonian, Trajectory
from laboratory.services.model_functions import ModelParams, model_blocks
from laboratory.services.profile_family import ProfileEvaluator

logger = logging.getLogger(__name__)

GRADIENT_TOL = 1e-9
NEWTON_TOL = 1e-12
EIGENVALUE_CEILING = -1e-8
UNIQUENESS_SPREAD = 1e-7
SEED_RADIUS = 0.3
MINUS_DEDUP = 1e-7
DEFAULT_UNIQUENESS_SEEDS = 20
DEFAULT_MULTISTART = 100


@dataclass
class CriticalPointReport:
    """Certificate for p+ at one value of s, with the minus candidates found alongside."""

    s: float
    alpha: HomologyClass
    p_plus: np.ndarray
    gradient_residual: float
    hessian_eigenvalues: np.ndarray
    action_value: float
    threshold: float
    newton_iterations: int
    minus_candidates: List[Tuple[np.ndarray, float]] = field(default_factory=list)
    p_hat: Optional[np.ndarray] = None
    concavity_gap: Optional[float] = None
    uniqueness_spread: float = 0.0
    hessian_trusted: bool = True

    @property
    def flags(self) -> Dict[str, bool]:
        return {
            "residual": self.gradient_residual < GRADIENT_TOL,
            "negative_definite": float(np.max(self.hessian_eigenvalues)) < EIGENVALUE_CEILING,
            "action_above_threshold": self.action_value > self.threshold,
            "minus_actions_negative": all(action < 0 for _, action in self.minus_candidates),
            "unique": self.uniqueness_spread < UNIQUENESS_SPREAD,
            "concave": self.concavity_gap is None or self.concavity_gap < 0,
        }

    @property
    def passed(self) -> bool:
        return all(self.flags.values())

    def failed_flags(self) -> List[str]:
        return [name for name, ok in self.flags.items() if not ok]


# ---- Gaussian seed ---------------------------------------------------------------------


def gaussian_level(delta: float, g_norm: float) -> float:
    """
    Level C in (e^-1/2, 1] of the Gaussian bump whose gradient modulus equals g_norm.

    Solves C^2 (-ln C) = delta g^2 / 2 on the branch where the gradient map is one-to-one.

    Raises:
        PreconditionError: g_norm outside the covered range (e delta)^-1/2
    """
    limit = 1.0 / math.sqrt(math.e * delta)
    if g_norm >= limit:
        raise PreconditionError(
            f"target gradient {g_norm:.6g} outside the covered range (e delta)^-1/2 = {limit:.6g}"
        )
    if g_norm == 0:
        return 1.0
    target = 0.5 * delta * g_norm ** 2
    return optimize.brentq(lambda C: -C * C * math.log(C) - target, math.exp(-0.5), 1.0, xtol=1e-15)


def gaussian_seed(params: ModelParams, g: np.ndarray, edge: Optional[float] = None) -> np.ndarray:
    """Point z with D exp(-|z - edge|^2 / (2 delta)) = g."""
    edge = params.b_edge + 3.0 * params.eps if edge is None else edge
    g = np.asarray(g, dtype=float)
    level = gaussian_level(params.delta, float(np.linalg.norm(g)))
    return edge - params.delta * g / level


@dataclass(frozen=True)
class RegimeMap:
    """Affine map z = scale * y + offset into the shared Gaussian coordinate, with gradient factor kappa."""

    scale: float
    offset: float
    kappa: float

    def to_y(self, z):
        return (np.asarray(z, dtype=float) - self.offset) / self.scale

    def to_z(self, y):
        return self.scale * np.asarray(y, dtype=float) + self.offset


def regime_map(evaluator: ProfileEvaluator, s: float) -> RegimeMap:
    c = evaluator.c
    d = evaluator.params.d_plateau
    if s >= 1.0:
        return RegimeMap(scale=s, offset=0.0, kappa=(c + s) * s)
    if s >= 0.0:
        return RegimeMap(scale=1.0, offset=-(1.0 - s) * (1.0 - d), kappa=c + 1.0)
    if s >= -1.0:
        return RegimeMap(scale=1.0, offset=-(1.0 - d), kappa=c + 1.0)
    t = abs(s)
    return RegimeMap(scale=t, offset=d - t, kappa=(c + t) * t)


# ---- p+ --------------------------------------------------------------------------------


def _y_residual(evaluator: ProfileEvaluator, s: float, beta: np.ndarray):
    cone = evaluator.cone
    A = cone.A_norm

    def residual(y):
        _, grad_p, hess_p = evaluator.jet(s, cone.to_p(y))
        return A.T @ grad_p - beta, A.T @ hess_p @ A

    return residual


def _stall_floor(cone: ConeSpec) -> float:
    """Largest y-residual that still keeps the p-gradient residual under GRADIENT_TOL."""
    smallest = float(np.linalg.svd(cone.A_norm, compute_uv=False)[-1])
    return 0.5 * GRADIENT_TOL * smallest


def _solve_from(evaluator: ProfileEvaluator, s: float, beta: np.ndarray, y0: np.ndarray, step_cap: float):
    return newton_solve(
        _y_residual(evaluator, s, beta),
        y0,
        tol=NEWTON_TOL,
        max_iter=60,
        max_step=step_cap,
        region=lambda y: bool(np.all(y > 0)),
        accept=_stall_floor(evaluator.cone),
    )


def _junction_clearance(evaluator: ProfileEvaluator, mapping: RegimeMap, y: np.ndarray) -> float:
    params = evaluator.params
    images = np.array(params.junctions) + 3.0 * params.eps
    z = mapping.to_z(y)
    return float(np.min(np.abs(z[:, None] - images[None, :])))


def _plateau_point(evaluator: ProfileEvaluator, s: float, y_plus: np.ndarray, mapping: RegimeMap, tol: float = 1e-10):
    """Nearest point beyond y+ where every partial derivative of G_s has dropped to zero."""
    cone = evaluator.cone
    lo = y_plus.copy()
    hi = y_plus + evaluator.params.sqrt_delta / mapping.scale

    def flat(y):
        grad_y = cone.A_norm.T @ evaluator.gradient(s, cone.to_p(y))
        return grad_y <= tol

    for _ in range(8):
        if np.all(flat(hi)):
            break
        hi = hi + evaluator.params.sqrt_delta / mapping.scale
    for _ in range(50):
        middle = 0.5 * (lo + hi)
        done = flat(middle)
        hi = np.where(done, middle, hi)
        lo = np.where(done, lo, middle)
    return hi


def find_plus_point(
    evaluator: ProfileEvaluator,
    s: float,
    alpha,
    uniqueness_seeds: int = DEFAULT_UNIQUENESS_SEEDS,
    multistart: int = DEFAULT_MULTISTART,
    seed: int = 0,
    threads: int = 1,
) -> CriticalPointReport:
    """
    Solve DH_s(p) = alpha near the plateau edge and certify the solution.

    Args:
        uniqueness_seeds: perturbed seeds used to probe uniqueness of p+
        multistart: quasi-random seeds in the sector for the minus candidates (0 disables)

    Returns:
        CriticalPointReport

    Raises:
        PreconditionError: alpha outside the dual cone, <p*, alpha> > c, or alpha too large for delta
        NoConvergenceError: Newton did not converge from the Gaussian seed
    """
    alpha = alpha if isinstance(alpha, HomologyClass) else HomologyClass(tuple(alpha))
    cone = evaluator.cone
    params = evaluator.params
    try:
        check_cone_separation(cone, alpha, evaluator.c)
        beta = cone.beta(alpha)
        mapping = regime_map(evaluator, s)
        edge = params.b_edge + 3.0 * params.eps
        z0 = gaussian_seed(params, beta / mapping.kappa, edge)
        y0 = mapping.to_y(z0)
        step_cap = 0.25 * params.sqrt_delta / mapping.scale

        result = _solve_from(evaluator, s, beta, y0, step_cap)
        if not result.converged:
            raise NoConvergenceError(
                f"Newton for p+ did not converge at s={s}, alpha={alpha}: {result.message} "
                f"(residual {result.residual_norm:.3e})",
                witness={"s": s, "y": result.x.tolist()},
            )
        y_plus = result.x
        p_plus = cone.to_p(y_plus)
        value, grad, hess = evaluator.jet(s, p_plus)
        eigenvalues = np.linalg.eigvalsh(0.5 * (hess + hess.T))
        threshold = evaluator.c - cone.pairing(alpha)
        action = action_of_torus(value, p_plus, alpha)

        spread = _uniqueness_spread(evaluator, s, beta, z0, mapping, edge, step_cap, y_plus, uniqueness_seeds, seed)
        y_hat = _plateau_point(evaluator, s, y_plus, mapping)
        p_hat = cone.to_p(y_hat)
        gap = evaluator.value(s, p_hat) - value - float((p_hat - p_plus) @ alpha.as_array())
        minus = minus_candidates(evaluator, s, alpha, p_plus, count=multistart, seed=seed, threads=threads)

        report = CriticalPointReport(
            s=float(s),
            alpha=alpha,
            p_plus=p_plus,
            gradient_residual=float(np.linalg.norm(grad - alpha.as_array())),
            hessian_eigenvalues=eigenvalues,
            action_value=action,
            threshold=threshold,
            newton_iterations=result.iterations,
            minus_candidates=minus,
            p_hat=p_hat,
            concavity_gap=gap,
            uniqueness_spread=spread,
            hessian_trusted=_junction_clearance(evaluator, mapping, y_plus) > 2.0 * params.eps,
        )
        logger.info(
            f"p+ at s={s}, alpha={alpha}: action={action:.12g} threshold={threshold:.12g} "
            f"iterations={result.iterations} minus={len(minus)}"
        )
        return report
    except (PreconditionError, NoConvergenceError):
        raise
    except Exception as e:
        logger.error(f"Unexpected error while locating p+ at s={s}: {str(e)}")
        logger.error(f"Full traceback: {traceback.format_exc()}")
        raise


def _uniqueness_spread(evaluator, s, beta, z0, mapping, edge, step_cap, y_plus, count, seed) -> float:
    if count <= 0:
        return 0.0
    rng = np.random.default_rng(seed)
    radius = SEED_RADIUS * evaluator.params.sqrt_delta
    spread = 0.0
    for _ in range(count):
        direction = rng.normal(size=z0.size)
        direction /= np.linalg.norm(direction)
        z = z0 + radius * rng.uniform() * direction
        z = edge - np.abs(edge - z)
        result = _solve_from(evaluator, s, beta, mapping.to_y(z), step_cap)
        if not result.converged:
            return math.inf
        spread = max(spread, float(np.linalg.norm(result.x - y_plus)))
    return spread


def minus_candidates(
    evaluator: ProfileEvaluator,
    s: float,
    alpha,
    p_plus: Optional[np.ndarray] = None,
    count: int = DEFAULT_MULTISTART,
    seed: int = 0,
    threads: int = 1,
) -> List[Tuple[np.ndarray, float]]:
    """
    Secondary critical points with H_s > 0 found from quasi-random sector seeds.

    The list holds what the multistart found, sorted by action; it is not
    claimed to be exhaustive.

    Seeds fill (0, 1 + d)^n in normalized coordinates rather than the whole
    sector (0, R)^n. Beyond that box H_s is constant on the plateau, where
    DH_s = 0 cannot equal alpha, until the cutoff annulus near |y| = R, and
    the annulus is covered separately by cutoff_region_check.
    """
    alpha = alpha if isinstance(alpha, HomologyClass) else HomologyClass(tuple(alpha))
    if count <= 0:
        return []
    cone = evaluator.cone
    beta = cone.beta(alpha)
    extent = 1.0 + evaluator.params.d_plateau
    seeds = extent * sobol_points(cone.n, count, seed)
    seeds = np.clip(seeds, 1e-6, None)
    cap = 0.25 * evaluator.params.sqrt_delta

    def solve(y0):
        result = _solve_from(evaluator, s, beta, y0, cap)
        if not result.converged:
            return None
        p = cone.to_p(result.x)
        value, grad, _ = evaluator.jet(s, p)
        if value <= 0 or np.linalg.norm(grad - alpha.as_array()) >= GRADIENT_TOL:
            return None
        return p, action_of_torus(value, p, alpha)

    found = []
    for candidate in ordered_map(solve, list(seeds), threads):
        if candidate is None:
            continue
        p, action = candidate
        if p_plus is not None and np.linalg.norm(p - p_plus) < MINUS_DEDUP * (1.0 + np.linalg.norm(p_plus)):
            continue
        if any(np.linalg.norm(p - other) < MINUS_DEDUP * (1.0 + np.linalg.norm(p)) for other, _ in found):
            continue
        found.append((p, action))
    found.sort(key=lambda item: item[1])
    return found


def trace_plus_branch(evaluator: ProfileEvaluator, alpha, s_values: Sequence[float], threads: int = 1):
    """
    p+ over an s grid without minus search.

    Returns:
        (reports, slope) with slope the largest |p+(s') - p+(s)| / |s' - s| between
        neighbouring grid values that both lie outside the smoothing windows.
    """
    s_values = sorted(float(s) for s in s_values)
    reports = ordered_map(
        lambda s: find_plus_point(evaluator, s, alpha, uniqueness_seeds=0, multistart=0),
        s_values,
        threads,
    )
    slope = 0.0
    for left, right in zip(reports[:-1], reports[1:]):
        if evaluator.window_of(left.s) is not None or evaluator.window_of(right.s) is not None:
            continue
        slope = max(slope, float(np.linalg.norm(right.p_plus - left.p_plus) / (right.s - left.s)))
    return reports, slope


def cutoff_region_check(evaluator: ProfileEvaluator, s: float, alpha, count: int = 1024, seed: int = 0) -> CheckResult:
    """Shifted action is negative on the cutoff annulus |y|/R in [1 - 2 d_s, 1 - d_s] of the sector."""
    alpha = alpha if isinstance(alpha, HomologyClass) else HomologyClass(tuple(alpha))
    cone = evaluator.cone
    d_s = float(evaluator.params.d_s(s))
    cube = sobol_points(cone.n + 1, count, seed)
    directions = -np.log(np.clip(cube[:, :cone.n], 1e-300, None))
    directions /= np.linalg.norm(directions, axis=1)[:, None]
    radii = cone.R * (1.0 - 2.0 * d_s + d_s * cube[:, cone.n])
    Y = directions * radii[:, None]
    P = cone.to_p(Y)
    actions = evaluator.values(s, P) - P @ alpha.as_array()
    worst = int(np.argmax(actions))
    details = {"max_action": float(actions[worst]), "samples": count}
    if actions[worst] >= 0:
        return CheckResult(False, witness=P[worst].tolist(), details=details)
    return CheckResult(True, details=details)


# ---- gradient map claims ---------------------------------------------------------------


def gaussian_bump_jet(y, params: ModelParams):
    """exp(-|y - b 1|^2 / (2 delta)) with gradient and Hessian."""
    y = np.asarray(y, dtype=float)
    shift = y - params.b_edge
    value = math.exp(-float(shift @ shift) / (2.0 * params.delta))
    grad = -shift / params.delta * value
    hess = (np.outer(shift, shift) / params.delta ** 2 - np.eye(y.size) / params.delta) * value
    return value, grad, hess


def gradient_range_claim_check(params: ModelParams, fraction: float = 0.5, n_grid: int = 20) -> CheckResult:
    """
    Newton solves D(Gaussian bump)(y) = g inside the seed region for a polar grid of targets
    g in the positive quadrant with |g| <= fraction * (e delta)^-1/2 (n = 2).
    """
    if not 0 < fraction < 1:
        raise PreconditionError(f"fraction must lie in (0, 1), got {fraction}")
    b, root = params.b_edge, params.sqrt_delta
    limit = fraction / math.sqrt(math.e * params.delta)

    def inside(y):
        return bool(np.all(y < b) and np.linalg.norm(y - b) < root)

    failures = []
    total = 0
    for i in range(1, n_grid + 1):
        for j in range(n_grid):
            radius = limit * i / n_grid
            angle = 0.5 * math.pi * (j + 0.5) / n_grid
            g = radius * np.array([math.cos(angle), math.sin(angle)])
            total += 1

            def residual(y, g=g):
                _, grad, hess = gaussian_bump_jet(y, params)
                return grad - g, hess

            start = np.full(2, b) - 1e-3 * root
            result = newton_solve(
                residual, start, tol=NEWTON_TOL, max_step=0.25 * root, region=inside, accept=0.1 * GRADIENT_TOL
            )
            if not (result.converged and result.residual_norm < GRADIENT_TOL and inside(result.x)):
                failures.append(g.tolist())
    details = {"targets": total, "failures": len(failures), "radius": limit}
    if failures:
        return CheckResult(False, witness=failures[0], details=details)
    return CheckResult(True, details=details)


def modulus_formula_check(params: ModelParams, count: int = 256, seed: int = 0, tol: float = 1e-8) -> CheckResult:
    """|D bump| = C sqrt(2 (-ln C) / delta) at points of the seed region, C the bump level."""
    rng = np.random.default_rng(seed)
    root = params.sqrt_delta
    worst = 0.0
    witness = None
    for _ in range(count):
        offset = -np.abs(rng.normal(size=2))
        offset *= rng.uniform(0.05, 0.95) * root / np.linalg.norm(offset)
        y = params.b_edge + offset
        level, grad, _ = gaussian_bump_jet(y, params)
        predicted = level * math.sqrt(2.0 * (-math.log(level)) / params.delta)
        error = abs(np.linalg.norm(grad) - predicted) / predicted
        if error > worst:
            worst, witness = error, y.tolist()
    return CheckResult(worst < tol, witness=None if worst < tol else witness, details={"max_relative_error": worst})


def solve_product_gradient(params: ModelParams, g, s: float = 1.0) -> np.ndarray:
    """
    y with DU_s(y) = g, seeded by the Gaussian prediction.

    Raises:
        NoConvergenceError: Newton failed
    """
    g = np.asarray(g, dtype=float)
    blocks = model_blocks(params)
    edge = params.b_edge + 3.0 * params.eps
    y0 = gaussian_seed(params, g / s, edge) / s

    def residual(y):
        _, grad, hess = blocks.U(y[None, :], s)
        return grad[0] - g, hess[0]

    result = newton_solve(
        residual, y0, tol=NEWTON_TOL, max_step=0.25 * params.sqrt_delta / s, accept=0.1 * GRADIENT_TOL
    )
    if not result.converged:
        raise NoConvergenceError(f"DU_s(y) = {g.tolist()} not solved: {result.message}", witness=result.x.tolist())
    return result.x


def hessian_dominance_check(evaluator: ProfileEvaluator, y, r_prime: float) -> CheckResult:
    """Strict diagonal dominance and negative definiteness of D^2 U_1 at y with DU_1(y) in C_{id, r'}."""
    y = np.asarray(y, dtype=float)
    _, grad, hess = evaluator.blocks.U(y[None, :], 1.0)
    grad, hess = grad[0], hess[0]
    in_region = bool(np.all(grad > 0) and np.linalg.norm(grad) < r_prime)
    diagonal = np.abs(np.diag(hess))
    off = np.sum(np.abs(hess), axis=1) - diagonal
    dominant = bool(np.all(diagonal > off))
    eigenvalues = np.linalg.eigvalsh(hess)
    negative = bool(np.all(eigenvalues < 0))
    details = {"in_region": in_region, "dominant": dominant, "eigenvalues": eigenvalues.tolist()}
    return CheckResult(in_region and dominant and negative, witness=None, details=details)


# ---- actions and Morse-Bott ------------------------------------------------------------


def action_of_torus(H_value: float, p0, alpha) -> float:
    """H(p0) - <p0, alpha>."""
    alpha = alpha.as_array() if isinstance(alpha, HomologyClass) else np.asarray(alpha, dtype=float)
    return float(H_value - np.asarray(p0, dtype=float) @ alpha)


def loop_action(trajectory: Trajectory, H=None) -> float:
    """
    Integral of H - p.q' over a recorded loop.

    The p.dq part uses the midpoint rule on each step, which is exact for
    fiberwise flows; H uses the recorded energies.
    """
    values = trajectory.energy if H is None else np.array(
        [H.value(p, q) for p, q in zip(trajectory.p, trajectory.q)]
    )
    energy_part = sp_integrate.trapezoid(values, trajectory.times)
    dq = np.diff(trajectory.q, axis=0)
    p_mid = 0.5 * (trajectory.p[1:] + trajectory.p[:-1])
    return float(energy_part - np.sum(p_mid * dq))


def _symmetric(hessian) -> np.ndarray:
    hessian = np.asarray(hessian, dtype=float)
    if hessian.ndim != 2 or hessian.shape[0] != hessian.shape[1]:
        raise PreconditionError(f"Hessian must be square, got shape {hessian.shape}")
    asymmetry = float(np.max(np.abs(hessian - hessian.T))) if hessian.size else 0.0
    if asymmetry > 1e-9:
        raise AsymmetryError(f"Hessian is not symmetric (defect {asymmetry:.3e})", witness=asymmetry)
    return 0.5 * (hessian + hessian.T)


def morse_bott_check(hessian) -> CheckResult:
    """
    Nondegeneracy of a torus of fiberwise orbits: |det D^2 H| > 1e-10 scale^n.

    Raises:
        AsymmetryError: hessian not symmetric within 1e-9
    """
    hessian = _symmetric(hessian)
    n = hessian.shape[0]
    eigenvalues = np.linalg.eigvalsh(hessian)
    determinant = float(np.prod(eigenvalues))
    scale = float(np.max(np.abs(eigenvalues))) if n else 0.0
    passed = scale > 0 and abs(determinant) > 1e-10 * scale ** n
    return CheckResult(passed, details={"determinant": determinant, "scale": scale})


def kernel_dimension(matrix, rtol: float = 1e-9) -> int:
    """Number of singular values below rtol times the largest one."""
    matrix = np.asarray(matrix, dtype=float)
    singular = np.linalg.svd(matrix, compute_uv=False)
    if singular.size == 0 or singular[0] == 0:
        return matrix.shape[1]
    return int(np.sum(singular <= rtol * singular[0]))


def torus_monodromy(hessian, T: float = 1.0) -> np.ndarray:
    """Time-T linearized flow [[I, 0], [T D^2 H, I]] of a fiberwise Hamiltonian, (p, q) ordering."""
    hessian = _symmetric(hessian)
    n = hessian.shape[0]
    monodromy = np.eye(2 * n)
    monodromy[n:, :n] = T * hessian
    return monodromy


def counterexample_hamiltonian(cone: ConeSpec, alpha) -> FiberwiseHamiltonian:
    """
    H(p) = <alpha, p> / <alpha, p*>.

    Every orbit moves with constant velocity alpha / <alpha, p*>, so it closes in
    class alpha only at period <alpha, p*>, and its Hessian vanishes identically.
    """
    alpha = alpha.as_array() if isinstance(alpha, HomologyClass) else np.asarray(alpha, dtype=float)
    pairing = float(alpha @ cone.p_star)
    if pairing == 0:
        raise PreconditionError("alpha is orthogonal to p*")
    n = cone.n
    zero = np.zeros((n, n))
    return FiberwiseHamiltonian(lambda p: (float(alpha @ p) / pairing, alpha / pairing, zero), n)


def report_summary(report: CriticalPointReport) -> Dict[str, Any]:
    return {
        "s": report.s,
        "alpha": str(report.alpha),
        "action": report.action_value,
        "threshold": report.threshold,
        "residual": report.gradient_residual,
        "max_eigenvalue": float(np.max(report.hessian_eigenvalues)),
        "minus_count": len(report.minus_candidates),
        "passed": report.passed,
    }
