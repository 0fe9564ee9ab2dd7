"""
Profile Family Services

Cone-adapted profile Hamiltonians H_s(p) = F_s(y) W_s(y), y = A_norm^-1 p,
over the four s-regimes, with the s-smoothing windows around s* in {-1, 0, 1}
and the doubling search for an exhausting bracket.
"""
import logging
import traceback
from typing import Callable, Iterable, Optional, Sequence, Tuple

import numpy as np

from laboratory.exceptions import BracketNotFoundError, PreconditionError, QuadratureError
from laboratory.services.cone_geometry import ConeSpec
from laboratory.services.common import composite_rule, panel_breaks, refine_breaks, sobol_points
from laboratory.services.model_functions import (
    Jet,
    ModelBlocks,
    ModelParams,
    model_blocks,
    smooth_step_jet,
    standard_bump,
)

logger = logging.getLogger(__name__)

DEFAULT_SMOOTHING_RADIUS = 1e-3
WINDOW_CENTERS = (-1.0, 0.0, 1.0)
WINDOW_ORDER = 48
WINDOW_REFINEMENTS = (1, 2, 4, 8, 16, 32)
WINDOW_TOL = 1e-9


def _outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[:, :, None] * b[:, None, :]


def _product(left: Jet, right: Jet) -> Jet:
    fv, fg, fh = left
    gv, gg, gh = right
    value = fv * gv
    grad = fg * gv[:, None] + fv[:, None] * gg
    hess = fh * gv[:, None, None] + _outer(fg, gg) + _outer(gg, fg) + fv[:, None, None] * gh
    return value, grad, hess


def _scaled(jet: Jet, k: np.ndarray) -> Jet:
    value, grad, hess = jet
    return k * value, k[:, None] * grad, k[:, None, None] * hess


def _pack(jet: Jet) -> np.ndarray:
    value, grad, hess = jet
    m = value.shape[0]
    return np.concatenate([value[:, None], grad, hess.reshape(m, -1)], axis=1)


def _unpack(packed: np.ndarray, n: int) -> Tuple[float, np.ndarray, np.ndarray]:
    return float(packed[0]), packed[1:1 + n].copy(), packed[1 + n:].reshape(n, n).copy()


class ProfileEvaluator:
    """
    H_s(p) with value, gradient and Hessian in p.

    Outside the smoothing windows H_s equals the raw family h_tilde. Inside a
    window B(s*, eps_s) the s-derivative of h_tilde is cut by rho_0, the
    rho_0 part is mollified in s, and the result is integrated from s* - eps_s.
    The integral is evaluated after integrating by parts, as h_tilde weighted
    against smooth kernels in s, so H_s coincides with h_tilde exactly once
    |s - s*| >= 0.95 eps_s and no s-derivative of h_tilde is needed there.
    Evaluators are immutable and safe to share between threads.
    """

    def __init__(
        self,
        cone: ConeSpec,
        params: ModelParams,
        c: float,
        smoothing_radius: float = DEFAULT_SMOOTHING_RADIUS,
        windows: Iterable[float] = WINDOW_CENTERS,
        blocks: Optional[ModelBlocks] = None,
    ):
        if not c > 0:
            raise PreconditionError(f"height c must be positive, got {c}")
        windows = tuple(sorted({float(w) for w in windows}))
        if any(w not in WINDOW_CENTERS for w in windows):
            raise PreconditionError(f"smoothing windows must be centred in {WINDOW_CENTERS}, got {windows}")
        if not 0 < smoothing_radius < 0.25:
            raise PreconditionError(f"smoothing radius must lie in (0, 1/4), got {smoothing_radius}")
        self.cone = cone
        self.params = params
        self.c = float(c)
        self.smoothing_radius = float(smoothing_radius)
        self.windows = windows
        self.blocks = blocks if blocks is not None else model_blocks(params)

    @property
    def n(self) -> int:
        return self.cone.n

    def with_window(self, s_star: float, eps_s: float) -> "ProfileEvaluator":
        return ProfileEvaluator(
            self.cone, self.params, self.c,
            smoothing_radius=eps_s,
            windows=(*self.windows, s_star),
            blocks=self.blocks,
        )

    def raw(self) -> "ProfileEvaluator":
        return ProfileEvaluator(self.cone, self.params, self.c, self.smoothing_radius, (), self.blocks)

    # ---- F_s in normalized coordinates -------------------------------------------------

    def _F_upper(self, s: np.ndarray, y: np.ndarray) -> Jet:
        return _scaled(self.blocks.U(y, s), self.c + s)

    def _F_lower(self, s: np.ndarray, y: np.ndarray) -> Jet:
        t = np.abs(s)
        v_value, v_grad, v_hess = self.blocks.V(y - 1.0, s)
        u_value, u_grad, u_hess = self.blocks.U(y, s)
        k = self.c + t
        level = k * v_value - t + 1.0 / t
        value = level * u_value
        grad = k[:, None] * v_grad * u_value[:, None] + level[:, None] * u_grad
        hess = k[:, None, None] * (
            v_hess * u_value[:, None, None] + _outer(v_grad, u_grad) + _outer(u_grad, v_grad)
        ) + level[:, None, None] * u_hess
        return value, grad, hess

    def F_jet(self, s, y) -> Jet:
        y = np.atleast_2d(np.asarray(y, dtype=float))
        m, n = y.shape
        s = np.broadcast_to(np.asarray(s, dtype=float), (m,)).astype(float)
        value = np.zeros(m)
        grad = np.zeros((m, n))
        hess = np.zeros((m, n, n))
        d = self.params.d_plateau

        def assign(mask, jet):
            value[mask], grad[mask], hess[mask] = jet

        upper = s >= 1.0
        middle = (s >= 0.0) & (s < 1.0)
        low = (s >= -1.0) & (s < 0.0)
        lower = s < -1.0
        if upper.any():
            assign(upper, self._F_upper(s[upper], y[upper]))
        if middle.any():
            ones = np.ones(int(middle.sum()))
            shift = ((1.0 - s[middle]) * (1.0 - d))[:, None]
            assign(middle, self._F_upper(ones, y[middle] - shift))
        if low.any():
            sl = s[low]
            ones = np.ones(sl.size)
            minus_one = self._F_lower(-ones, y[low])
            zero = self._F_upper(ones, y[low] - (1.0 - d))
            left = _scaled(minus_one, -sl)
            right = _scaled(zero, 1.0 + sl)
            assign(low, tuple(a + b for a, b in zip(left, right)))
        if lower.any():
            assign(lower, self._F_lower(s[lower], y[lower]))
        return value, grad, hess

    # ---- raw family h_tilde ------------------------------------------------------------

    def y_jet(self, s, y) -> Jet:
        """G_s(y) = F_s(y) W_s(y) with derivatives in y."""
        y = np.atleast_2d(np.asarray(y, dtype=float))
        s = np.broadcast_to(np.asarray(s, dtype=float), (y.shape[0],)).astype(float)
        return _product(self.F_jet(s, y), self.blocks.W(y, s, self.cone.R))

    def h_tilde_jets(self, s, P) -> Jet:
        """Batched raw-family jets in p; P has shape (m, n), s broadcasts to (m,)."""
        P = np.atleast_2d(np.asarray(P, dtype=float))
        value, grad_y, hess_y = self.y_jet(s, self.cone.to_y(P))
        inv = self.cone.A_norm_inv
        grad_p = grad_y @ inv
        hess_p = np.einsum("ki,mkl,lj->mij", inv, hess_y, inv)
        return value, grad_p, hess_p

    def h_tilde(self, s: float, p) -> float:
        return float(self.h_tilde_jets(s, np.asarray(p, dtype=float)[None, :])[0][0])

    # ---- smoothed family H_s -----------------------------------------------------------

    def window_of(self, s: float) -> Optional[float]:
        for center in self.windows:
            if abs(s - center) < self.smoothing_radius:
                return center
        return None

    def _rho_jet(self, tau: np.ndarray, center: float) -> Tuple[np.ndarray, np.ndarray]:
        """rho_0 around center and its tau-derivative."""
        eps_s = self.smoothing_radius
        offset = tau - center
        step, slope, _ = smooth_step_jet((np.abs(offset) - 0.5 * eps_s) / (0.25 * eps_s))
        return 1.0 - step, -slope * np.sign(offset) / (0.25 * eps_s)

    def _difference_quotients(self, tau: np.ndarray, p: np.ndarray) -> np.ndarray:
        """Packed central differences (H~_{tau+h/2} - H~_{tau-h/2}) / h of the full jet."""
        h = self.smoothing_radius / 50.0
        shifts = np.concatenate([tau + 0.5 * h, tau - 0.5 * h])
        P = np.broadcast_to(p, (shifts.size, p.size))
        packed = _pack(self.h_tilde_jets(shifts, P))
        half = tau.size
        return (packed[:half] - packed[half:]) / h

    def _window_breaks(self, s: float, center: float) -> Optional[list]:
        eps_s = self.smoothing_radius
        eta = eps_s / 5.0
        lo = max(center - 0.75 * eps_s, s - eta)
        hi = min(center + 0.75 * eps_s, s + eta)
        if hi <= lo:
            return None
        return panel_breaks(lo, hi, [center - 0.5 * eps_s, center, center + 0.5 * eps_s, s])

    def _window_weights(self, s: float, tau: np.ndarray, center: float, derivative: bool) -> np.ndarray:
        eta = self.smoothing_radius / 5.0
        bump = standard_bump()
        rho, rho_prime = self._rho_jet(tau, center)
        kernel = bump.mollifier(s - tau, eta)
        if derivative:
            return rho * bump.pdf_prime((s - tau) / eta) / eta ** 2 - rho_prime * kernel
        below = (tau < s).astype(float)
        return rho_prime * (below - bump.cdf((s - tau) / eta)) + rho * kernel

    def _window_quadrature(self, s: float, p: np.ndarray, center: float, derivative: bool = False) -> np.ndarray:
        """
        Integral of H~_tau(p) against the window weights, packed like the jet.

        Panels are split until two successive refinements agree.

        Raises:
            QuadratureError: the finest refinement still disagrees beyond WINDOW_TOL
        """
        size = 1 + self.n + self.n * self.n
        breaks = self._window_breaks(s, center)
        if breaks is None:
            return np.zeros(size)
        previous = None
        gap = limit = np.zeros(size)
        for pieces in WINDOW_REFINEMENTS:
            tau, w = composite_rule(refine_breaks(breaks, pieces), WINDOW_ORDER)
            w = w * self._window_weights(s, tau, center, derivative)
            keep = w != 0.0
            estimate = np.zeros(size)
            if keep.any():
                P = np.broadcast_to(p, (int(keep.sum()), p.size))
                estimate = w[keep] @ _pack(self.h_tilde_jets(tau[keep], P))
            if previous is not None:
                gap = np.abs(estimate - previous)
                limit = WINDOW_TOL * (1.0 + np.abs(estimate))
                if np.all(gap <= limit):
                    return estimate
            previous = estimate
        worst = int(np.argmax(gap - limit))
        raise QuadratureError(
            f"s-window quadrature disagreement {gap[worst]:.3e} at s={s}, p={p.tolist()}",
            witness={"s": s, "p": p.tolist()},
        )

    def _window_jet(self, s: float, p: np.ndarray, center: float) -> np.ndarray:
        rho, _ = self._rho_jet(np.array([s]), center)
        packed = self._window_quadrature(s, p, center)
        outer = 1.0 - float(rho[0])
        if outer > 0.0:
            packed = packed + outer * _pack(self.h_tilde_jets(s, p[None, :]))[0]
        return packed

    def jet(self, s: float, p) -> Tuple[float, np.ndarray, np.ndarray]:
        """(H_s(p), gradient_p, hessian_p) for a single point."""
        p = np.asarray(p, dtype=float).reshape(-1)
        center = self.window_of(s)
        if center is None:
            value, grad, hess = self.h_tilde_jets(s, p[None, :])
            return float(value[0]), grad[0], hess[0]
        return _unpack(self._window_jet(float(s), p, center), self.n)

    def value(self, s: float, p) -> float:
        return self.jet(s, p)[0]

    def gradient(self, s: float, p) -> np.ndarray:
        return self.jet(s, p)[1]

    def hessian(self, s: float, p) -> np.ndarray:
        return self.jet(s, p)[2]

    def values(self, s: float, P) -> np.ndarray:
        """H_s over rows of P."""
        P = np.atleast_2d(np.asarray(P, dtype=float))
        if self.window_of(s) is None:
            return self.h_tilde_jets(s, P)[0]
        return np.array([self.value(s, p) for p in P])

    def s_derivative(self, s: float, p) -> float:
        """Analytic d/ds H_s(p); nonnegative by construction."""
        p = np.asarray(p, dtype=float).reshape(-1)
        s = float(s)
        direct = float(self._difference_quotients(np.array([s]), p)[0, 0])
        center = self.window_of(s)
        if center is None:
            return direct
        rho, _ = self._rho_jet(np.array([s]), center)
        smoothed = float(self._window_quadrature(s, p, center, derivative=True)[0])
        return (1.0 - float(rho[0])) * direct + smoothed


def F(s: float, y, c: float, params: ModelParams) -> float:
    """F_s(y) for the first-quadrant picture (no cone, no cutoff)."""
    y = np.asarray(y, dtype=float).reshape(-1)
    identity = ConeSpec(A=np.eye(y.size), p_star=np.ones(y.size))
    evaluator = ProfileEvaluator(identity, params, c, windows=())
    return float(evaluator.F_jet(s, y[None, :])[0][0])


def h_tilde(s: float, p, evaluator: ProfileEvaluator) -> float:
    return evaluator.h_tilde(s, p)


def h_tilde_gradient(s: float, p, evaluator: ProfileEvaluator) -> np.ndarray:
    return evaluator.h_tilde_jets(s, np.asarray(p, dtype=float)[None, :])[1][0]


def h_tilde_hessian(s: float, p, evaluator: ProfileEvaluator) -> np.ndarray:
    return evaluator.h_tilde_jets(s, np.asarray(p, dtype=float)[None, :])[2][0]


def smooth_in_s(evaluator: ProfileEvaluator, s_star: float, eps_s: float) -> ProfileEvaluator:
    """Evaluator whose s-dependence is smoothed on B(s_star, eps_s)."""
    if s_star not in WINDOW_CENTERS:
        raise PreconditionError(f"s_star must be one of {WINDOW_CENTERS}, got {s_star}")
    return evaluator.with_window(s_star, eps_s)


def bracket_samples(cone: ConeSpec, count: int = 256, seed: int = 0, extent: float = 1.5) -> np.ndarray:
    """Quasi-random momenta in the normalized box (0, extent)^n, plus p*."""
    y = extent * sobol_points(cone.n, count, seed)
    return np.vstack([cone.p_star[None, :], cone.to_p(y)])


def exhaust_bracket(
    H: Callable[[np.ndarray, np.ndarray, float], float],
    evaluator: ProfileEvaluator,
    samples: Optional[np.ndarray] = None,
    angles: int = 4,
    times: Sequence[float] = (0.0, 0.5),
    max_doublings: int = 12,
    seed: int = 0,
) -> Tuple[float, float]:
    """
    Find s_lo < s_hi with H_{s_lo} < H < H_{s_hi} on a sampling grid.

    Args:
        H: callable H(p, q, t)
        samples: momenta to test; defaults to a Sobol cloud in the sector plus p*

    Returns:
        (s_lo, s_hi), both of the form +-2^k

    Raises:
        BracketNotFoundError: no bracket within 2^max_doublings
    """
    try:
        cone = evaluator.cone
        P = bracket_samples(cone, seed=seed) if samples is None else np.atleast_2d(samples)
        Q = sobol_points(cone.n, angles, seed + 1)
        table = np.array([[H(p, q, t) for q in Q for t in times] for p in P])
        high = table.max(axis=1)
        low = table.min(axis=1)
        active = (np.abs(table) > 0).any(axis=1)
        active[0] = True

        def above(s):
            values = evaluator.values(s, P)
            return bool(np.all(values >= high) and np.all(values[active] > high[active]))

        def below(s):
            values = evaluator.values(s, P)
            return bool(np.all(values <= low) and np.all(values[active] < low[active]))

        scales = [2.0 ** k for k in range(1, max_doublings + 1)]
        s_hi = next((s for s in scales if above(s)), None)
        s_lo = next((-s for s in scales if below(-s)), None)
        if s_hi is None or s_lo is None:
            height = float(low[0])
            reason = (
                f"H(p*, .) >= {height} does not exceed c = {evaluator.c}"
                if height <= evaluator.c else "sampled support or height precondition violated"
            )
            raise BracketNotFoundError(
                f"no exhausting bracket within |s| <= {scales[-1]}: {reason}",
                witness={"s_lo": s_lo, "s_hi": s_hi},
            )
        logger.info(f"Exhausting bracket found: s_lo={s_lo}, s_hi={s_hi}")
        return s_lo, s_hi
    except BracketNotFoundError:
        raise
    except Exception as e:
        logger.error(f"Unexpected error during bracket search: {str(e)}")
        logger.error(f"Full traceback: {traceback.format_exc()}")
        raise


def section_curve(evaluator: ProfileEvaluator, s: float, t_values) -> np.ndarray:
    """F_s(t 1) along the diagonal of the normalized coordinates."""
    t_values = np.asarray(t_values, dtype=float)
    y = np.repeat(t_values[:, None], evaluator.n, axis=1)
    return evaluator.F_jet(s, y)[0]


def surface_grid(evaluator: ProfileEvaluator, s: float, extent: float = 1.5, count: int = 61):
    """Rows (y1, y2, H_s) on a uniform grid of the normalized quadrant (n = 2)."""
    if evaluator.n != 2:
        raise PreconditionError("surface export is defined for n = 2 only")
    axis = np.linspace(0.0, extent, count)
    y1, y2 = np.meshgrid(axis, axis, indexing="ij")
    Y = np.column_stack([y1.ravel(), y2.ravel()])
    values = evaluator.h_tilde_jets(s, evaluator.cone.to_p(Y))[0]
    return np.column_stack([Y, values])
