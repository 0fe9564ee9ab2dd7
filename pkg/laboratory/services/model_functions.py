"""
Model Function Services

The one-dimensional model function u_hat, its bump-mollified version u_hat_eps
(tabulated as a SmoothCurve), and the shifted, scaled and reflected blocks
u, u_s, v_s, w_s with their n-dimensional products U_s, V_s, W_s.

All block evaluations are vectorized: arrays go in, arrays come out, and the
product functions return (value, gradient, hessian) jets over a batch axis.
"""
import logging
import math
import traceback
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional, Tuple

import numpy as np
from scipy import integrate
from scipy.interpolate import make_interp_spline

from laboratory.exceptions import PreconditionError, QuadratureError
from laboratory.services.common import CheckResult, gauss_legendre

logger = logging.getLogger(__name__)

SQRT_E = math.exp(0.5)
E_MINUS_HALF = math.exp(-0.5)

QUADRATURE_TOL = 1e-10
QUADRATURE_ORDERS = (48, 64, 96, 128, 192, 256)
TABLE_CHUNK = 2048

Jet = Tuple[np.ndarray, np.ndarray, np.ndarray]


@dataclass(frozen=True)
class ModelParams:
    """
    Constants of the one-dimensional construction.

    delta is the Gaussian width, eps the mollifier radius. The turning edge
    b = (4 - sqrt(e)) sqrt(delta) and the plateau onset d = b + 6 eps are derived.
    """

    delta: float = 1e-2
    eps: float = 1e-4
    grid_step: Optional[float] = None

    def __post_init__(self):
        if not self.delta > 0:
            raise PreconditionError(f"delta must be positive, got {self.delta}")
        if not self.eps > 0:
            raise PreconditionError(f"eps must be positive, got {self.eps}")
        if self.eps > self.delta / 100.0 * (1.0 + 1e-12):
            raise PreconditionError(
                f"scale separation violated: eps={self.eps} exceeds delta/100={self.delta / 100.0}"
            )
        if not self.d_plateau < 0.5:
            raise PreconditionError(f"plateau onset d={self.d_plateau} must stay below 1/2")
        step = self.grid_step
        if step is None:
            step = min(self.eps / 20.0, self.delta / 200.0)
        if not step > 0:
            raise PreconditionError(f"grid_step must be positive, got {step}")
        object.__setattr__(self, "grid_step", float(step))

    @property
    def sqrt_delta(self) -> float:
        return math.sqrt(self.delta)

    @property
    def b_edge(self) -> float:
        return (4.0 - SQRT_E) * self.sqrt_delta

    @property
    def d_plateau(self) -> float:
        return self.b_edge + 6.0 * self.eps

    @property
    def junctions(self) -> Tuple[float, float, float, float]:
        b, r = self.b_edge, self.sqrt_delta
        return (0.0, r, b - r, b)

    def d_s(self, s) -> np.ndarray:
        """d_s = d / |s|, with the |s| < 1 members frozen at s = 1."""
        return self.d_plateau / np.maximum(np.abs(s), 1.0)

    def to_dict(self):
        return {"delta": self.delta, "eps": self.eps, "grid_step": self.grid_step}


def u_hat(x, params: ModelParams):
    """Exact piecewise model function; scalar in, float out, arrays in, arrays out."""
    value, _, _ = u_hat_jet(x, params)
    return float(value) if np.ndim(value) == 0 else value


def u_hat_prime(x, params: ModelParams):
    _, first, _ = u_hat_jet(x, params)
    return float(first) if np.ndim(first) == 0 else first


def u_hat_second(x, params: ModelParams):
    _, _, second = u_hat_jet(x, params)
    return float(second) if np.ndim(second) == 0 else second


def u_hat_jet(x, params: ModelParams) -> Jet:
    """Value, first and second derivative of u_hat on its five branches."""
    x = np.asarray(x, dtype=float)
    delta, root, b = params.delta, params.sqrt_delta, params.b_edge

    rising = np.exp(-x * x / (2.0 * delta))
    shifted = x - b
    falling = np.exp(-shifted * shifted / (2.0 * delta))
    slope = E_MINUS_HALF / root

    conditions = [x < 0.0, x < root, x < b - root, x < b]
    value = np.select(
        conditions,
        [0.0, 1.0 - rising, slope * x + 1.0 - 2.0 * E_MINUS_HALF, falling],
        default=1.0,
    )
    first = np.select(
        conditions,
        [0.0, x / delta * rising, slope, -shifted / delta * falling],
        default=0.0,
    )
    second = np.select(
        conditions,
        [
            0.0,
            (1.0 / delta - x * x / delta ** 2) * rising,
            0.0,
            (-1.0 / delta + shifted * shifted / delta ** 2) * falling,
        ],
        default=0.0,
    )
    return value, first, second


def u_hat_derivative_at_turning(params: ModelParams) -> float:
    """Slope e^{-1/2} / sqrt(delta) of the affine middle branch."""
    return E_MINUS_HALF / params.sqrt_delta


class BumpKernel:
    """
    Normalized bump exp(1/(u^2 - 1)) on (-1, 1).

    The mass is fixed once by adaptive quadrature; the CDF is evaluated by
    Gauss-Legendre on [-1, u], which is accurate because the bump is flat at -1.
    """

    CDF_ORDER = 96

    def __init__(self):
        mass, error = integrate.quad(self._raw, -1.0, 1.0, epsabs=1e-15, epsrel=1e-14, limit=200)
        if error > 1e-12:
            raise QuadratureError(f"bump normalization error estimate {error:.3e} too large")
        self.mass = mass

    @staticmethod
    def _raw(u):
        u = np.asarray(u, dtype=float)
        inside = np.abs(u) < 1.0
        safe = np.where(inside, u, 0.0)
        return np.where(inside, np.exp(1.0 / (safe * safe - 1.0)), 0.0)

    def pdf(self, u):
        return self._raw(u) / self.mass

    def pdf_prime(self, u):
        u = np.asarray(u, dtype=float)
        inside = np.abs(u) < 1.0
        safe = np.where(inside, u, 0.0)
        gap = safe * safe - 1.0
        derivative = np.exp(1.0 / gap) * (-2.0 * safe / (gap * gap))
        return np.where(inside, derivative, 0.0) / self.mass

    def cdf(self, u):
        u = np.asarray(u, dtype=float)
        clipped = np.clip(u, -1.0, 1.0)
        nodes, weights = gauss_legendre(self.CDF_ORDER)
        half = 0.5 * (clipped + 1.0)
        points = half[..., None] * (nodes + 1.0) - 1.0
        values = half * np.sum(weights * self.pdf(points), axis=-1)
        return np.where(u <= -1.0, 0.0, np.where(u >= 1.0, 1.0, np.clip(values, 0.0, 1.0)))

    def mollifier(self, t, radius: float):
        """phi_radius(t) = pdf(t / radius) / radius."""
        return self.pdf(np.asarray(t, dtype=float) / radius) / radius


@lru_cache(maxsize=1)
def standard_bump() -> BumpKernel:
    return BumpKernel()


def smooth_step(r):
    """sigma(r) = normalized bump integral over (0, 1): 0 for r <= 0, 1 for r >= 1."""
    return standard_bump().cdf(2.0 * np.asarray(r, dtype=float) - 1.0)


def smooth_step_jet(r) -> Jet:
    bump = standard_bump()
    z = 2.0 * np.asarray(r, dtype=float) - 1.0
    return bump.cdf(z), 2.0 * bump.pdf(z), 4.0 * bump.pdf_prime(z)


@dataclass(frozen=True, eq=False)
class SmoothCurve:
    """
    Tabulated u_hat_eps with first and second derivatives on a uniform grid.

    Each column is interpolated by its own quintic spline. Outside the table
    the curve is exactly 0 (left) or 1 (right).
    """

    params: ModelParams
    x: np.ndarray
    values: np.ndarray
    first: np.ndarray
    second: np.ndarray
    order: int = 5
    _splines: tuple = field(init=False, repr=False)

    def __post_init__(self):
        for array in (self.x, self.values, self.first, self.second):
            array.setflags(write=False)
        splines = tuple(make_interp_spline(self.x, column, k=self.order)
                        for column in (self.values, self.first, self.second))
        object.__setattr__(self, "_splines", splines)

    @property
    def support(self) -> Tuple[float, float]:
        return float(self.x[0]), float(self.x[-1])

    def derivatives(self, x) -> Jet:
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1)
        lo, hi = self.support
        inside = (flat >= lo) & (flat <= hi)
        value = np.where(flat > hi, 1.0, 0.0)
        first = np.zeros_like(flat)
        second = np.zeros_like(flat)
        if np.any(inside):
            points = flat[inside]
            value[inside] = self._splines[0](points)
            first[inside] = self._splines[1](points)
            second[inside] = self._splines[2](points)
        return value.reshape(x.shape), first.reshape(x.shape), second.reshape(x.shape)

    def __call__(self, x):
        value = self.derivatives(x)[0]
        return float(value) if np.ndim(value) == 0 else value

    def to_rows(self, stride: int = 1):
        for i in range(0, self.x.size, stride):
            yield (self.x[i], self.values[i], self.first[i], self.second[i])


def convolve_at(x, params: ModelParams, orders=QUADRATURE_ORDERS, tol: float = QUADRATURE_TOL) -> Jet:
    """
    Direct convolution of u_hat, u_hat' and u_hat'' with the eps-bump at points x.

    The kernel variable is split at the (at most one) junction inside the
    window, and Gauss-Legendre orders are raised until consecutive orders agree.

    Raises:
        QuadratureError: when the highest order still disagrees beyond tol
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    eps = params.eps
    bump = standard_bump()
    scales = np.array([1.0, 1.0 / params.sqrt_delta, 1.0 / params.delta])

    junctions = np.array(params.junctions)
    offsets = (x[:, None] - junctions[None, :]) / eps
    hit = np.abs(offsets) < 1.0
    split = np.where(hit, offsets, 0.0).sum(axis=1)

    def rule(order, points):
        nodes, weights = gauss_legendre(order)
        left_half = 0.5 * (split[points] + 1.0)
        right_half = 0.5 * (1.0 - split[points])
        left = left_half[:, None] * (nodes + 1.0) - 1.0
        right = right_half[:, None] * (nodes + 1.0) + split[points][:, None]
        u = np.concatenate([left, right], axis=1)
        w = np.concatenate([left_half[:, None] * weights, right_half[:, None] * weights], axis=1)
        kernel = w * bump.pdf(u)
        mass = kernel.sum(axis=1)
        jet = u_hat_jet(x[points][:, None] - eps * u, params)
        return np.stack([(kernel * part).sum(axis=1) / mass for part in jet], axis=1)

    result = np.empty((x.size, 3))
    pending = np.arange(x.size)
    previous = rule(orders[0], pending)
    for order in orders[1:]:
        current = rule(order, pending)
        converged = np.all(np.abs(current - previous) <= tol * scales, axis=1)
        result[pending[converged]] = current[converged]
        pending = pending[~converged]
        previous = current[~converged]
        if pending.size == 0:
            break
    if pending.size:
        raise QuadratureError(
            f"mollifier quadrature did not reach {tol} at {pending.size} points (first x={x[pending[0]]!r})",
            witness=float(x[pending[0]]),
        )
    return result[:, 0], result[:, 1], result[:, 2]


def mollify(params: ModelParams) -> SmoothCurve:
    """
    Tabulate u_hat_eps = u_hat * phi_eps and its derivatives on [-2 eps, b + 2 eps].

    Derivatives are convolutions of u_hat' and u_hat'' with the kernel (equivalent
    to convolving u_hat with phi' and phi''), never differences of the table.
    """
    try:
        lo = -2.0 * params.eps
        hi = params.b_edge + 2.0 * params.eps
        count = int(math.ceil((hi - lo) / params.grid_step)) + 1
        x = lo + params.grid_step * np.arange(count)
        logger.info(f"Tabulating mollified model function on {count} points (delta={params.delta}, eps={params.eps})")

        values = np.empty(count)
        first = np.empty(count)
        second = np.empty(count)
        for start in range(0, count, TABLE_CHUNK):
            chunk = slice(start, min(start + TABLE_CHUNK, count))
            values[chunk], first[chunk], second[chunk] = convolve_at(x[chunk], params)
        return SmoothCurve(params=params, x=x, values=values, first=first, second=second)
    except QuadratureError:
        raise
    except Exception as e:
        logger.error(f"Unexpected error while tabulating the mollified curve: {str(e)}")
        logger.error(f"Full traceback: {traceback.format_exc()}")
        raise


@lru_cache(maxsize=8)
def smooth_curve(params: ModelParams) -> SmoothCurve:
    return mollify(params)


def second_derivative_bound_check(curve: SmoothCurve, params: ModelParams, C: float = 2.0) -> CheckResult:
    """
    Concavity bound u_hat_eps'' <= -1/(3 delta) on x - b in (-C delta, -eps], and
    monotone u_hat_eps'' on B(b, eps) wherever it is at least -1/(3 delta).
    """
    if C < 1:
        raise PreconditionError(f"C must be at least 1, got {C}")
    bound = -1.0 / (3.0 * params.delta)
    b = params.b_edge
    x = curve.x
    window = (x - b > -C * params.delta) & (x - b <= -params.eps)
    second = curve.second
    bad = np.flatnonzero(window & (second > bound))
    if bad.size:
        i = int(bad[0])
        return CheckResult(False, witness=float(x[i]), details={"value": float(second[i]), "bound": bound})

    ball = (np.abs(x - b) < params.eps) & (second >= bound)
    indices = np.flatnonzero(ball)
    steps = np.diff(second[indices])
    contiguous = np.diff(indices) == 1
    drops = np.flatnonzero(contiguous & (steps < -1e-9 / params.delta))
    if drops.size:
        i = int(indices[drops[0]])
        return CheckResult(False, witness=float(x[i]), details={"reason": "second derivative decreases near b"})
    return CheckResult(True, details={"checked_points": int(window.sum()), "bound": bound})


def sign_pattern_check(curve: SmoothCurve, params: ModelParams) -> CheckResult:
    """u_hat_eps'' >= 0 left of b/2 and <= 0 right of it, up to 1e-8/delta."""
    tol = 1e-8 / params.delta
    half = params.b_edge / 2.0
    left = (curve.x < half) & (curve.second < -tol)
    right = (curve.x > half) & (curve.second > tol)
    bad = np.flatnonzero(left | right)
    if bad.size:
        i = int(bad[0])
        return CheckResult(False, witness=float(curve.x[i]), details={"value": float(curve.second[i])})
    return CheckResult(True)


class ModelBlocks:
    """
    Vectorized building blocks derived from a SmoothCurve.

    u(x) = u_hat_eps(x - 3 eps), u_s(x) = u(|s| x), v_s(x) = u_s(x + d_s),
    w_s(x) = u_s((1 - d_s) - |x|). The s-indexed members use max(|s|, 1).
    """

    def __init__(self, params: ModelParams, curve: Optional[SmoothCurve] = None):
        self.params = params
        self.curve = curve if curve is not None else smooth_curve(params)

    def u(self, x) -> Jet:
        return self.curve.derivatives(np.asarray(x, dtype=float) - 3.0 * self.params.eps)

    def u_s(self, x, s) -> Jet:
        k = np.abs(np.asarray(s, dtype=float))
        value, first, second = self.u(k * np.asarray(x, dtype=float))
        return value, k * first, k * k * second

    def v_s(self, x, s) -> Jet:
        k = np.maximum(np.abs(np.asarray(s, dtype=float)), 1.0)
        return self.u_s(np.asarray(x, dtype=float) + self.params.d_plateau / k, k)

    def w_s(self, x, s) -> Jet:
        k = np.maximum(np.abs(np.asarray(s, dtype=float)), 1.0)
        x = np.asarray(x, dtype=float)
        value, first, second = self.u_s((1.0 - self.params.d_plateau / k) - np.abs(x), k)
        return value, -np.sign(x) * first, second

    # n-dimensional products over a batch axis: y has shape (m, n), s shape (m,)

    def U(self, y, s) -> Jet:
        y, s = _batch(y, s)
        f, df, d2f = self.u_s(y, s[:, None])
        return tensor_product(f, df, d2f)

    def V(self, y, s) -> Jet:
        y, s = _batch(y, s)
        f, df, d2f = self.v_s(-np.abs(y), s[:, None])
        return tensor_product(f, -np.sign(y) * df, d2f)

    def W(self, y, s, R: float) -> Jet:
        y, s = _batch(y, s)
        m, n = y.shape
        r = np.linalg.norm(y, axis=1)
        w, dw, d2w = self.w_s(r / R, s)
        grad = np.zeros((m, n))
        hess = np.zeros((m, n, n))
        moving = r > 0
        if np.any(moving):
            rr = r[moving]
            unit = y[moving] / rr[:, None]
            radial = dw[moving] / R
            grad[moving] = radial[:, None] * unit
            outer = unit[:, :, None] * unit[:, None, :]
            eye = np.eye(n)[None, :, :]
            hess[moving] = (d2w[moving] / R ** 2)[:, None, None] * outer \
                + (radial / rr)[:, None, None] * (eye - outer)
        return w, grad, hess


def _batch(y, s) -> Tuple[np.ndarray, np.ndarray]:
    y = np.atleast_2d(np.asarray(y, dtype=float))
    s = np.broadcast_to(np.asarray(s, dtype=float), (y.shape[0],)).astype(float)
    return y, s


def tensor_product(f: np.ndarray, df: np.ndarray, d2f: np.ndarray) -> Jet:
    """Jet of prod_i f_i(y_i) from per-coordinate jets of shape (m, n)."""
    m, n = f.shape
    value = np.prod(f, axis=1)
    grad = np.empty((m, n))
    hess = np.empty((m, n, n))
    for i in range(n):
        others = np.prod(np.delete(f, i, axis=1), axis=1)
        grad[:, i] = df[:, i] * others
        hess[:, i, i] = d2f[:, i] * others
        for j in range(i + 1, n):
            rest = np.prod(np.delete(f, [i, j], axis=1), axis=1)
            hess[:, i, j] = hess[:, j, i] = df[:, i] * df[:, j] * rest
    return value, grad, hess


@lru_cache(maxsize=8)
def model_blocks(params: ModelParams) -> ModelBlocks:
    return ModelBlocks(params)


@dataclass(frozen=True)
class BlockFamily:
    """The one-dimensional blocks at a fixed s, as value-only callables."""

    s: float
    u: Callable
    u_s: Callable
    v_s: Callable
    w_s: Callable


def _values_only(func, *args):
    value = func(*args)[0]
    return float(value) if np.ndim(value) == 0 else value


def blocks(params: ModelParams, s: float) -> BlockFamily:
    model = model_blocks(params)
    return BlockFamily(
        s=float(s),
        u=lambda x: _values_only(model.u, x),
        u_s=lambda x: _values_only(model.u_s, x, s),
        v_s=lambda x: _values_only(model.v_s, x, s),
        w_s=lambda x: _values_only(model.w_s, x, s),
    )


def product_blocks(params: ModelParams, s: float, y, R: float = 100.0) -> Tuple[float, float, float]:
    """Values (U_s(y), V_s(y), W_s(y)) at a single point."""
    model = model_blocks(params)
    y = np.asarray(y, dtype=float)[None, :]
    return (
        float(model.U(y, s)[0][0]),
        float(model.V(y, s)[0][0]),
        float(model.W(y, s, R)[0][0]),
    )
