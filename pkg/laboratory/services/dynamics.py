"""
Dynamics Services

Hamiltonian vector fields on T*T^n with the equations of motion
p' = -dH/dq, q' = dH/dp, symplectic integrators that keep q lifted to the
universal cover, and the sigma-composed cutoff Hamiltonian.

State vectors are ordered (p, q); Hessians and monodromy matrices use the
same ordering.
"""
import logging
import math
import traceback
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize

from laboratory.exceptions import IntegrationError, PreconditionError, WindowInfeasibleError
from laboratory.services.cone_geometry import ConeSpec, contains_many
from laboratory.services.model_functions import ModelBlocks, ModelParams, model_blocks, smooth_step_jet

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi
MIDPOINT_MAX_ITER = 30
MIDPOINT_TOL = 1e-14
MIDPOINT_STALL = 1e-12

# symmetric triple-jump coefficients for the order-4 composition
YOSHIDA_OUTER = 1.0 / (2.0 - 2.0 ** (1.0 / 3.0))
YOSHIDA_INNER = -(2.0 ** (1.0 / 3.0)) / (2.0 - 2.0 ** (1.0 / 3.0))


class Hamiltonian:
    """Interface shared by every Hamiltonian the integrators accept."""

    n: int
    separable: bool = False

    def value(self, p, q) -> float:
        raise NotImplementedError

    def gradient(self, p, q) -> Tuple[np.ndarray, np.ndarray]:
        """(dH/dp, dH/dq)."""
        raise NotImplementedError

    def hessian(self, p, q) -> np.ndarray:
        """2n x 2n second derivative, ordered (p, q)."""
        raise NotImplementedError


@dataclass(frozen=True)
class FourierTerm:
    """a cos(2 pi k.q) + b sin(2 pi k.q)."""

    k: Tuple[int, ...]
    cos: float = 0.0
    sin: float = 0.0


def arnold_potential_terms() -> Tuple[FourierTerm, ...]:
    """cos 2 pi q1 + cos 2 pi q2 (the constant is absorbed by normalization)."""
    return (FourierTerm(k=(1, 0), cos=1.0), FourierTerm(k=(0, 1), cos=1.0))


@dataclass(frozen=True, eq=False)
class MechanicalSystem(Hamiltonian):
    """
    H(p, q) = sum sigma_i p_i^2 / 2 + V(q) with V a trigonometric polynomial.

    V is scaled by `amplitude` and shifted so that max V = 0; M = -min V.
    """

    signature: Tuple[int, ...]
    terms: Tuple[FourierTerm, ...] = ()
    amplitude: float = 1.0
    separable = True
    raw_max: float = field(init=False, repr=False)
    raw_min: float = field(init=False, repr=False)

    def __post_init__(self):
        signature = tuple(int(sigma) for sigma in self.signature)
        if not signature or any(sigma not in (1, -1) for sigma in signature):
            raise PreconditionError(f"signature entries must be +1 or -1, got {self.signature}")
        terms = tuple(self.terms)
        for term in terms:
            if len(term.k) != len(signature):
                raise PreconditionError(f"frequency {term.k} does not match dimension {len(signature)}")
        if self.amplitude < 0:
            raise PreconditionError(f"amplitude must be nonnegative, got {self.amplitude}")
        object.__setattr__(self, "signature", signature)
        object.__setattr__(self, "terms", terms)
        object.__setattr__(self, "amplitude", float(self.amplitude))
        low, high = self._raw_extrema()
        object.__setattr__(self, "raw_min", low)
        object.__setattr__(self, "raw_max", high)

    @property
    def n(self) -> int:
        return len(self.signature)

    @property
    def sigma(self) -> np.ndarray:
        return np.array(self.signature, dtype=float)

    @property
    def M(self) -> float:
        return self.amplitude * (self.raw_max - self.raw_min)

    def with_amplitude(self, amplitude: float) -> "MechanicalSystem":
        return replace(self, amplitude=amplitude)

    # ---- potential -----------------------------------------------------------------

    def _frequencies(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        k = np.array([term.k for term in self.terms], dtype=float).reshape(-1, self.n)
        a = np.array([term.cos for term in self.terms], dtype=float)
        b = np.array([term.sin for term in self.terms], dtype=float)
        return k, a, b

    def _raw(self, Q: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Unnormalized trigonometric sum over rows of Q with gradient and Hessian."""
        Q = np.atleast_2d(Q)
        k, a, b = self._frequencies()
        m = Q.shape[0]
        if k.shape[0] == 0:
            return np.zeros(m), np.zeros((m, self.n)), np.zeros((m, self.n, self.n))
        phase = TWO_PI * Q @ k.T
        cos, sin = np.cos(phase), np.sin(phase)
        value = cos @ a + sin @ b
        slope = -sin * a + cos * b
        curvature = -cos * a - sin * b
        grad = TWO_PI * slope @ k
        hess = TWO_PI ** 2 * np.einsum("mt,ti,tj->mij", curvature, k, k)
        return value, grad, hess

    def _raw_extrema(self) -> Tuple[float, float]:
        if not self.terms:
            return 0.0, 0.0
        axis = np.linspace(0.0, 1.0, 64 if self.n <= 2 else 12, endpoint=False)
        grid = np.stack(np.meshgrid(*([axis] * self.n), indexing="ij"), axis=-1).reshape(-1, self.n)
        values = self._raw(grid)[0]

        def refine(sign: float, start: np.ndarray) -> float:
            result = optimize.minimize(
                lambda q: sign * self._raw(q)[0][0],
                start,
                jac=lambda q: sign * self._raw(q)[1][0],
                method="BFGS",
                options={"gtol": 1e-12},
            )
            return float(sign * result.fun)

        high = max(float(values.max()), refine(-1.0, grid[int(np.argmax(values))]))
        low = min(float(values.min()), refine(1.0, grid[int(np.argmin(values))]))
        return low, high

    def potential_jets(self, Q) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        value, grad, hess = self._raw(np.asarray(Q, dtype=float))
        a = self.amplitude
        return a * (value - self.raw_max), a * grad, a * hess

    def potential(self, q) -> float:
        return float(self.potential_jets(q)[0][0])

    def kinetic(self, p):
        p = np.asarray(p, dtype=float)
        value = 0.5 * np.sum(self.sigma * p * p, axis=-1)
        return float(value) if np.ndim(value) == 0 else value

    # ---- Hamiltonian interface ---------------------------------------------------------

    def value(self, p, q) -> float:
        return self.kinetic(p) + self.potential(q)

    def gradient(self, p, q) -> Tuple[np.ndarray, np.ndarray]:
        return self.sigma * np.asarray(p, dtype=float), self.potential_jets(q)[1][0]

    def gradients(self, P, Q) -> Tuple[np.ndarray, np.ndarray]:
        return self.sigma * np.atleast_2d(P), self.potential_jets(Q)[1]

    def hessian(self, p, q) -> np.ndarray:
        n = self.n
        hess = np.zeros((2 * n, 2 * n))
        hess[:n, :n] = np.diag(self.sigma)
        hess[n:, n:] = self.potential_jets(q)[2][0]
        return hess

    def to_dict(self):
        return {
            "signature": list(self.signature),
            "terms": [{"k": list(t.k), "cos": t.cos, "sin": t.sin} for t in self.terms],
            "amplitude": self.amplitude,
            "M": self.M,
        }


class FiberwiseHamiltonian(Hamiltonian):
    """Wraps a momentum-only jet p -> (H, dH/dp, d2H/dp2)."""

    def __init__(self, jet: Callable[[np.ndarray], Tuple[float, np.ndarray, np.ndarray]], n: int):
        self.jet = jet
        self.n = n

    def value(self, p, q=None) -> float:
        return float(self.jet(np.asarray(p, dtype=float))[0])

    def gradient(self, p, q=None) -> Tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.jet(np.asarray(p, dtype=float))[1], dtype=float), np.zeros(self.n)

    def hessian(self, p, q=None) -> np.ndarray:
        n = self.n
        hess = np.zeros((2 * n, 2 * n))
        hess[:n, :n] = self.jet(np.asarray(p, dtype=float))[2]
        return hess


def profile_hamiltonian(evaluator, s: float) -> FiberwiseHamiltonian:
    """The profile H_s as a dynamics Hamiltonian."""
    return FiberwiseHamiltonian(lambda p: evaluator.jet(s, p), evaluator.n)


def quadratic_hamiltonian(matrix) -> FiberwiseHamiltonian:
    """H(p) = p.Qp / 2."""
    matrix = np.asarray(matrix, dtype=float)
    return FiberwiseHamiltonian(lambda p: (0.5 * p @ matrix @ p, matrix @ p, matrix), matrix.shape[0])


@dataclass(frozen=True)
class SigmaProfile:
    """Smooth monotone step across the energy window (e_lo, e_hi), with height c."""

    e_lo: float
    e_hi: float
    c: float

    def __post_init__(self):
        if not self.e_hi > self.e_lo:
            raise PreconditionError(f"energy window must satisfy e_hi > e_lo, got ({self.e_lo}, {self.e_hi})")
        if not self.c > 0:
            raise PreconditionError(f"height c must be positive, got {self.c}")

    @property
    def width(self) -> float:
        return self.e_hi - self.e_lo

    @staticmethod
    def step(r):
        """sigma(r) with sigma' and sigma''."""
        return smooth_step_jet(r)

    def of_energy(self, energy):
        """sigma((E - e_lo) / width) and its first two derivatives in E."""
        value, first, second = self.step((np.asarray(energy, dtype=float) - self.e_lo) / self.width)
        return value, first / self.width, second / self.width ** 2


class SigmaComposedHamiltonian(Hamiltonian):
    """
    F(p, q) = c sigma((H(p, q) - e_lo) / (e_hi - e_lo)) W_1(A_norm^-1 p) on the cone, 0 off it.
    """

    def __init__(
        self,
        system: MechanicalSystem,
        sigma: SigmaProfile,
        cone: ConeSpec,
        params: ModelParams,
        blocks: Optional[ModelBlocks] = None,
    ):
        kinetic_star = system.kinetic(cone.p_star)
        if not kinetic_star - system.M > sigma.e_hi > sigma.e_lo > 0:
            raise WindowInfeasibleError(
                f"energy window infeasible: need kinetic(p*) - M = {kinetic_star - system.M} "
                f"> e_hi = {sigma.e_hi} > e_lo = {sigma.e_lo} > 0",
                witness={"kinetic_star": kinetic_star, "M": system.M},
            )
        self.system = system
        self.sigma = sigma
        self.cone = cone
        self.params = params
        self.blocks = blocks if blocks is not None else model_blocks(params)
        self.n = system.n

    @property
    def c(self) -> float:
        return self.sigma.c

    def cutoff(self, P) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """W_1 over rows of P with its p-gradient and p-Hessian."""
        P = np.atleast_2d(np.asarray(P, dtype=float))
        value, grad_y, hess_y = self.blocks.W(self.cone.to_y(P), 1.0, self.cone.R)
        inv = self.cone.A_norm_inv
        return value, grad_y @ inv, np.einsum("ki,mkl,lj->mij", inv, hess_y, inv)

    def jets(self, P, Q):
        """Batched (F, dF/dp, dF/dq); rows off the cone are zero."""
        P = np.atleast_2d(np.asarray(P, dtype=float))
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        m = P.shape[0]
        value = np.zeros(m)
        grad_p = np.zeros((m, self.n))
        grad_q = np.zeros((m, self.n))
        inside = contains_many(self.cone, P)
        if not inside.any():
            return value, grad_p, grad_q
        Pi, Qi = P[inside], Q[inside]
        energy = self.system.kinetic(Pi) + self.system.potential_jets(Qi)[0]
        h_p, h_q = self.system.gradients(Pi, Qi)
        s, ds, _ = self.sigma.of_energy(energy)
        w, w_p, _ = self.cutoff(Pi)
        c = self.c
        value[inside] = c * s * w
        grad_p[inside] = c * ((ds * w)[:, None] * h_p + s[:, None] * w_p)
        grad_q[inside] = c * (ds * w)[:, None] * h_q
        return value, grad_p, grad_q

    def value(self, p, q) -> float:
        return float(self.jets(p, q)[0][0])

    def gradient(self, p, q) -> Tuple[np.ndarray, np.ndarray]:
        _, grad_p, grad_q = self.jets(p, q)
        return grad_p[0], grad_q[0]

    def hessian(self, p, q) -> np.ndarray:
        n = self.n
        p = np.asarray(p, dtype=float)
        q = np.asarray(q, dtype=float)
        hess = np.zeros((2 * n, 2 * n))
        if not contains_many(self.cone, p[None, :])[0]:
            return hess
        energy = self.system.value(p, q)
        h_p, h_q = self.system.gradient(p, q)
        h_grad = np.concatenate([h_p, h_q])
        h_hess = self.system.hessian(p, q)
        s, ds, d2s = (float(v) for v in self.sigma.of_energy(energy))
        w, w_p, w_pp = (a[0] for a in self.cutoff(p[None, :]))
        w_grad = np.concatenate([w_p, np.zeros(n)])
        w_hess = np.zeros((2 * n, 2 * n))
        w_hess[:n, :n] = w_pp
        hess = d2s * w * np.outer(h_grad, h_grad) + ds * w * h_hess \
            + ds * (np.outer(h_grad, w_grad) + np.outer(w_grad, h_grad)) + s * w_hess
        return self.c * hess


def sigma_compose(system: MechanicalSystem, sigma: SigmaProfile, cone: ConeSpec, params: ModelParams) -> SigmaComposedHamiltonian:
    return SigmaComposedHamiltonian(system, sigma, cone, params)


def vector_field(H: Hamiltonian, p, q) -> Tuple[np.ndarray, np.ndarray]:
    """(p', q') = (-dH/dq, dH/dp)."""
    h_p, h_q = H.gradient(p, q)
    return -np.asarray(h_q, dtype=float), np.asarray(h_p, dtype=float)


def _field(H: Hamiltonian, x: np.ndarray, n: int) -> np.ndarray:
    p_dot, q_dot = vector_field(H, x[:n], x[n:])
    return np.concatenate([p_dot, q_dot])


def _field_jacobian(H: Hamiltonian, x: np.ndarray, n: int) -> np.ndarray:
    hess = H.hessian(x[:n], x[n:])
    jac = np.empty_like(hess)
    jac[:n] = -hess[n:]
    jac[n:] = hess[:n]
    return jac


@dataclass
class Trajectory:
    """Recorded states with lifted q; monodromy is the tangent map over the whole run."""

    times: np.ndarray
    p: np.ndarray
    q: np.ndarray
    energy: np.ndarray
    monodromy: Optional[np.ndarray] = None

    @property
    def final_state(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.p[-1].copy(), self.q[-1].copy()

    @property
    def displacement(self) -> np.ndarray:
        return self.q[-1] - self.q[0]

    @property
    def energy_drift(self) -> float:
        return float(abs(self.energy[-1] - self.energy[0]))

    @property
    def max_energy_defect(self) -> float:
        return float(np.max(np.abs(self.energy - self.energy[0])))

    def to_rows(self, stride: int = 1) -> Iterator[list]:
        for i in range(0, self.times.size, stride):
            yield [self.times[i], *self.p[i], *self.q[i], self.energy[i]]


def _midpoint_step(H: Hamiltonian, x: np.ndarray, h: float, n: int, variational: bool):
    identity = np.eye(2 * n)
    x_new = x + h * _field(H, x, n)
    previous = math.inf
    for _ in range(MIDPOINT_MAX_ITER):
        middle = 0.5 * (x + x_new)
        jac = _field_jacobian(H, middle, n)
        residual = x_new - x - h * _field(H, middle, n)
        try:
            delta = np.linalg.solve(identity - 0.5 * h * jac, residual)
        except np.linalg.LinAlgError as e:
            raise IntegrationError(f"implicit midpoint system singular at step {h}") from e
        x_new = x_new - delta
        size = float(np.linalg.norm(delta))
        scale = 1.0 + float(np.linalg.norm(x_new))
        if size <= MIDPOINT_TOL * scale:
            break
        # roundoff floor reached
        if size <= MIDPOINT_STALL * scale and size >= previous:
            break
        previous = size
    else:
        raise IntegrationError(
            f"implicit midpoint Newton did not converge with step {h}; reduce the step",
            witness=x.tolist(),
        )
    tangent = None
    if variational:
        middle = 0.5 * (x + x_new)
        jac = _field_jacobian(H, middle, n)
        tangent = np.linalg.solve(identity - 0.5 * h * jac, identity + 0.5 * h * jac)
    return x_new, tangent


def _leapfrog_step(H: MechanicalSystem, x: np.ndarray, h: float, n: int, variational: bool):
    sigma = H.sigma
    p, q = x[:n], x[n:]
    _, grad_v, hess_v = H.potential_jets(q)
    p_half = p - 0.5 * h * grad_v[0]
    q_new = q + h * sigma * p_half
    _, grad_new, hess_new = H.potential_jets(q_new)
    p_new = p_half - 0.5 * h * grad_new[0]
    tangent = None
    if variational:
        identity = np.eye(n)
        zero = np.zeros((n, n))
        kick_start = np.block([[identity, -0.5 * h * hess_v[0]], [zero, identity]])
        drift = np.block([[identity, zero], [h * np.diag(sigma), identity]])
        kick_end = np.block([[identity, -0.5 * h * hess_new[0]], [zero, identity]])
        tangent = kick_end @ drift @ kick_start
    return np.concatenate([p_new, q_new]), tangent


def _resolve_scheme(H: Hamiltonian, scheme: str) -> str:
    if scheme == "auto":
        return "leapfrog" if getattr(H, "separable", False) else "midpoint"
    if scheme == "leapfrog" and not getattr(H, "separable", False):
        raise PreconditionError("leapfrog requires a separable Hamiltonian")
    if scheme not in ("midpoint", "leapfrog"):
        raise PreconditionError(f"unknown integration scheme {scheme!r}")
    return scheme


def integrate(
    H: Hamiltonian,
    state0: Tuple[Sequence[float], Sequence[float]],
    T: float,
    step: float,
    scheme: str = "midpoint",
    order: int = 2,
    variational: bool = False,
) -> Trajectory:
    """
    Integrate the flow of H for time T with a fixed step (rounded so the run ends exactly at T).

    Args:
        scheme: "midpoint", "leapfrog" (separable H only) or "auto"
        order: 2 for the basic step, 4 for the symmetric triple-jump composition
        variational: propagate the discrete tangent map and return it as the monodromy

    Note: a negative T integrates backwards.

    Raises:
        IntegrationError: the implicit step failed to converge
    """
    if not step > 0:
        raise PreconditionError(f"step must be positive, got {step}")
    if T == 0:
        raise PreconditionError("integration time must be nonzero")
    if order not in (2, 4):
        raise PreconditionError(f"order must be 2 or 4, got {order}")
    scheme = _resolve_scheme(H, scheme)
    advance = _leapfrog_step if scheme == "leapfrog" else _midpoint_step

    p0, q0 = (np.asarray(v, dtype=float) for v in state0)
    n = p0.size
    count = max(1, int(math.ceil(abs(T) / step - 1e-12)))
    h = T / count
    fractions = (1.0,) if order == 2 else (YOSHIDA_OUTER, YOSHIDA_INNER, YOSHIDA_OUTER)

    states = np.empty((count + 1, 2 * n))
    states[0] = np.concatenate([p0, q0])
    monodromy = np.eye(2 * n) if variational else None
    x = states[0].copy()
    try:
        for i in range(count):
            for fraction in fractions:
                x, tangent = advance(H, x, fraction * h, n, variational)
                if variational:
                    monodromy = tangent @ monodromy
            states[i + 1] = x
    except IntegrationError:
        raise
    except Exception as e:
        logger.error(f"Unexpected error during integration: {str(e)}")
        logger.error(f"Full traceback: {traceback.format_exc()}")
        raise

    energy = np.array([H.value(state[:n], state[n:]) for state in states])
    return Trajectory(
        times=np.linspace(0.0, T, count + 1),
        p=states[:, :n],
        q=states[:, n:],
        energy=energy,
        monodromy=monodromy,
    )


def flow_map(H: Hamiltonian, state0, T: float, step: float, scheme: str = "auto", order: int = 4):
    """Final state and monodromy only."""
    trajectory = integrate(H, state0, T, step, scheme=scheme, order=order, variational=True)
    return trajectory.final_state, trajectory.monodromy, trajectory


def richardson_defect(H: Hamiltonian, state0, T: float, step: float, scheme: str = "midpoint", order: int = 2) -> float:
    """Distance between the end states at step and step/2."""
    coarse = integrate(H, state0, T, step, scheme=scheme, order=order)
    fine = integrate(H, state0, T, 0.5 * step, scheme=scheme, order=order)
    return float(np.linalg.norm(np.concatenate(coarse.final_state) - np.concatenate(fine.final_state)))


def monodromy_determinant(monodromy: np.ndarray) -> float:
    return float(np.linalg.det(monodromy))


def symplectic_defect(matrix: np.ndarray) -> float:
    """max |M^T J M - J| for J = [[0, -I], [I, 0]] in (p, q) ordering."""
    n = matrix.shape[0] // 2
    J = np.block([[np.zeros((n, n)), -np.eye(n)], [np.eye(n), np.zeros((n, n))]])
    return float(np.max(np.abs(matrix.T @ J @ matrix - J)))


def arnold_system(amplitude: float = 0.05) -> MechanicalSystem:
    """p1^2/2 - p2^2/2 + amplitude (cos 2 pi q1 + cos 2 pi q2 - 2)."""
    return MechanicalSystem(signature=(1, -1), terms=arnold_potential_terms(), amplitude=amplitude)
