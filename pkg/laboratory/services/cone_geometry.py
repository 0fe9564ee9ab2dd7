"""
Cone Geometry Services

Positively spanned open cones, their duals, and the base-point normalization
A_norm = A . diag(A^-1 p*) that every profile construction works in.
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, Sequence, Tuple

import numpy as np

from laboratory.exceptions import PreconditionError, SingularMatrixError

logger = logging.getLogger(__name__)

CONDITION_LIMIT = 1e8
DETERMINANT_RTOL = 1e-12
NORMALIZATION_TOL = 1e-12


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class ConeSpec:
    """
    Open cone spanned by the columns of A, with interior base point p_star and cutoff radius R.

    Construction validates the matrix and derives A_norm, its inverse and y* = A^-1 p*.
    Instances are immutable and safe to share between threads.
    """

    A: np.ndarray
    p_star: np.ndarray
    R: float = 100.0
    A_norm: np.ndarray = field(init=False, repr=False)
    A_norm_inv: np.ndarray = field(init=False, repr=False)
    y_star: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 1:
            raise PreconditionError(f"A must be a square matrix, got shape {A.shape}")
        n = A.shape[0]
        p_star = np.array(self.p_star, dtype=float).reshape(-1)
        if p_star.shape != (n,):
            raise PreconditionError(f"p_star must have {n} components, got {p_star.shape[0]}")
        if not self.R > 0:
            raise PreconditionError(f"cutoff radius R must be positive, got {self.R}")

        scale = np.linalg.norm(A, 2)
        det = np.linalg.det(A)
        if not abs(det) > DETERMINANT_RTOL * scale ** n:
            raise SingularMatrixError(f"cone matrix is singular (det={det:.3e})")
        condition = np.linalg.cond(A)
        if condition > CONDITION_LIMIT:
            raise SingularMatrixError(f"cone matrix is ill-conditioned (cond={condition:.3e})")

        y_star = np.linalg.solve(A, p_star)
        if not np.all(y_star > 0):
            raise PreconditionError(f"p_star is not interior to the cone: A^-1 p* = {y_star.tolist()}")

        A_norm = A * y_star
        A_norm_inv = np.linalg.inv(A_norm)
        defect = float(np.max(np.abs(A_norm_inv @ p_star - 1.0)))
        if defect > NORMALIZATION_TOL * max(1.0, condition):
            raise SingularMatrixError(f"normalization A_norm^-1 p* = 1 failed by {defect:.3e}")

        object.__setattr__(self, "A", _frozen(A))
        object.__setattr__(self, "p_star", _frozen(p_star))
        object.__setattr__(self, "R", float(self.R))
        object.__setattr__(self, "A_norm", _frozen(A_norm))
        object.__setattr__(self, "A_norm_inv", _frozen(A_norm_inv))
        object.__setattr__(self, "y_star", _frozen(y_star))

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def to_y(self, p) -> np.ndarray:
        """Normalized coordinates y = A_norm^-1 p; accepts a vector or rows of vectors."""
        p = np.asarray(p, dtype=float)
        return p @ self.A_norm_inv.T

    def to_p(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return y @ self.A_norm.T

    def beta(self, alpha) -> np.ndarray:
        """beta = A_norm^T alpha, the class seen in normalized coordinates."""
        return self.A_norm.T @ _alpha_vector(alpha)

    def pairing(self, alpha) -> float:
        """<p*, alpha>."""
        return float(self.p_star @ _alpha_vector(alpha))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n": self.n,
            "A": self.A.tolist(),
            "p_star": self.p_star.tolist(),
            "R": self.R,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ConeSpec":
        n = int(data.get("n", len(data["A"])))
        A = np.array(data["A"], dtype=float).reshape(n, n)
        return cls(A=A, p_star=data["p_star"], R=float(data.get("R", 100.0)))


@dataclass(frozen=True)
class HomologyClass:
    """Nonzero integer winding vector alpha in H_1(T^n, Z)."""

    alpha: Tuple[int, ...]

    def __post_init__(self):
        values = tuple(int(a) for a in self.alpha)
        if any(float(a) != float(b) for a, b in zip(values, self.alpha)):
            raise PreconditionError(f"homology class must be integral, got {self.alpha}")
        if not values or not any(values):
            raise PreconditionError("homology class must have at least one nonzero entry")
        object.__setattr__(self, "alpha", values)

    @property
    def n(self) -> int:
        return len(self.alpha)

    def as_array(self) -> np.ndarray:
        return np.array(self.alpha, dtype=float)

    def __iter__(self):
        return iter(self.alpha)

    def __str__(self) -> str:
        return "(" + ",".join(str(a) for a in self.alpha) + ")"


def _alpha_vector(alpha) -> np.ndarray:
    if isinstance(alpha, HomologyClass):
        return alpha.as_array()
    return np.asarray(alpha, dtype=float)


def dual_cone_basis(cone: ConeSpec) -> np.ndarray:
    """Columns (A^T)^-1 e_i generating the dual cone."""
    basis = np.linalg.solve(cone.A.T, np.eye(cone.n))
    defect = float(np.max(np.abs(cone.A.T @ basis - np.eye(cone.n))))
    if defect > 1e-10:
        raise SingularMatrixError(f"dual basis check A^T B = I failed by {defect:.3e}")
    return basis


def contains(cone: ConeSpec, x) -> bool:
    """Open-cone membership: every coefficient of A^-1 x strictly positive."""
    coefficients = np.linalg.solve(cone.A, np.asarray(x, dtype=float))
    return bool(np.all(coefficients > 0))


def contains_many(cone: ConeSpec, points) -> np.ndarray:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    coefficients = np.linalg.solve(cone.A, points.T).T
    return np.all(coefficients > 0, axis=1)


def in_dual_cone(cone: ConeSpec, alpha) -> bool:
    """alpha in the open dual cone, i.e. <alpha, v_i> > 0 for every generator."""
    return bool(np.all(cone.A.T @ _alpha_vector(alpha) > 0))


def check_cone_separation(cone: ConeSpec, alpha, c: float) -> None:
    """
    Validate the existence hypothesis for class alpha at height c.

    Raises:
        PreconditionError: alpha outside the open dual cone, or <p*, alpha> > c
    """
    if not in_dual_cone(cone, alpha):
        raise PreconditionError(
            f"alpha={tuple(_alpha_vector(alpha).astype(int))} is not in the open dual cone "
            f"(A^T alpha = {(cone.A.T @ _alpha_vector(alpha)).tolist()})"
        )
    pairing = cone.pairing(alpha)
    if pairing > c:
        raise PreconditionError(
            f"cone-separation hypothesis violated: <p*, alpha> = {pairing} exceeds c = {c}"
        )


def default_height(cone: ConeSpec, alphas: Iterable) -> float:
    """Default height c = max <p*, alpha> + 1 over the requested classes."""
    pairings = [cone.pairing(alpha) for alpha in alphas]
    if not pairings:
        raise PreconditionError("at least one homology class is required to pick a default height")
    return max(pairings) + 1.0


def cone_rays(cone: ConeSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Unit generator rays (as rows) of the cone and of its dual."""
    generators = cone.A.T / np.linalg.norm(cone.A, axis=0)[:, None]
    dual = dual_cone_basis(cone)
    dual_generators = dual.T / np.linalg.norm(dual, axis=0)[:, None]
    return generators, dual_generators


def figure_cone(R: float = 100.0) -> ConeSpec:
    """Picture cone spanned by v1 = (-1, 3) and v2 = (3, -1), with p* = v1 + v2."""
    A = np.array([[-1.0, 3.0], [3.0, -1.0]])
    return ConeSpec(A=A, p_star=A.sum(axis=1), R=R)


def arnold_cone(R: float = 100.0) -> ConeSpec:
    """Cone spanned by (1, -1) and (1, 1) with base point p* = (2, 0); it equals its own dual."""
    return ConeSpec(A=np.array([[1.0, 1.0], [-1.0, 1.0]]), p_star=np.array([2.0, 0.0]), R=R)


def rotate_cone(cone: ConeSpec, quarter_turns: int) -> ConeSpec:
    """Rotate a planar cone (and its base point) by quarter_turns * pi/2."""
    if cone.n != 2:
        raise PreconditionError("cone rotation is defined for n = 2 only")
    rotation = np.linalg.matrix_power(np.array([[0.0, -1.0], [1.0, 0.0]]), quarter_turns % 4)
    return ConeSpec(A=rotation @ cone.A, p_star=rotation @ cone.p_star, R=cone.R)


def random_well_conditioned(rng: np.random.Generator, n: int, max_condition: float = 50.0) -> np.ndarray:
    """Draw a random matrix with condition number at most max_condition."""
    while True:
        A = rng.normal(size=(n, n))
        if np.linalg.cond(A) <= max_condition:
            return A
