"""
Shared numerical helpers: check results, a damped Newton solver and
composite Gauss-Legendre rules.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import qmc

logger = logging.getLogger(__name__)

ARMIJO_SLOPE = 1e-4


@dataclass
class CheckResult:
    """Outcome of a check that reports instead of raising."""

    passed: bool
    witness: Optional[Any] = None
    details: Dict[str, Any] = field(default_factory=dict)

    def __bool__(self) -> bool:
        return bool(self.passed)


@dataclass
class NewtonResult:
    x: np.ndarray
    residual_norm: float
    iterations: int
    converged: bool
    message: str = ""


def newton_solve(
    residual: Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]],
    x0: Sequence[float],
    tol: float = 1e-11,
    max_iter: int = 50,
    max_step: Optional[float] = None,
    region: Optional[Callable[[np.ndarray], bool]] = None,
    min_damping: float = 1e-10,
    accept: Optional[float] = None,
) -> NewtonResult:
    """
    Damped Newton iteration for a square system r(x) = 0.

    Args:
        residual: callable returning (r(x), Dr(x))
        x0: starting point
        tol: stop once ||r|| < tol
        max_step: cap on the Euclidean length of a single step
        region: predicate every accepted iterate must satisfy
        accept: residual level still counted as converged when the line
            search stalls or max_iter is reached (rounding floor)

    Returns:
        NewtonResult; converged is False when the line search stalls,
        the Jacobian is singular or max_iter is reached above accept.

    Note: the merit function is 0.5*||r||^2 with Armijo backtracking.
    """
    x = np.array(x0, dtype=float)
    r, jac = residual(x)
    norm = float(np.linalg.norm(r))
    for iteration in range(1, max_iter + 1):
        if not np.isfinite(norm):
            return NewtonResult(x, norm, iteration - 1, False, "non-finite residual")
        if norm < tol:
            return NewtonResult(x, norm, iteration - 1, True)
        try:
            step = -np.linalg.solve(jac, r)
        except np.linalg.LinAlgError:
            return NewtonResult(x, norm, iteration - 1, False, "singular Jacobian")
        if not np.all(np.isfinite(step)):
            return NewtonResult(x, norm, iteration - 1, False, "singular Jacobian")
        length = float(np.linalg.norm(step))
        if max_step is not None and length > max_step:
            step *= max_step / length

        merit = 0.5 * norm * norm
        damping = 1.0
        while True:
            candidate = x + damping * step
            if region is None or region(candidate):
                r_new, jac_new = residual(candidate)
                norm_new = float(np.linalg.norm(r_new))
                if np.isfinite(norm_new) and 0.5 * norm_new ** 2 <= (1.0 - 2.0 * ARMIJO_SLOPE * damping) * merit:
                    break
            damping *= 0.5
            if damping < min_damping:
                if accept is not None and norm < accept:
                    return NewtonResult(x, norm, iteration, True, "stalled at rounding floor")
                return NewtonResult(x, norm, iteration, False, "line search stalled")
        x, r, jac, norm = candidate, r_new, jac_new, norm_new

    converged = norm < (tol if accept is None else max(tol, accept))
    return NewtonResult(x, norm, max_iter, converged, "" if converged else "iteration limit")


def refine_breaks(breaks: Sequence[float], pieces: int) -> List[float]:
    """Split every panel of a break list into equal pieces."""
    if pieces <= 1:
        return list(breaks)
    refined: List[float] = []
    for lo, hi in zip(breaks[:-1], breaks[1:]):
        refined.extend(np.linspace(lo, hi, pieces + 1)[:-1].tolist())
    refined.append(float(breaks[-1]))
    return refined


@lru_cache(maxsize=16)
def gauss_legendre(order: int) -> Tuple[np.ndarray, np.ndarray]:
    nodes, weights = np.polynomial.legendre.leggauss(order)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def composite_rule(breaks: Sequence[float], order: int) -> Tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on consecutive panels [breaks[k], breaks[k+1]]."""
    ref_nodes, ref_weights = gauss_legendre(order)
    nodes: List[np.ndarray] = []
    weights: List[np.ndarray] = []
    for lo, hi in zip(breaks[:-1], breaks[1:]):
        if hi <= lo:
            continue
        half = 0.5 * (hi - lo)
        nodes.append(half * ref_nodes + 0.5 * (hi + lo))
        weights.append(half * ref_weights)
    if not nodes:
        return np.empty(0), np.empty(0)
    return np.concatenate(nodes), np.concatenate(weights)


def panel_breaks(lo: float, hi: float, interior: Iterable[float]) -> List[float]:
    """Sorted break list for [lo, hi] including the interior points that fall strictly inside."""
    inner = sorted({float(p) for p in interior if lo < p < hi})
    return [float(lo), *inner, float(hi)]


def ordered_map(func: Callable[[Any], Any], items: Sequence[Any], threads: int = 1) -> List[Any]:
    """Map over items, in a thread pool when threads > 1; result order follows the input."""
    if threads <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(func, items))


def sobol_points(dimension: int, count: int, seed: int = 0) -> np.ndarray:
    """First `count` points of a scrambled Sobol sequence in the unit cube."""
    if count <= 0:
        return np.empty((0, dimension))
    sampler = qmc.Sobol(d=dimension, scramble=True, seed=seed)
    return sampler.random_base2(m=max(0, math.ceil(math.log2(count))))[:count]
