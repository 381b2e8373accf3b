"""Gauss-Legendre quadrature on the unit interval"""

__all__ = ["QuadratureRule", "gauss_legendre"]

import functools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .util import ModelError

_NEWTON_TOL = 1e-15
_NEWTON_MAX_ITER = 100


@dataclass(frozen=True)
class QuadratureRule:
    """``L``-point rule ``∫₀¹ f ≈ Σ w_k f(a_k)``

    Exact for polynomials up to degree ``2L − 1``.
    """

    abscissas: np.ndarray
    """Nodes ``a_k`` in (0, 1), ascending"""
    weights: np.ndarray
    """Weights ``w_k``, summing to 1"""

    @property
    def size(self) -> int:
        """Node count ``L``"""
        return int(self.abscissas.size)

    def nodes(self, start: float, end: float) -> tuple[np.ndarray, np.ndarray]:
        """Nodes and weights mapped to ``[start, end]``"""
        length = end - start
        return start + self.abscissas * length, self.weights * length

    def integrate(
        self, f: Callable[[np.ndarray], np.ndarray], start: float = 0.0, end: float = 1.0
    ) -> float:
        """Integrate a vectorized ``f`` over ``[start, end]``"""
        t, w = self.nodes(start, end)
        return math.fsum((w * np.asarray(f(t), dtype=float)).tolist())


def _legendre(n: int, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``P_n(x)`` and ``P_{n-1}(x)`` by the three-term recurrence"""
    p_prev = np.ones_like(x)
    p = x.copy()
    if n == 0:
        return p_prev, np.zeros_like(x)
    for k in range(2, n + 1):
        p_prev, p = p, ((2 * k - 1) * x * p - (k - 1) * p_prev) / k
    return p, p_prev


@functools.lru_cache(maxsize=64)
def gauss_legendre(nodes: int) -> QuadratureRule:
    """Gauss-Legendre rule with ``nodes`` points, mapped to (0, 1)

    The roots of ``P_L`` are found by Newton iteration from the Chebyshev-like
    initial guess ``cos(π(i + 3/4)/(L + 1/2))``. Only the non-negative half is
    iterated; the rule is completed by symmetry.
    """
    if nodes < 1:
        raise ModelError(f"quadrature needs at least one node, got {nodes}")

    half = (nodes + 1) // 2
    x = np.cos(np.pi * (np.arange(half) + 0.75) / (nodes + 0.5))
    dp = np.ones_like(x)
    for _ in range(_NEWTON_MAX_ITER):
        p, p_prev = _legendre(nodes, x)
        dp = nodes * (x * p - p_prev) / (x * x - 1.0)
        step = p / dp
        x = x - step
        if np.max(np.abs(step)) <= _NEWTON_TOL:
            break
    p, p_prev = _legendre(nodes, x)
    dp = nodes * (x * p - p_prev) / (x * x - 1.0)
    w = 2.0 / ((1.0 - x * x) * dp * dp)

    if nodes % 2 == 1:
        # the middle root is exactly zero
        x[-1] = 0.0
        roots = np.concatenate([-x, x[-2::-1]])
        weights = np.concatenate([w, w[-2::-1]])
    else:
        roots = np.concatenate([-x, x[::-1]])
        weights = np.concatenate([w, w[::-1]])

    abscissas = 0.5 * (1.0 + roots)
    weights = 0.5 * weights
    weights = weights / math.fsum(weights.tolist())
    abscissas.setflags(write=False)
    weights.setflags(write=False)
    return QuadratureRule(abscissas=abscissas, weights=weights)
