"""
The protocol classes declared in this module allow abstracting away the
concrete payoff family behind a simplified-model pricing function.
"""

__all__ = ["PsiFunction"]

from abc import abstractmethod
from typing import Optional, Protocol

import numpy as np

from .analytic_pricers import SimplifiedModel
from .payoffs import PathObservables, PayoffSpec


class PsiFunction(Protocol):
    """Expected payoff ``ψ(t, x; y)`` under simplified dynamics

    States ``x`` are batches of shape ``(n, d)`` (one row per path);
    evaluations return one value per row. For path-dependent payoffs ``y`` is
    the observed history of each path, passed as :class:`PathObservables`.
    At maturity ``ψ(T, x; y)`` is the payoff.
    """

    @property
    @abstractmethod
    def payoff(self) -> PayoffSpec:
        """The priced payoff"""
        raise NotImplementedError

    @property
    @abstractmethod
    def simplified(self) -> SimplifiedModel:
        """The simplified dynamics ``ψ`` is priced under"""
        raise NotImplementedError

    @property
    def maturity(self) -> float:
        return self.payoff.maturity

    @property
    def path_dependent(self) -> bool:
        """Whether ``ψ`` depends on the observed history ``y``"""
        return self.payoff.path_dependent

    @abstractmethod
    def in_domain(self, x: np.ndarray) -> np.ndarray:
        """Mask of the rows of ``x`` inside the state space of the simplified
        dynamics (positive levels for Black-Scholes, zero included where an
        absorbed asset is priced, everything for Bachelier)"""
        raise NotImplementedError

    @abstractmethod
    def value(self, t: float, x: np.ndarray, obs: Optional[PathObservables] = None) -> np.ndarray:
        """``ψ(t, x; y)``, shape ``(n,)``

        ``obs`` must be given for path-dependent payoffs with ``t > 0``.

        :raises PricingError: the evaluation failed
        """
        raise NotImplementedError

    @abstractmethod
    def delta(self, t: float, x: np.ndarray, obs: Optional[PathObservables] = None) -> np.ndarray:
        """Gradient ``δ(t, x; y)``, shape ``(n, d)``"""
        raise NotImplementedError

    @abstractmethod
    def gamma(self, t: float, x: np.ndarray, obs: Optional[PathObservables] = None) -> np.ndarray:
        """Second derivative in the state of single-asset ``ψ``, shape
        ``(n,)``"""
        raise NotImplementedError
