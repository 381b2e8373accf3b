"""Simplified-model pricing functions ψ of the payoff families"""

__all__ = [
    "VanillaPsi",
    "BarrierPsi",
    "AsianPsi",
    "BasketPsi",
    "RainbowPsi",
    "make_psi",
    "PAIRINGS",
]

import math
from typing import Optional

import numpy as np
from typing_extensions import override

from . import protocols
from .analytic_pricers import (
    SimplifiedModel,
    bachelier_asian_psi,
    bachelier_basket_psi,
    bachelier_call,
    bs_call,
    bs_down_out_call,
    bs_rainbow_max_psi,
)
from .payoffs import PathObservables, PayoffSpec
from .sde_models import TIME_TOL
from .util import Dynamics, ModelError, PairingError, PayoffKind

#: Payoff families with a closed-form ψ under each simplified dynamics
PAIRINGS: dict[Dynamics, frozenset[PayoffKind]] = {
    Dynamics.BLACK_SCHOLES: frozenset({PayoffKind.VANILLA, PayoffKind.BARRIER, PayoffKind.RAINBOW}),
    Dynamics.BACHELIER: frozenset({PayoffKind.VANILLA, PayoffKind.ASIAN, PayoffKind.BASKET}),
}

_DELTA_STEP = 1e-4
_GAMMA_STEP = 1e-3


class _Psi(protocols.PsiFunction):
    """Shared state and finite-difference derivatives"""

    #: whether level 0 (an absorbed Black-Scholes asset) is a valid state
    absorbing = False

    def __init__(self, payoff: PayoffSpec, simplified: SimplifiedModel):
        self._payoff = payoff
        self._simplified = simplified

    @property
    @override
    def payoff(self) -> PayoffSpec:
        return self._payoff

    @property
    @override
    def simplified(self) -> SimplifiedModel:
        return self._simplified

    def _tau(self, t: float) -> float:
        return max(self.maturity - t, 0.0)

    @override
    def in_domain(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        if self._simplified.dynamics == Dynamics.BACHELIER:
            return np.ones(x.shape[0], dtype=bool)
        if self.absorbing:
            return np.all(x >= 0, axis=1)
        return np.all(x > 0, axis=1)

    @override
    def delta(self, t: float, x: np.ndarray, obs: Optional[PathObservables] = None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.empty_like(x)
        for i in range(x.shape[1]):
            step = _DELTA_STEP * np.maximum(np.abs(x[:, i]), 1.0)
            up, down = x.copy(), x.copy()
            up[:, i] += step
            down[:, i] -= step
            out[:, i] = (self.value(t, up, obs) - self.value(t, down, obs)) / (2.0 * step)
        return out

    @override
    def gamma(self, t: float, x: np.ndarray, obs: Optional[PathObservables] = None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != 1:
            raise ModelError("gamma is only defined for single-asset ψ")
        step = _GAMMA_STEP * np.maximum(np.abs(x), 1.0)
        mid = self.value(t, x, obs)
        return (self.value(t, x + step, obs) - 2.0 * mid + self.value(t, x - step, obs)) / (
            step[:, 0] ** 2
        )


class VanillaPsi(_Psi):
    """``E[(X̃_T − K)⁺]`` by the Black or Bachelier formula"""

    absorbing = True

    def _price(self, t: float, x: np.ndarray):
        x = np.atleast_2d(np.asarray(x, dtype=float))[:, 0]
        sigma = float(self._simplified.sigma_tilde[0])
        if self._simplified.dynamics == Dynamics.BLACK_SCHOLES:
            return bs_call(x, self._payoff.strike, sigma, self._tau(t))
        return bachelier_call(x, self._payoff.strike, sigma, self._tau(t))

    @override
    def value(self, t: float, x: np.ndarray, obs: Optional[PathObservables] = None) -> np.ndarray:
        return self._price(t, x).value

    @override
    def delta(self, t: float, x: np.ndarray, obs: Optional[PathObservables] = None) -> np.ndarray:
        return self._price(t, x).delta[:, None]

    @override
    def gamma(self, t: float, x: np.ndarray, obs: Optional[PathObservables] = None) -> np.ndarray:
        return self._price(t, x).gamma


class BarrierPsi(_Psi):
    """Down-and-out call with continuity-corrected barrier

    Paths whose observed spot minimum is at or below the barrier are knocked
    out and worth 0.
    """

    def __init__(
        self, payoff: PayoffSpec, simplified: SimplifiedModel, rate: float, dt_monitor: float
    ):
        super().__init__(payoff, simplified)
        self.rate = rate
        self.dt_monitor = dt_monitor

    @override
    def value(self, t: float, x: np.ndarray, obs: Optional[PathObservables] = None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))[:, 0]
        assert self._payoff.barrier is not None
        price = bs_down_out_call(
            x,
            self._payoff.strike,
            self._payoff.barrier,
            float(self._simplified.sigma_tilde[0]),
            self._tau(t),
            self.dt_monitor,
            self.rate,
        ).value
        if obs is None:
            return price
        return np.where(obs.running_min > self._payoff.barrier, price, 0.0)


class AsianPsi(_Psi):
    """Arithmetic-average call under Bachelier dynamics

    Fixing ``j`` observes the spot ``X_{t_j} e^{−r(T − t_j)}``.
    """

    def __init__(self, payoff: PayoffSpec, simplified: SimplifiedModel, rate: float):
        super().__init__(payoff, simplified)
        self.rate = rate
        fixings = np.asarray(payoff.fixings)
        self._fixings = fixings
        self._scales = np.exp(-rate * (payoff.maturity - fixings))

    def pending(self, t: float) -> int:
        """Index of the first fixing not yet observed at ``t``"""
        return int(np.searchsorted(self._fixings, t - TIME_TOL))

    def _price(self, t: float, x: np.ndarray, obs: Optional[PathObservables]):
        x = np.atleast_2d(np.asarray(x, dtype=float))[:, 0]
        k = self.pending(t)
        if obs is None:
            if k > 0:
                raise ModelError(f"observed fixings required at t={t}")
            partial = np.zeros_like(x)
        else:
            if obs.fixings_observed != k:
                raise ModelError(
                    f"{obs.fixings_observed} fixings observed, {k} expected at t={t}"
                )
            partial = obs.partial_sum
        return bachelier_asian_psi(
            t,
            x,
            partial,
            self._fixings[k:],
            self._payoff.strike,
            float(self._simplified.sigma_tilde[0]),
            fixings_observed=k,
            scales=self._scales[k:],
        )

    @override
    def value(self, t: float, x: np.ndarray, obs: Optional[PathObservables] = None) -> np.ndarray:
        return self._price(t, x, obs).value

    @override
    def delta(self, t: float, x: np.ndarray, obs: Optional[PathObservables] = None) -> np.ndarray:
        return self._price(t, x, obs).delta[:, None]

    @override
    def gamma(self, t: float, x: np.ndarray, obs: Optional[PathObservables] = None) -> np.ndarray:
        return self._price(t, x, obs).gamma


class BasketPsi(_Psi):
    """Weighted-basket call under correlated Bachelier dynamics"""

    def __init__(self, payoff: PayoffSpec, simplified: SimplifiedModel):
        super().__init__(payoff, simplified)
        self._weights = payoff.weight_vector(simplified.dim)
        self._corr = simplified.corr.correlation()

    def _price(self, t: float, x: np.ndarray):
        return bachelier_basket_psi(
            t,
            x,
            self._weights,
            self._payoff.strike,
            self._simplified.sigma_tilde,
            self._corr,
            self.maturity,
        )

    @override
    def value(self, t: float, x: np.ndarray, obs: Optional[PathObservables] = None) -> np.ndarray:
        return self._price(t, x).value

    @override
    def delta(self, t: float, x: np.ndarray, obs: Optional[PathObservables] = None) -> np.ndarray:
        return self._price(t, x).delta

    @override
    def gamma(self, t: float, x: np.ndarray, obs: Optional[PathObservables] = None) -> np.ndarray:
        if self._weights.size != 1:
            raise ModelError("gamma is only defined for single-asset ψ")
        return self._price(t, x).gamma * float(self._weights[0]) ** 2


class RainbowPsi(_Psi):
    """Call on the maximum of correlated Black-Scholes assets"""

    absorbing = True

    def __init__(self, payoff: PayoffSpec, simplified: SimplifiedModel):
        super().__init__(payoff, simplified)
        self._corr = simplified.corr.correlation()

    @override
    def value(self, t: float, x: np.ndarray, obs: Optional[PathObservables] = None) -> np.ndarray:
        return bs_rainbow_max_psi(
            t,
            x,
            self._payoff.strike,
            self._simplified.sigma_tilde,
            self._corr,
            self.maturity,
        )


def make_psi(
    payoff: PayoffSpec,
    simplified: SimplifiedModel,
    *,
    rate: float = 0.0,
    dt_monitor: Optional[float] = None,
) -> protocols.PsiFunction:
    """ψ of ``payoff`` under ``simplified``

    :param rate: rate converting forward to spot levels for payoffs observed
        before maturity
    :param dt_monitor: barrier monitoring step (Barrier only)
    :raises PairingError: no closed form for this payoff under these dynamics
    """
    if payoff.kind not in PAIRINGS[simplified.dynamics]:
        allowed = ", ".join(sorted(k.value for k in PAIRINGS[simplified.dynamics]))
        raise PairingError(
            f"{payoff.kind.value} payoff has no {simplified.dynamics.label} ψ (supported: {allowed})"
        )
    if payoff.kind in (PayoffKind.VANILLA, PayoffKind.BARRIER, PayoffKind.ASIAN) and simplified.dim != 1:
        raise ModelError(f"{payoff.kind.value} ψ is single-asset")
    if payoff.kind == PayoffKind.VANILLA:
        return VanillaPsi(payoff, simplified)
    if payoff.kind == PayoffKind.BARRIER:
        if dt_monitor is None or not dt_monitor > 0 or not math.isfinite(dt_monitor):
            raise ModelError("barrier ψ needs a positive monitoring step")
        return BarrierPsi(payoff, simplified, rate, dt_monitor)
    if payoff.kind == PayoffKind.ASIAN:
        return AsianPsi(payoff, simplified, rate)
    if payoff.kind == PayoffKind.BASKET:
        return BasketPsi(payoff, simplified)
    return RainbowPsi(payoff, simplified)
