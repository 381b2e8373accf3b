"""Closed-form prices under the simplified dynamics ``dX̃ = σ̃ X̃^B dW``

All prices are undiscounted (forward measure): they are expected payoffs of
the forward level. Functions broadcast over numpy arrays of states.
"""

__all__ = [
    "Price",
    "SimplifiedModel",
    "bs_call",
    "bachelier_call",
    "bs_down_out_call",
    "bachelier_asian_psi",
    "bachelier_basket_psi",
    "bs_rainbow_max_psi",
    "psi_directional_second_derivative",
    "one_factor_loadings",
    "BARRIER_SHIFT",
]

import logging
import math
import warnings
from collections.abc import Sequence
from dataclasses import dataclass
from typing import TYPE_CHECKING, NamedTuple, Optional, Union

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.stats import norm

from .quadrature import gauss_legendre
from .sde_models import CorrelationFactor, ModelSpec, factor_correlation
from .util import AccuracyWarning, Dynamics, ModelError, PricingError

if TYPE_CHECKING:
    from .payoffs import PathObservables
    from .protocols import PsiFunction

logger = logging.getLogger(__name__)

#: Continuity correction constant ``β₁ = −ζ(1/2)/√(2π)`` for discretely
#: monitored barriers
BARRIER_SHIFT = 0.5826

#: Relative accuracy target of the deterministic rainbow pricer
RAINBOW_TARGET = 1e-6

_TAIL = 8.0
_STEP_SHRINKS = 60

FloatArray = Union[float, np.ndarray]


class Price(NamedTuple):
    """Value with first and second derivative in the state"""

    value: np.ndarray
    delta: np.ndarray
    gamma: np.ndarray


@dataclass(frozen=True, eq=False)
class SimplifiedModel:
    """Auxiliary dynamics ``dX̃_i = σ̃_i (X̃_i)^B dW_i`` with ``d⟨W⟩ = ρ dt``"""

    dynamics: Dynamics
    sigma_tilde: np.ndarray
    corr: CorrelationFactor

    def __post_init__(self):
        sigma = np.atleast_1d(np.asarray(self.sigma_tilde, dtype=float))
        if sigma.ndim != 1 or np.any(sigma <= 0):
            raise ModelError("sigma_tilde entries must be positive")
        if sigma.size != self.corr.dim:
            raise ModelError(
                f"sigma_tilde has {sigma.size} entries, correlation has {self.corr.dim} assets"
            )
        sigma.setflags(write=False)
        object.__setattr__(self, "sigma_tilde", sigma)

    @property
    def exponent(self) -> int:
        """``B``"""
        return int(self.dynamics)

    @property
    def dim(self) -> int:
        return int(self.sigma_tilde.size)

    def diffusion(self, x: np.ndarray) -> np.ndarray:
        """Absolute simplified diffusion ``σ̃ x^B`` for states ``x`` of shape
        ``(n, d)``"""
        if self.dynamics == Dynamics.BACHELIER:
            return np.broadcast_to(self.sigma_tilde, np.shape(x))
        return self.sigma_tilde * x

    @classmethod
    def matching(
        cls,
        model: ModelSpec,
        dynamics: Dynamics,
        maturity: float,
        sigma_tilde: Optional[Sequence[float]] = None,
    ) -> "SimplifiedModel":
        """Simplified model whose diffusion coincides with ``model``'s at
        inception on the forward level: ``σ̃ = σ₀ / F₀^B``

        An explicit ``sigma_tilde`` overrides the matched value.
        """
        if sigma_tilde is None:
            f0 = model.forward0(maturity)
            vol0 = model.vol_state0()
            if dynamics == Dynamics.BLACK_SCHOLES and model.multiplicative_exact:
                # unit levels give the relative volatility without rounding
                sigma = model.diffusion(np.ones_like(f0), vol0)
            elif dynamics == Dynamics.BACHELIER and not model.multiplicative:
                sigma = model.diffusion(f0, vol0)
            else:
                sigma = model.diffusion0(maturity) / f0 ** int(dynamics)
        else:
            sigma = np.asarray(sigma_tilde, dtype=float) * np.ones(model.dim)
        return cls(dynamics, sigma, model.correlation_factor)


def _arrays(*args: FloatArray) -> list[np.ndarray]:
    return list(np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in args)))


def bs_call(forward: FloatArray, strike: FloatArray, sigma: FloatArray, tau: FloatArray) -> Price:
    """Black formula on the forward (undiscounted)

    With zero total volatility the intrinsic value ``max(0, F − K)`` is
    returned with delta ``1{F > K}`` and gamma 0. Non-positive forwards are
    absorbed and worth 0.
    """
    f, k, s, tau = _arrays(forward, strike, sigma, tau)
    v = s * np.sqrt(np.maximum(tau, 0.0))
    live = (v > 0) & (f > 0) & (k > 0)
    vs = np.where(live, v, 1.0)
    fs = np.where(live, f, 1.0)
    ks = np.where(live, k, 1.0)
    d1 = (np.log(fs / ks) + 0.5 * vs * vs) / vs
    d2 = d1 - vs
    value = np.where(live, f * norm.cdf(d1) - k * norm.cdf(d2), np.maximum(f - k, 0.0))
    delta = np.where(live, norm.cdf(d1), (f > k).astype(float))
    gamma = np.where(live, norm.pdf(d1) / (fs * vs), 0.0)
    dead = f <= 0
    value = np.where(dead, 0.0, value)
    delta = np.where(dead, 0.0, delta)
    return Price(value, delta, gamma)


def bachelier_call(
    forward: FloatArray, strike: FloatArray, sigma_abs: FloatArray, tau: FloatArray
) -> Price:
    """Bachelier (normal) call on the forward (undiscounted)"""
    f, k, s, tau = _arrays(forward, strike, sigma_abs, tau)
    v = s * np.sqrt(np.maximum(tau, 0.0))
    return _normal_call(f - k, v)


def _normal_call(moneyness: np.ndarray, v: np.ndarray) -> Price:
    """``E[(m + vZ)⁺]`` and its derivatives in ``m``"""
    live = v > 0
    vs = np.where(live, v, 1.0)
    d = moneyness / vs
    value = np.where(live, moneyness * norm.cdf(d) + vs * norm.pdf(d), np.maximum(moneyness, 0.0))
    delta = np.where(live, norm.cdf(d), (moneyness > 0).astype(float))
    gamma = np.where(live, norm.pdf(d) / vs, 0.0)
    return Price(value, delta, gamma)


def _down_out_value(f, k, h, s, tau, rate):
    v = s * np.sqrt(tau)
    spot = f * np.exp(-rate * tau)
    knocked = spot <= h
    live = (v > 0) & ~knocked
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        vs = np.where(live, v, 1.0)
        ss = np.where(live, s, 1.0)
        sp = np.where(live, spot, 1.0)
        hh = np.where(live, h, 0.5)
        lam = (rate + 0.5 * ss * ss) / (ss * ss)
        ratio = hh / sp
        p1 = ratio ** (2.0 * lam)
        p2 = ratio ** (2.0 * lam - 2.0)
        vanilla = bs_call(f, k, s, tau).value
        # barrier below strike
        y = np.log(hh * hh / (sp * k)) / vs + lam * vs
        low = vanilla - (f * p1 * norm.cdf(y) - k * p2 * norm.cdf(y - vs))
        # barrier above strike
        x1 = np.log(sp / hh) / vs + lam * vs
        y1 = np.log(hh / sp) / vs + lam * vs
        high = (
            f * norm.cdf(x1)
            - k * norm.cdf(x1 - vs)
            - f * p1 * norm.cdf(y1)
            + k * p2 * norm.cdf(y1 - vs)
        )
        value = np.where(hh <= k, low, high)
    intrinsic = np.maximum(f - k, 0.0)
    value = np.where(live, np.maximum(value, 0.0), np.where(knocked, 0.0, intrinsic))
    return value


def bs_down_out_call(
    forward: FloatArray,
    strike: FloatArray,
    barrier: FloatArray,
    sigma: FloatArray,
    tau: FloatArray,
    dt_monitor: float,
    rate: float = 0.0,
) -> Price:
    """Down-and-out call (no rebate) on the spot ``S = F e^{−rτ}``, valued on
    the forward level

    The continuous-barrier formula is evaluated at the shifted barrier
    ``H exp(−β₁ σ √dt_monitor)``, approximating monitoring every
    ``dt_monitor``. Delta and gamma are central differences in ``F``.

    :raises ModelError: non-positive strike or barrier, or ``dt_monitor ≤ 0``
    """
    f, k, h, s, tau = _arrays(forward, strike, barrier, sigma, tau)
    if np.any(k <= 0) or np.any(h <= 0):
        raise ModelError("strike and barrier must be positive")
    if not dt_monitor > 0:
        raise ModelError("dt_monitor must be positive")
    tau = np.maximum(tau, 0.0)
    shifted = h * np.exp(-BARRIER_SHIFT * s * math.sqrt(dt_monitor))

    value = _down_out_value(f, k, shifted, s, tau, rate)
    bump = 1e-4 * np.maximum(np.abs(f), 1.0)
    up = _down_out_value(f + bump, k, shifted, s, tau, rate)
    down = _down_out_value(f - bump, k, shifted, s, tau, rate)
    delta = (up - down) / (2.0 * bump)
    bump2 = 1e-3 * np.maximum(np.abs(f), 1.0)
    up2 = _down_out_value(f + bump2, k, shifted, s, tau, rate)
    down2 = _down_out_value(f - bump2, k, shifted, s, tau, rate)
    gamma = (up2 - 2.0 * value + down2) / (bump2 * bump2)
    return Price(value, delta, gamma)


def bachelier_asian_psi(
    t: float,
    x: FloatArray,
    partial_sum: FloatArray,
    fixings_remaining: Sequence[float],
    strike: float,
    sigma_abs: float,
    *,
    fixings_observed: int = 0,
    scales: Optional[Sequence[float]] = None,
) -> Price:
    """Arithmetic-average call under arithmetic Brownian motion

    ``fixings_remaining`` are the fixing dates not yet observed (a fixing at
    ``t`` itself is still pending). Fixing ``j`` enters the average as
    ``c_j X_{t_j}`` with ``c_j`` from ``scales`` (default 1). Conditional on
    ``X_t = x`` the average is Gaussian with mean
    ``(partial_sum + x Σ c_j) / n`` and variance
    ``(σ²/n²) Σ_{j,l} c_j c_l min(t_j − t, t_l − t)``.
    """
    times = np.asarray(fixings_remaining, dtype=float)
    n = fixings_observed + times.size
    if n < 1:
        raise ModelError("asian payoff without fixings")
    c = np.ones(times.size) if scales is None else np.asarray(scales, dtype=float)
    if c.shape != times.shape:
        raise ModelError("one scale per remaining fixing required")
    x, partial = _arrays(x, partial_sum)

    lag = np.maximum(times - t, 0.0)
    cov = np.minimum.outer(lag, lag)
    var = sigma_abs * sigma_abs * float(c @ cov @ c) / (n * n)
    if var < 0:
        var = 0.0
    slope = math.fsum(c.tolist()) / n
    mean = partial / n + slope * x
    price = _normal_call(mean - strike, np.full_like(mean, math.sqrt(var)))
    return Price(price.value, price.delta * slope, price.gamma * slope * slope)


def bachelier_basket_psi(
    t: float,
    x: np.ndarray,
    weights: np.ndarray,
    strike: float,
    sigma: np.ndarray,
    corr: np.ndarray,
    maturity: float,
) -> Price:
    """Call on ``Σ w_i X_i`` under correlated arithmetic Brownian motions

    ``x`` has shape ``(n, d)``. The returned delta has shape ``(n, d)``; the
    returned gamma is the second derivative in the basket level, so that the
    Hessian is ``gamma · w wᵀ``.

    :raises PricingError: the effective variance is negative
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    w = np.asarray(weights, dtype=float).ravel()
    sigma = np.asarray(sigma, dtype=float).ravel()
    if x.shape[1] != w.size or sigma.size not in (1, w.size):
        raise ModelError("basket dimensions do not agree")
    sw = sigma * w
    tau = max(maturity - t, 0.0)
    var = tau * float(sw @ np.asarray(corr, dtype=float) @ sw)
    if var < -1e-14 * max(1.0, tau * float(sw @ sw)):
        raise PricingError(f"negative basket variance {var:.3g}")
    price = _normal_call(x @ w - strike, np.full(x.shape[0], math.sqrt(max(var, 0.0))))
    return Price(price.value, price.delta[:, None] * w, price.gamma)


def one_factor_loadings(corr: np.ndarray, tol: float = 1e-10) -> Optional[np.ndarray]:
    """Loadings ``a`` with ``ρ_ij = a_i a_j`` for ``i ≠ j``, or ``None`` if
    ``corr`` has no such structure (or a loading has modulus 1)"""
    rho = np.asarray(corr, dtype=float)
    d = rho.shape[0]
    if d == 1:
        return np.zeros(1)
    if d == 2:
        r = float(rho[0, 1])
        a = np.array([math.sqrt(abs(r)), math.copysign(math.sqrt(abs(r)), r)])
    else:
        sq = np.zeros(d)
        for i in range(d):
            others = [j for j in range(d) if j != i]
            cands = [
                rho[i, j] * rho[i, k] / rho[j, k]
                for ji, j in enumerate(others)
                for k in others[ji + 1 :]
                if abs(rho[j, k]) > tol
            ]
            sq[i] = float(np.median(cands)) if cands else 0.0
        if np.any(sq < -tol):
            return None
        a = np.sqrt(np.maximum(sq, 0.0))
        pivot = int(np.argmax(a))
        signs = np.where(rho[pivot] < 0, -1.0, 1.0)
        signs[pivot] = 1.0
        a = a * signs
    implied = np.outer(a, a)
    np.fill_diagonal(implied, 1.0)
    if np.max(np.abs(implied - rho)) > 1e-8 or np.any(np.abs(a) > 1.0 - 1e-8):
        return None
    return a


def _rainbow_one_factor(
    log_x: np.ndarray, s: np.ndarray, a: np.ndarray, strike: float, n_hermite: int, n_legendre: int
) -> np.ndarray:
    """``E[(max_i X_i − K)⁺]`` for lognormals conditionally independent
    given a common factor"""
    z, wz = hermegauss(n_hermite)
    wz = wz / math.sqrt(2.0 * math.pi)
    rule = gauss_legendre(n_legendre)
    b = np.sqrt(1.0 - a * a)
    cond_sd = s * b
    log_k = math.log(strike)
    # conditional log-means, shape (n, H, d)
    m = (log_x - 0.5 * s * s)[:, None, :] + (s * a)[None, None, :] * z[None, :, None]
    total = np.zeros(log_x.shape[0])
    d = log_x.shape[1]
    for i in range(d):
        mi = m[:, :, i]
        lo = np.maximum((log_k - mi) / cond_sd[i], -_TAIL)
        hi = np.full_like(lo, cond_sd[i] + _TAIL)
        length = np.maximum(hi - lo, 0.0)
        u = lo[..., None] + length[..., None] * rule.abscissas
        y = mi[..., None] + cond_sd[i] * u
        integrand = (np.exp(y) - strike) * norm.pdf(u)
        for j in range(d):
            if j != i:
                integrand = integrand * norm.cdf((y - m[:, :, j][..., None]) / cond_sd[j])
        inner = length * (integrand @ rule.weights)
        total += inner @ wz
    return total


def _rainbow_tensor(
    log_x: np.ndarray, s: np.ndarray, factor: np.ndarray, strike: float, n_hermite: int
) -> np.ndarray:
    """Tensor Gauss–Hermite over the correlation factors"""
    z, wz = hermegauss(n_hermite)
    wz = wz / math.sqrt(2.0 * math.pi)
    r = factor.shape[1]
    grids = np.meshgrid(*([z] * r), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    weights = np.prod(np.stack(np.meshgrid(*([wz] * r), indexing="ij"), axis=0), axis=0).ravel()
    corr_z = nodes @ factor.T
    log_t = (log_x - 0.5 * s * s)[:, None, :] + s * corr_z[None, :, :]
    pay = np.maximum(np.exp(log_t).max(axis=2) - strike, 0.0)
    return pay @ weights


def bs_rainbow_max_psi(
    t: float,
    x: np.ndarray,
    strike: float,
    sigma: np.ndarray,
    corr: np.ndarray,
    maturity: float,
    *,
    n_hermite: int = 16,
    n_legendre: int = 32,
) -> np.ndarray:
    """Call on ``max_i X_i`` under correlated geometric Brownian motions

    For a one-factor correlation (equicorrelation in particular) the price is
    computed by conditioning on the common factor: Gauss–Hermite over the
    factor and, per asset ``i``, a fixed Gauss–Legendre integral of
    ``(X_i − K)⁺ Π_{j≠i} P(X_j < X_i)`` in the standardized log-coordinate.
    Other correlations fall back to tensor Gauss–Hermite over the eigen
    factors, warning with :class:`~driftmc.util.AccuracyWarning` when the rule
    and its half rule disagree by more than the target.

    An asset at level zero is absorbed and stays there, so it drops out of the
    maximum; rows are priced on their surviving assets.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    sigma = np.asarray(sigma, dtype=float) * np.ones(x.shape[1])
    rho = np.asarray(corr, dtype=float)
    tau = max(maturity - t, 0.0)
    if x.shape[1] != rho.shape[0]:
        raise ModelError("rainbow dimensions do not agree")
    if np.any(x < 0):
        raise PricingError("rainbow price needs non-negative asset levels")
    alive = x > 0
    if not np.all(alive):
        out = np.zeros(x.shape[0])
        masks, groups = np.unique(alive, axis=0, return_inverse=True)
        for k, mask in enumerate(masks):
            if not mask.any():
                continue
            rows = groups.ravel() == k
            out[rows] = bs_rainbow_max_psi(
                t,
                x[rows][:, mask],
                strike,
                sigma[mask],
                rho[np.ix_(mask, mask)],
                maturity,
                n_hermite=n_hermite,
                n_legendre=n_legendre,
            )
        return out
    s = sigma * math.sqrt(tau)
    if x.shape[1] == 1 or np.all(s <= 0):
        return bs_call(x.max(axis=1), strike, float(s.max()) if tau > 0 else 0.0, 1.0).value

    loads = one_factor_loadings(rho)
    if loads is not None and np.all(s > 0):
        return _rainbow_one_factor(np.log(x), s, loads, strike, n_hermite, n_legendre)

    factor = factor_correlation(rho).matrix
    if factor.shape[1] == 1 and np.allclose(x, x[:, :1]) and np.allclose(s, s[0]) and np.all(factor > 0):
        # identical perfectly correlated assets
        return bs_call(x[:, 0], strike, float(s[0]), 1.0).value
    nodes = 256 if factor.shape[1] == 1 else n_hermite
    fine = _rainbow_tensor(np.log(x), s, factor, strike, nodes)
    coarse = _rainbow_tensor(np.log(x), s, factor, strike, max(2, nodes // 2))
    err = float(np.max(np.abs(fine - coarse) / np.maximum(np.abs(fine), 1e-300)))
    if err > RAINBOW_TARGET:
        warnings.warn(
            f"rainbow tensor quadrature error estimate {err:.2g} exceeds {RAINBOW_TARGET:g}",
            AccuracyWarning,
            stacklevel=2,
        )
    return fine


def psi_directional_second_derivative(
    psi: "PsiFunction",
    t: float,
    x: np.ndarray,
    direction: np.ndarray,
    h: FloatArray,
    obs: Optional["PathObservables"] = None,
    centre: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Central second difference ``[ψ(x + hu) − 2ψ(x) + ψ(x − hu)] / h²``
    along ``u`` for every state in ``x`` (shape ``(n, d)``)

    Where ``x − hu`` leaves the domain of ``ψ`` the step is halved until it
    does not; shrinks are logged at debug level. ``centre`` may carry a
    precomputed ``ψ(x)``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    u = np.broadcast_to(np.asarray(direction, dtype=float), x.shape)
    eps = np.array(np.broadcast_to(np.asarray(h, dtype=float), x.shape[:1]), dtype=float)
    if not np.all(eps > 0):
        raise ModelError("finite-difference step must be positive")
    for _ in range(_STEP_SHRINKS):
        e = eps[:, None] * u
        bad = ~(psi.in_domain(x - e) & psi.in_domain(x + e))
        if not bad.any():
            break
        logger.debug("halving step for %d states leaving the domain at t=%g", int(bad.sum()), t)
        eps = np.where(bad, 0.5 * eps, eps)
    else:
        raise PricingError(f"no admissible finite-difference step at t={t}")
    e = eps[:, None] * u
    mid = psi.value(t, x, obs) if centre is None else centre
    return (psi.value(t, x + e, obs) - 2.0 * mid + psi.value(t, x - e, obs)) / (eps * eps)
