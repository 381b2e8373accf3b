"""Forward delta and gamma

The drift-correction Greeks differentiate the estimator pathwise in the
initial level ``X₀``. For multiplicative dynamics ``X_t(λX₀) = λX_t(X₀)``,
so the correction term of the delta is ``E ∫ ∂ξ/∂λ dt / X₀``, where the
derivative scales the simulated state, its absolute diffusion and the
observed history together. Written with the relative volatility
``σ_t / X_t`` held fixed, this is ``E ∫ (X_t/X₀) ∂ξ/∂X dt``: the absolute
diffusion ``σ_t`` moves with ``X``. Additive dynamics (ABM) shift instead of
scale, with ``σ_t`` unchanged.
"""

__all__ = [
    "GreekReport",
    "pathwise_correction",
    "delta_drift_correction",
    "gamma_drift_correction",
    "delta_bump_revalue",
    "greek_asset",
    "greek_report_from",
]

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .correction_engine import (
    IntegrationMethod,
    Legendre,
    evaluate_xi,
    integrate_nodes,
    integration_nodes,
)
from .payoffs import PayoffSpec, simulate_payoffs
from .protocols import PsiFunction
from .sde_models import ModelSpec, PathSet, TimeGrid
from .util import GreekMethod, GreeksError, ModelError, ModelKind, PayoffKind, mean_stderr

logger = logging.getLogger(__name__)

#: Relative step of the pathwise first derivative
DELTA_STEP = 1e-4
#: Relative step of the pathwise second derivative
GAMMA_STEP = 1e-3


@dataclass
class GreekReport:
    """Delta (and optionally gamma) estimate with standard errors"""

    delta: float
    stderr_delta: float
    method: GreekMethod
    gamma: Optional[float] = None
    stderr_gamma: Optional[float] = None
    asset: int = 0
    """Asset the Greek refers to"""
    approximate: bool = False
    """Whether ``∂X_t/∂X₀ = X_t/X₀`` only holds approximately (SABR, β < 1)"""
    n_paths: int = 0


def greek_asset(model: ModelSpec) -> int:
    """Asset whose delta is reported: the one with the highest initial
    volatility"""
    vol = model.diffusion0(1.0) / model.forward0(1.0)
    return int(np.argmax(vol))


def _check(model: ModelSpec, payoff: PayoffSpec) -> None:
    if payoff.kind == PayoffKind.BARRIER:
        raise GreeksError("barrier deltas are not supported: the payoff is discontinuous")
    if model.kind == ModelKind.ABM and payoff.path_dependent:
        raise GreeksError("path-dependent Greeks under additive dynamics are not supported")
    if model.kind == ModelKind.SABR and not model.multiplicative_exact:
        logger.debug("SABR beta < 1: pathwise scaling X_t/X0 is an approximation")


def _perturbed(psi: PsiFunction, paths: PathSet, index: int, bump: float, asset: int) -> np.ndarray:
    if paths.model.kind == ModelKind.ABM:
        return evaluate_xi(psi, paths, index, shift=bump, asset=asset)
    return evaluate_xi(psi, paths, index, scale=1.0 + bump, asset=asset)


def pathwise_correction(
    paths: PathSet,
    psi: PsiFunction,
    method: IntegrationMethod = Legendre(),
    *,
    order: int = 1,
    asset: int = 0,
) -> np.ndarray:
    """Per-path ``∫ ∂ᵏξ/∂X₀ᵏ dt`` for ``k = order`` (1 or 2)"""
    if order not in (1, 2):
        raise ModelError(f"unsupported derivative order {order}")
    _check(paths.model, psi.payoff)
    x0 = float(paths.model.forward0(paths.grid.horizon)[asset])
    additive = paths.model.kind == ModelKind.ABM
    step = DELTA_STEP if order == 1 else GAMMA_STEP
    # multiplicative perturbations are relative to X0, additive ones absolute
    h = step * (max(abs(x0), 1.0) if additive else 1.0)
    norm = 1.0 if additive else x0

    def integrand(i: int) -> np.ndarray:
        up = _perturbed(psi, paths, i, h, asset)
        down = _perturbed(psi, paths, i, -h, asset)
        if order == 1:
            return (up - down) / (2.0 * h * norm)
        mid = evaluate_xi(psi, paths, i)
        return (up - 2.0 * mid + down) / (h * h * norm * norm)

    times, weights = integration_nodes(psi, paths.grid, method)
    integrals, _ = integrate_nodes(paths, times, weights, integrand, keep_nodes=False)
    return integrals


def _x0_state(paths: PathSet) -> np.ndarray:
    return paths.model.forward0(paths.grid.horizon)[None, :]


def delta_drift_correction(
    paths: PathSet,
    psi: PsiFunction,
    method: IntegrationMethod = Legendre(),
    *,
    asset: Optional[int] = None,
) -> GreekReport:
    """``Δ = ∂ψ/∂X₀ + E ∫ (X_t/X₀) ∂ξ/∂X dt``

    ``∂ξ/∂X`` is taken at fixed relative volatility, so the absolute
    diffusion of a multiplicative model scales along with the state.

    :param asset: asset to differentiate in (default: highest volatility)
    :raises GreeksError: barrier payoffs, path-dependent additive dynamics
    """
    asset = greek_asset(paths.model) if asset is None else asset
    base = float(psi.delta(0.0, _x0_state(paths))[0, asset])
    correction = pathwise_correction(paths, psi, method, order=1, asset=asset)
    return greek_report_from(base, correction, paths.model, asset)


def greek_report_from(
    base: float,
    correction: np.ndarray,
    model: ModelSpec,
    asset: int,
    gamma_base: Optional[float] = None,
    gamma_correction: Optional[np.ndarray] = None,
) -> GreekReport:
    """Assemble a drift-correction :class:`GreekReport` from per-path
    correction integrals"""
    mean, stderr = mean_stderr(correction)
    report = GreekReport(
        delta=base + mean,
        stderr_delta=stderr,
        method=GreekMethod.DRIFT_CORRECTION,
        asset=asset,
        approximate=model.multiplicative and not model.multiplicative_exact,
        n_paths=int(correction.size),
    )
    if gamma_base is not None and gamma_correction is not None:
        gmean, gse = mean_stderr(gamma_correction)
        report.gamma = gamma_base + gmean
        report.stderr_gamma = gse
    return report


def gamma_drift_correction(
    paths: PathSet,
    psi: PsiFunction,
    method: IntegrationMethod = Legendre(),
) -> GreekReport:
    """``Γ = ∂²ψ/∂X₀² + E ∫ (X_t/X₀)² ∂²ξ/∂X² dt`` for a single asset

    The returned report carries the delta too.
    """
    if paths.dim != 1:
        raise GreeksError("gamma is only supported for single-asset payoffs")
    state = _x0_state(paths)
    delta = pathwise_correction(paths, psi, method, order=1)
    gamma = pathwise_correction(paths, psi, method, order=2)
    return greek_report_from(
        float(psi.delta(0.0, state)[0, 0]),
        delta,
        paths.model,
        0,
        float(psi.gamma(0.0, state)[0]),
        gamma,
    )


def delta_bump_revalue(
    model: ModelSpec,
    payoff: PayoffSpec,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    bump: float = 0.01,
    *,
    asset: Optional[int] = None,
    gamma: bool = False,
) -> GreekReport:
    """Central difference of crude Monte Carlo prices with common random
    numbers: ``(Z(X₀(1+b)) − Z(X₀(1−b))) / (2 b F₀)`` per path

    With ``gamma`` the unbumped payoffs are simulated too and the second
    difference is reported.
    """
    if not bump > 0:
        raise ModelError("bump must be positive")
    asset = greek_asset(model) if asset is None else asset
    x0 = np.asarray(model.x0, dtype=float)
    f0 = float(model.forward0(grid.horizon)[asset])

    def bumped(factor: float) -> np.ndarray:
        shifted = x0.copy()
        shifted[asset] *= factor
        return simulate_payoffs(model.with_x0(shifted), grid, payoff, n_paths, seed)

    up, down = bumped(1.0 + bump), bumped(1.0 - bump)
    delta, se = mean_stderr((up - down) / (2.0 * bump * f0))
    report = GreekReport(
        delta=delta,
        stderr_delta=se,
        method=GreekMethod.BUMP_REVALUE,
        asset=asset,
        n_paths=n_paths,
    )
    if gamma:
        mid = simulate_payoffs(model, grid, payoff, n_paths, seed)
        g, gse = mean_stderr((up - 2.0 * mid + down) / (bump * f0) ** 2)
        report.gamma, report.stderr_gamma = g, gse
    logger.debug("bump delta %.6g ± %.2g (bump %g, %d paths)", delta, se, bump, n_paths)
    if not math.isfinite(delta):
        raise GreeksError("bump-and-revalue delta is not finite")
    return report
