"""Drift-correction estimator ``E Z = ψ(0, X₀) + E ∫₀ᵀ ξ_t dt``

Under the forward formulation both drifts vanish and the correction integrand
is ``ξ_t = ½ [tr(σᵀγσ) − tr(σ̃ᵀγσ̃)]`` with ``γ`` the Hessian of ``ψ`` at the
simulated state. Traces are never formed from a dense Hessian: with
``A = diag(c) C`` and ``C Cᵀ = ρ``, ``tr(Aᵀγ A)`` is the sum of the ``R``
second directional derivatives of ``ψ`` along the columns of ``A``.
"""

__all__ = [
    "QuadratureRule",
    "gauss_legendre",
    "Legendre",
    "Riemann",
    "IntegrationMethod",
    "CorrectionSample",
    "EstimatorReport",
    "directional_laplacian",
    "xi_european",
    "xi_path_dependent",
    "evaluate_xi",
    "integration_nodes",
    "record_mask",
    "integrate_nodes",
    "integrate_correction",
    "estimate_price",
    "estimate_crude",
    "write_xi_profile",
]

import csv
import logging
import math
import os
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .analytic_pricers import SimplifiedModel, psi_directional_second_derivative
from .payoffs import PathObservables, observables_at, payoff_values
from .payoffs import record_mask as payoff_record_mask
from .protocols import PsiFunction
from .quadrature import QuadratureRule, gauss_legendre
from .sde_models import TIME_TOL, CorrelationFactor, PathSet, TimeGrid
from .util import EstimatorError, GridMarker, ModelError, PricingError, mean_stderr

logger = logging.getLogger(__name__)

#: Directions shorter than this (sup norm) contribute nothing to a trace
DEGENERATE_DIRECTION = 1e-14
#: Relative size of the directional finite-difference step
LAPLACIAN_STEP = 1e-3


@dataclass(frozen=True)
class Legendre:
    """Gauss-Legendre rule with ``nodes`` points on every integration segment"""

    nodes: int = 24

    @property
    def label(self) -> str:
        return "legendre"

    @property
    def rule(self) -> QuadratureRule:
        return gauss_legendre(self.nodes)


@dataclass(frozen=True)
class Riemann:
    """Left Riemann sum over every simulation step (grid step at most ``dt``)"""

    dt: float

    @property
    def label(self) -> str:
        return "riemann"


IntegrationMethod = Union[Legendre, Riemann]


def directional_laplacian(
    psi: PsiFunction,
    t: float,
    x: np.ndarray,
    c: np.ndarray,
    factor: CorrelationFactor,
    obs: Optional[PathObservables] = None,
    centre: Optional[np.ndarray] = None,
) -> np.ndarray:
    """``tr(Aᵀγ(t, x)A)`` for ``A = diag(c) C``, one value per row of ``x``

    Costs ``2R`` evaluations of ``ψ`` plus the centre value (reused when
    ``centre`` is given). The step along ``u = A e_i`` is
    ``10⁻³ max(‖x‖∞, 1) / ‖u‖∞``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    c = np.broadcast_to(np.asarray(c, dtype=float), x.shape)
    if centre is None:
        centre = psi.value(t, x, obs)
    h = LAPLACIAN_STEP * np.maximum(np.max(np.abs(x), axis=1), 1.0)
    total = np.zeros(x.shape[0])
    for col in factor.matrix.T:
        u = c * col
        size = np.max(np.abs(u), axis=1)
        live = size >= DEGENERATE_DIRECTION
        if not live.any():
            continue
        u = np.where(live[:, None], u, 0.0)
        step = h / np.where(live, size, 1.0)
        second = psi_directional_second_derivative(psi, t, x, u, step, obs, centre)
        total += np.where(live, second, 0.0)
    return total


def _xi(
    psi: PsiFunction,
    simplified: SimplifiedModel,
    t: float,
    x: np.ndarray,
    sigma_t: np.ndarray,
    obs: Optional[PathObservables],
) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    centre = psi.value(t, x, obs)
    factor = simplified.corr
    original = directional_laplacian(psi, t, x, sigma_t, factor, obs, centre)
    auxiliary = directional_laplacian(psi, t, x, simplified.diffusion(x), factor, obs, centre)
    return 0.5 * (original - auxiliary)


def xi_european(
    t: float,
    x: np.ndarray,
    sigma_t: np.ndarray,
    simplified: SimplifiedModel,
    psi: PsiFunction,
) -> np.ndarray:
    """Correction integrand of a payoff depending on ``X_T`` only

    ``x`` and ``sigma_t`` are the simulated states and absolute diffusion
    coefficients, shape ``(n, d)``.
    """
    if psi.path_dependent:
        raise ModelError("path-dependent ψ needs observables, use xi_path_dependent")
    return _xi(psi, simplified, t, x, sigma_t, None)


def xi_path_dependent(
    t: float,
    x: np.ndarray,
    sigma_t: np.ndarray,
    observables: PathObservables,
    simplified: SimplifiedModel,
    psi: PsiFunction,
) -> np.ndarray:
    """Correction integrand with the history frozen to ``observables``"""
    return _xi(psi, simplified, t, x, sigma_t, observables)


def evaluate_xi(
    psi: PsiFunction,
    paths: PathSet,
    index: int,
    *,
    scale: float = 1.0,
    shift: float = 0.0,
    asset: Optional[int] = None,
) -> np.ndarray:
    """``ξ`` of every path at recorded position ``index``

    ``scale`` and ``shift`` perturb the state of ``asset`` (all assets if
    ``None``) as a change of the initial level does for multiplicative
    (``X_t ↦ λ X_t``, ``σ_t ↦ λ σ_t``) and additive (``X_t ↦ X_t + b``)
    dynamics. Observed history of single-asset payoffs moves along.

    :raises PricingError: ``ψ`` failed or ``ξ`` is not finite; the message
        names the time and path
    """
    t = float(paths.times[index])
    x = paths.assets[:, index, :].copy()
    sigma = paths.vols[:, index, :].copy()
    cols = slice(None) if asset is None else slice(asset, asset + 1)
    x[:, cols] = x[:, cols] * scale + shift
    sigma[:, cols] = sigma[:, cols] * scale

    obs = None
    if psi.path_dependent:
        obs = observables_at(psi.payoff, paths, index)
        if scale != 1.0 or shift != 0.0:
            spot = float(paths.model.spot_factor(t, paths.grid.horizon))
            obs = PathObservables(
                obs.running_min * scale + shift * spot,
                obs.partial_sum * scale + shift * _observed_spot_weight(psi, t, paths),
                obs.fixings_observed,
            )
    try:
        xi = _xi(psi, psi.simplified, t, x, sigma, obs)
    except PricingError as e:
        raise PricingError(
            f"ψ evaluation failed at t={t:.6g} (paths {paths.first_path}.."
            f"{paths.first_path + paths.n_paths - 1}): {e}"
        ) from e
    bad = ~np.isfinite(xi)
    if bad.any():
        path = paths.first_path + int(np.flatnonzero(bad)[0])
        raise PricingError(f"non-finite correction integrand at t={t:.6g} (path {path})")
    return xi


def _observed_spot_weight(psi: PsiFunction, t: float, paths: PathSet) -> float:
    fixes = [f for f in psi.payoff.fixings if f < t - TIME_TOL]
    return math.fsum(float(paths.model.spot_factor(f, paths.grid.horizon)) for f in fixes)


def integration_nodes(
    psi: PsiFunction, grid: TimeGrid, method: IntegrationMethod
) -> tuple[np.ndarray, np.ndarray]:
    """Times and weights of the time integral ``∫₀ᵀ ξ_t dt``

    Legendre rules are applied per segment between consecutive fixing dates
    (``ξ`` jumps where the history grows). Riemann sums use the left
    endpoint of every grid step.

    :raises ModelError: a node time is not on ``grid``, or the grid is
        coarser than the Riemann step
    """
    if isinstance(method, Riemann):
        if grid.dt > method.dt + TIME_TOL:
            raise ModelError(f"grid step {grid.dt} exceeds the Riemann step {method.dt}")
        return grid.times[:-1].copy(), np.diff(grid.times)

    horizon = grid.horizon
    cuts = [f for f in psi.payoff.fixings if 0.0 < f < horizon - TIME_TOL]
    breaks = [0.0, *cuts, horizon]
    times, weights = [], []
    for start, end in zip(breaks[:-1], breaks[1:]):
        t, w = method.rule.nodes(start, end)
        times.append(t)
        weights.append(w)
    times_arr = np.concatenate(times)
    for t in times_arr:
        i = grid.index_of(float(t))
        if not grid.marked(GridMarker.QUADRATURE_NODE)[i]:
            raise ModelError(f"quadrature node {t!r} is not embedded in the grid")
    return times_arr, np.concatenate(weights)


def record_mask(psi: PsiFunction, grid: TimeGrid, methods: Sequence[IntegrationMethod]) -> np.ndarray:
    """Grid times a correction run must record"""
    if any(isinstance(m, Riemann) for m in methods):
        return np.ones(len(grid), dtype=bool)
    mask = payoff_record_mask(grid, psi.payoff)
    for method in methods:
        times, _ = integration_nodes(psi, grid, method)
        for t in times:
            mask[grid.index_of(float(t))] = True
    return mask


@dataclass(eq=False)
class CorrectionSample:
    """Per-path correction integrals ``J_n`` and payoffs ``Z_n``"""

    integrals: np.ndarray
    payoffs: np.ndarray
    node_times: np.ndarray
    node_xi: Optional[np.ndarray] = None
    """``ξ`` per path and node, shape ``(n_paths, n_nodes)``"""
    method: str = "legendre"
    first_path: int = 0

    def __post_init__(self):
        if self.integrals.shape != self.payoffs.shape:
            raise EstimatorError("integrals and payoffs differ in length")
        if not np.all(np.isfinite(self.integrals)):
            raise EstimatorError("non-finite correction integral")

    @property
    def n_paths(self) -> int:
        return int(self.integrals.size)

    def node_xi_mean(self) -> np.ndarray:
        """Path average ``ξ̄(t)`` at every node"""
        if self.node_xi is None:
            raise EstimatorError("per-node values were not kept")
        n = self.node_xi.shape[0]
        return np.array([math.fsum(col) / n for col in self.node_xi.T.tolist()])

    @classmethod
    def concat(cls, samples: Sequence["CorrectionSample"]) -> "CorrectionSample":
        """Merge samples of consecutive path blocks"""
        if not samples:
            raise EstimatorError("no samples to merge")
        samples = sorted(samples, key=lambda s: s.first_path)
        keep = all(s.node_xi is not None for s in samples)
        return cls(
            integrals=np.concatenate([s.integrals for s in samples]),
            payoffs=np.concatenate([s.payoffs for s in samples]),
            node_times=samples[0].node_times,
            node_xi=np.concatenate([s.node_xi for s in samples]) if keep else None,  # type: ignore[misc]
            method=samples[0].method,
            first_path=samples[0].first_path,
        )


def integrate_nodes(
    paths: PathSet,
    times: np.ndarray,
    weights: np.ndarray,
    integrand: Callable[[int], np.ndarray],
    keep_nodes: bool,
) -> tuple[np.ndarray, Optional[np.ndarray]]:
    values = np.empty((paths.n_paths, times.size))
    for k, t in enumerate(times):
        values[:, k] = integrand(paths.index_of(float(t)))
    integrals = np.array([math.fsum(row) for row in (values * weights).tolist()])
    return integrals, values if keep_nodes else None


def integrate_correction(
    paths: PathSet,
    psi: PsiFunction,
    method: IntegrationMethod = Legendre(),
    *,
    keep_nodes: bool = True,
) -> CorrectionSample:
    """Per-path ``J_n = ∫₀ᵀ ξ_t dt`` by ``method``, with the payoffs of the
    same paths

    :raises ModelError: a node time is not recorded in ``paths``
    """
    times, weights = integration_nodes(psi, paths.grid, method)
    logger.debug(
        "integrate %s over %d nodes for paths %d..%d",
        method.label,
        times.size,
        paths.first_path,
        paths.first_path + paths.n_paths - 1,
    )
    integrals, node_xi = integrate_nodes(
        paths, times, weights, lambda i: evaluate_xi(psi, paths, i), keep_nodes
    )
    return CorrectionSample(
        integrals=integrals,
        payoffs=payoff_values(psi.payoff, paths),
        node_times=times,
        node_xi=node_xi,
        method=method.label,
        first_path=paths.first_path,
    )


@dataclass
class EstimatorReport:
    """Estimate with standard error, optionally compared with a benchmark"""

    estimate: float
    stderr: float
    n_paths: int
    method: str
    benchmark_estimate: Optional[float] = None
    benchmark_stderr: Optional[float] = None
    z_score: Optional[float] = None
    variance_ratio: Optional[float] = None
    runtime_ms: Optional[float] = None
    seed: Optional[int] = None
    extras: dict[str, float] = field(default_factory=dict)


def estimate_price(psi0: float, sample: CorrectionSample) -> EstimatorReport:
    """``ψ(0, X₀) + mean(J_n)`` with standard error ``stdev(J_n)/√N``

    :raises EstimatorError: fewer than two paths
    """
    mean, stderr = mean_stderr(sample.integrals)
    return EstimatorReport(
        estimate=float(psi0) + mean,
        stderr=stderr,
        n_paths=sample.n_paths,
        method=sample.method,
        extras={"psi0": float(psi0), "correction": mean},
    )


def estimate_crude(payoffs: np.ndarray) -> EstimatorReport:
    """Plain payoff average"""
    mean, stderr = mean_stderr(payoffs)
    return EstimatorReport(estimate=mean, stderr=stderr, n_paths=int(np.size(payoffs)), method="crude")


def write_xi_profile(sample: CorrectionSample, path: Union[str, os.PathLike]) -> None:
    """Write ``(t, ξ̄(t))`` rows as CSV"""
    means = sample.node_xi_mean()
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["t", "xi_mean"])
        for t, m in zip(sample.node_times.tolist(), means.tolist()):
            writer.writerow([f"{t:.17g}", f"{m:.17g}"])
