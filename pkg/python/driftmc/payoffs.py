"""Payoff families and their evaluation on simulated paths"""

__all__ = [
    "PayoffSpec",
    "PathObservables",
    "payoff",
    "payoff_values",
    "update_observables",
    "observables_at",
    "record_mask",
    "simulate_payoffs",
]

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .sde_models import TIME_TOL, ModelSpec, PathSet, TimeGrid, simulate
from .util import ModelError, PayoffKind, map_blocks, path_blocks

logger = logging.getLogger(__name__)

#: Paths simulated per block by :func:`simulate_payoffs`
DEFAULT_BLOCK_SIZE = 4096


@dataclass(frozen=True, eq=False)
class PayoffSpec:
    """Call-type payoff of one of the :class:`~driftmc.util.PayoffKind`
    families

    Asian fixings default to quarterly dates ``0.25, 0.5, …, T``. Basket
    weights default to equal weights, filled in by :meth:`for_model`.
    """

    kind: PayoffKind
    strike: float
    maturity: float
    barrier: Optional[float] = None
    """Down-and-out level on the spot asset (Barrier only)"""
    fixing_dates: Optional[tuple[float, ...]] = None
    weights: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        if not self.strike > 0:
            raise ModelError(f"strike must be positive, got {self.strike}")
        if not self.maturity > 0:
            raise ModelError(f"maturity must be positive, got {self.maturity}")

        if self.kind == PayoffKind.BARRIER:
            if self.barrier is None or not self.barrier > 0:
                raise ModelError("barrier payoffs need a positive barrier level")
        elif self.barrier is not None:
            raise ModelError("barrier level given for a non-barrier payoff")

        if self.kind == PayoffKind.ASIAN:
            fixings = self.fixing_dates
            if fixings is None:
                count = round(4 * self.maturity)
                if count < 1 or abs(count - 4 * self.maturity) > 1e-9:
                    raise ModelError(
                        f"quarterly averaging needs a maturity in quarters, got {self.maturity}"
                    )
                fixings = tuple(0.25 * k for k in range(1, count + 1))
            fixings = tuple(float(f) for f in fixings)
            if not fixings:
                raise ModelError("asian payoffs need at least one fixing date")
            if any(b <= a for a, b in zip(fixings, fixings[1:])):
                raise ModelError("fixing dates must be strictly increasing")
            if fixings[0] <= 0 or fixings[-1] > self.maturity + TIME_TOL:
                raise ModelError("fixing dates must lie in (0, T]")
            object.__setattr__(self, "fixing_dates", fixings)
        elif self.fixing_dates:
            raise ModelError("fixing dates given for a non-asian payoff")
        else:
            object.__setattr__(self, "fixing_dates", ())

        if self.weights is not None:
            if self.kind != PayoffKind.BASKET:
                raise ModelError("weights given for a non-basket payoff")
            w = tuple(float(x) for x in self.weights)
            if abs(math.fsum(w) - 1.0) > 1e-12:
                raise ModelError(f"basket weights must sum to 1, got {math.fsum(w)}")
            object.__setattr__(self, "weights", w)

    @property
    def path_dependent(self) -> bool:
        return self.kind in (PayoffKind.BARRIER, PayoffKind.ASIAN)

    @property
    def fixings(self) -> tuple[float, ...]:
        return self.fixing_dates or ()

    def weight_vector(self, dim: int) -> np.ndarray:
        """Basket weights for ``dim`` assets (equal if unspecified)"""
        if self.weights is None:
            return np.full(dim, 1.0 / dim)
        if len(self.weights) != dim:
            raise ModelError(f"basket has {len(self.weights)} weights but {dim} assets")
        return np.asarray(self.weights)

    def for_model(self, model: ModelSpec) -> "PayoffSpec":
        """Check the payoff against ``model`` and fill in defaulted weights

        :raises ModelError: dimension mismatch, or a barrier not below the
            initial spot level
        """
        d = model.dim
        if self.kind in (PayoffKind.VANILLA, PayoffKind.BARRIER, PayoffKind.ASIAN) and d != 1:
            raise ModelError(f"{self.kind.value} payoffs are single-asset, model has {d} assets")
        if self.kind == PayoffKind.BARRIER:
            assert self.barrier is not None
            if not self.barrier < float(np.asarray(model.x0)[0]):
                raise ModelError("down-and-out barrier must lie below the initial level")
        if self.kind == PayoffKind.BASKET:
            return replace(self, weights=tuple(self.weight_vector(d).tolist()))
        return self

    def intrinsic(self, level: np.ndarray) -> np.ndarray:
        """``max(0, level − K)``"""
        return np.maximum(level - self.strike, 0.0)


@dataclass(frozen=True, eq=False)
class PathObservables:
    """Observed history of a batch of paths

    ``partial_sum`` holds the sum of the spot fixings observed so far.
    """

    running_min: np.ndarray
    partial_sum: np.ndarray
    fixings_observed: int = 0

    @classmethod
    def initial(cls, spot0: np.ndarray) -> "PathObservables":
        spot0 = np.asarray(spot0, dtype=float)
        return cls(running_min=spot0.copy(), partial_sum=np.zeros_like(spot0))


def update_observables(
    obs: PathObservables, t: float, x: np.ndarray, fixing_dates: Sequence[float] = ()
) -> PathObservables:
    """Observe spot levels ``x`` at time ``t``

    The fixing counter advances iff ``t`` is a fixing date.
    """
    x = np.asarray(x, dtype=float)
    running_min = np.minimum(obs.running_min, x)
    if any(abs(t - f) <= TIME_TOL for f in fixing_dates):
        return PathObservables(running_min, obs.partial_sum + x, obs.fixings_observed + 1)
    return PathObservables(running_min, obs.partial_sum, obs.fixings_observed)


def observables_at(spec: PayoffSpec, paths: PathSet, index: int) -> PathObservables:
    """History of single-asset ``paths`` at recorded position ``index``

    Fixings strictly before the current time are counted; a fixing at the
    current time is still pending.
    """
    t = float(paths.times[index])
    partial = np.zeros(paths.n_paths)
    observed = 0
    for f in spec.fixings:
        if f >= t - TIME_TOL:
            break
        partial = partial + paths.spot(_fixing_index(paths, f))[:, 0]
        observed += 1
    return PathObservables(paths.spot_min[:, index, 0].copy(), partial, observed)


def _fixing_index(paths: PathSet, t: float) -> int:
    try:
        return paths.index_of(t)
    except ModelError:
        raise ModelError(f"fixing date {t} missing from the simulated path") from None


def payoff_values(spec: PayoffSpec, paths: PathSet) -> np.ndarray:
    """Payoff of every path in ``paths``

    Barrier and Asian payoffs observe spot levels; the barrier is monitored on
    every simulation grid point.

    :raises ModelError: a fixing date is not recorded
    """
    terminal = paths.terminal
    if spec.kind == PayoffKind.VANILLA:
        return spec.intrinsic(terminal[:, 0])
    if spec.kind == PayoffKind.BARRIER:
        assert spec.barrier is not None
        alive = paths.spot_min[:, -1, 0] > spec.barrier
        return np.where(alive, spec.intrinsic(terminal[:, 0]), 0.0)
    if spec.kind == PayoffKind.ASIAN:
        fixes = [paths.spot(_fixing_index(paths, f))[:, 0] for f in spec.fixings]
        return spec.intrinsic(np.mean(np.stack(fixes, axis=1), axis=1))
    if spec.kind == PayoffKind.BASKET:
        return spec.intrinsic(terminal @ spec.weight_vector(paths.dim))
    return spec.intrinsic(np.max(terminal, axis=1))


def payoff(spec: PayoffSpec, path: PathSet) -> float:
    """Payoff of a single-path :class:`~driftmc.sde_models.PathSet`"""
    if path.n_paths != 1:
        raise ModelError(f"expected a single path, got {path.n_paths}")
    return float(payoff_values(spec, path)[0])


def record_mask(grid: TimeGrid, spec: PayoffSpec) -> np.ndarray:
    """Grid times a crude payoff evaluation needs (the fixing dates)"""
    mask = np.zeros(len(grid), dtype=bool)
    for f in spec.fixings:
        mask[grid.index_of(f)] = True
    return mask


def simulate_payoffs(
    model: ModelSpec,
    grid: TimeGrid,
    spec: PayoffSpec,
    n_paths: int,
    seed: int,
    *,
    first_path: int = 0,
    block_size: int = DEFAULT_BLOCK_SIZE,
    threads: Optional[int] = None,
) -> np.ndarray:
    """Crude Monte Carlo payoffs of ``n_paths`` paths, in path order"""
    spec = spec.for_model(model)
    mask = record_mask(grid, spec)

    def run(block: tuple[int, int]) -> np.ndarray:
        first, count = block
        paths = simulate(model, grid, count, seed, first_path=first_path + first, record=mask)
        return payoff_values(spec, paths)

    blocks = list(path_blocks(n_paths, block_size))
    logger.debug("crude payoffs: %d paths in %d blocks", n_paths, len(blocks))
    return np.concatenate(map_blocks(run, blocks, threads))
