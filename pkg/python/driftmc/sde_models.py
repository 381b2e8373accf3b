"""Original dynamics: model description, simulation grid and path simulation

All simulation is done on forward levels ``F_t = X_t e^{r(T−t)}`` with zero
drift. Payoffs observing the asset before maturity convert back to spot levels
through :meth:`ModelSpec.spot_factor`.
"""

__all__ = [
    "HestonParams",
    "SABRParams",
    "ModelSpec",
    "CorrelationFactor",
    "TimeGrid",
    "PathSet",
    "factor_correlation",
    "build_grid",
    "simulate",
]

import functools
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np
from typing_extensions import Never, Self

from .quadrature import QuadratureRule
from .util import GridMarker, ModelError, ModelKind, SimulationError

logger = logging.getLogger(__name__)

#: Time tolerance used when merging and looking up grid times
TIME_TOL = 1e-12
#: Eigenvalues below this are treated as zero when factoring correlations
EIGEN_TOL = 1e-12

#: Upper bound on normals drawn per time block (per path block)
_NORMALS_PER_BLOCK = 1 << 22

ArrayLike = Union[float, Sequence[float], np.ndarray]


def _vector(value: ArrayLike, dim: int, name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.size == 1 and dim > 1:
        arr = np.full(dim, float(arr[0]))
    if arr.shape != (dim,):
        raise ModelError(f"{name} must have length {dim}, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class HestonParams:
    """``dv = κ(θ − v)dt + γ√v dZ``, ``dW dZ = ρ_sv dt``"""

    v0: ArrayLike
    kappa: float
    theta: ArrayLike
    gamma: float
    rho_sv: float
    r: float = 0.0


@dataclass(frozen=True, eq=False)
class SABRParams:
    """``dX = v X^β dW``, ``dv = α v dZ``, ``dW dZ = ρ_sv dt``"""

    v0: ArrayLike
    alpha: float
    beta: float
    rho_sv: float = 0.0


@dataclass(frozen=True, eq=False)
class CorrelationFactor:
    """Factor ``C`` with ``C Cᵀ = ρ``

    Column ``i`` is ``√λ_i v_i`` for the ``i``-th largest eigenvalue ``λ_i`` of
    ``ρ`` with eigenvector ``v_i``; eigenvalues below ``1e−12`` are dropped.
    """

    matrix: np.ndarray
    """``d × R`` factor"""
    eigenvalues: np.ndarray
    """The ``R`` retained eigenvalues, descending"""

    @property
    def rank(self) -> int:
        """Effective rank ``R``"""
        return int(self.matrix.shape[1])

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[0])

    def correlation(self) -> np.ndarray:
        """Reconstructed ``C Cᵀ``"""
        return self.matrix @ self.matrix.T


def factor_correlation(rho: ArrayLike) -> CorrelationFactor:
    """Eigen-factor a correlation matrix

    :raises ModelError: ``rho`` is not square, symmetric, unit-diagonal or
        positive semi-definite
    """
    rho = np.atleast_2d(np.asarray(rho, dtype=float))
    d = rho.shape[0]
    if rho.shape != (d, d):
        raise ModelError(f"correlation matrix must be square, got shape {rho.shape}")
    if np.max(np.abs(rho - rho.T)) > TIME_TOL:
        raise ModelError("correlation matrix is not symmetric")
    if np.max(np.abs(np.diag(rho) - 1.0)) > TIME_TOL:
        raise ModelError("correlation matrix must have a unit diagonal")

    lam, vecs = np.linalg.eigh(rho)
    if lam.min() < -EIGEN_TOL:
        raise ModelError(
            f"correlation matrix is not positive semi-definite (eigenvalue {lam.min():.3g})"
        )
    order = np.argsort(-lam, kind="stable")
    lam, vecs = lam[order], vecs[:, order]
    keep = lam >= EIGEN_TOL
    lam, vecs = lam[keep], vecs[:, keep]

    # deterministic sign: largest entry of each column is positive
    pivots = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[pivots, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    c = vecs * signs * np.sqrt(lam)

    err = np.max(np.abs(c @ c.T - rho))
    if err > 1e-10:
        raise ModelError(f"correlation factor does not reproduce the matrix (error {err:.3g})")
    c.setflags(write=False)
    lam.setflags(write=False)
    return CorrelationFactor(matrix=c, eigenvalues=lam)


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Original dynamics ``dX_t = σ_t dW_t`` of ``d`` correlated assets

    Exactly one parameter block matching ``kind`` must be present: ``heston``,
    ``sabr``, or ``sigma`` (GBM/ABM).
    """

    kind: ModelKind
    x0: ArrayLike
    heston: Optional[HestonParams] = None
    sabr: Optional[SABRParams] = None
    sigma: Optional[ArrayLike] = None
    """Per-asset volatility of GBM (relative) or ABM (absolute) dynamics"""
    asset_corr: Optional[ArrayLike] = None
    """``d × d`` asset correlation; identity if omitted"""

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if x0.ndim != 1 or x0.size < 1:
            raise ModelError("x0 must be a non-empty vector")
        if np.any(x0 <= 0):
            raise ModelError("initial asset levels must be positive")
        x0.setflags(write=False)
        object.__setattr__(self, "x0", x0)
        d = x0.size

        if (self.kind == ModelKind.HESTON) != (self.heston is not None):
            raise ModelError("heston parameters must be given iff kind is HESTON")
        if (self.kind == ModelKind.SABR) != (self.sabr is not None):
            raise ModelError("sabr parameters must be given iff kind is SABR")
        if (self.kind in (ModelKind.GBM, ModelKind.ABM)) != (self.sigma is not None):
            raise ModelError("sigma must be given iff kind is GBM or ABM")

        if self.heston is not None:
            h = self.heston
            v0 = _vector(h.v0, d, "v0")
            theta = _vector(h.theta, d, "theta")
            if np.any(v0 <= 0):
                raise ModelError("v0 entries must be positive")
            if h.kappa < 0 or h.gamma < 0:
                raise ModelError("kappa and gamma must be non-negative")
            if not -1.0 <= h.rho_sv <= 1.0:
                raise ModelError("rho_sv must lie in [-1, 1]")
            object.__setattr__(self, "heston", replace(h, v0=v0, theta=theta))
        if self.sabr is not None:
            s = self.sabr
            v0 = _vector(s.v0, d, "v0")
            if np.any(v0 <= 0):
                raise ModelError("v0 entries must be positive")
            if s.alpha < 0:
                raise ModelError("alpha must be non-negative")
            if not 0.0 <= s.beta <= 1.0:
                raise ModelError("beta must lie in [0, 1]")
            if not -1.0 <= s.rho_sv <= 1.0:
                raise ModelError("rho_sv must lie in [-1, 1]")
            object.__setattr__(self, "sabr", replace(s, v0=v0))
        if self.sigma is not None:
            sigma = _vector(self.sigma, d, "sigma")
            if np.any(sigma < 0):
                raise ModelError("sigma entries must be non-negative")
            object.__setattr__(self, "sigma", sigma)

        corr = np.eye(d) if self.asset_corr is None else self.asset_corr
        corr = np.atleast_2d(np.asarray(corr, dtype=float))
        if corr.shape != (d, d):
            raise ModelError(f"asset_corr must be {d}x{d}, got shape {corr.shape}")
        corr.setflags(write=False)
        object.__setattr__(self, "asset_corr", corr)
        # validates symmetry, diagonal and PSD
        _ = self.correlation_factor

    @property
    def dim(self) -> int:
        """Number of assets ``d``"""
        return int(np.asarray(self.x0).size)

    @functools.cached_property
    def correlation_factor(self) -> CorrelationFactor:
        return factor_correlation(np.asarray(self.asset_corr))

    @property
    def rate(self) -> float:
        """Deterministic rate absorbed by the forward formulation"""
        return float(self.heston.r) if self.heston is not None else 0.0

    def spot_factor(self, t: Union[float, np.ndarray], horizon: float):
        """``e^{−r(T−t)}``, mapping forward levels to spot levels"""
        return np.exp(-self.rate * (horizon - np.asarray(t, dtype=float)))

    def forward0(self, horizon: float) -> np.ndarray:
        """Initial forward levels ``F₀ = X₀ e^{rT}``"""
        return np.asarray(self.x0) * math.exp(self.rate * horizon)

    def vol_state0(self) -> np.ndarray:
        """Initial volatility state (``v₀`` or ``σ``)"""
        if self.heston is not None:
            return np.asarray(self.heston.v0)
        if self.sabr is not None:
            return np.asarray(self.sabr.v0)
        return np.asarray(self.sigma)

    def diffusion(self, x: np.ndarray, vol: np.ndarray) -> np.ndarray:
        """Absolute diffusion coefficient of each asset for levels ``x`` and
        volatility state ``vol``"""
        if self.kind == ModelKind.HESTON:
            return np.sqrt(np.maximum(vol, 0.0)) * x
        if self.kind == ModelKind.SABR:
            assert self.sabr is not None
            return vol * np.maximum(x, 0.0) ** self.sabr.beta
        if self.kind == ModelKind.GBM:
            return vol * x
        return vol * np.ones_like(x)

    def diffusion0(self, horizon: float) -> np.ndarray:
        """Initial diffusion coefficient on the forward level"""
        return self.diffusion(self.forward0(horizon), self.vol_state0())

    @property
    def multiplicative(self) -> bool:
        """Whether ``∂X_t/∂X₀ = X_t/X₀`` holds pathwise (exactly or, for SABR
        with ``β < 1``, approximately)"""
        return self.kind != ModelKind.ABM

    @property
    def multiplicative_exact(self) -> bool:
        if self.kind == ModelKind.SABR:
            assert self.sabr is not None
            return self.sabr.beta == 1.0
        return self.kind != ModelKind.ABM

    def with_x0(self, x0: ArrayLike) -> "ModelSpec":
        """Copy with different initial levels"""
        return replace(self, x0=x0)


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Simulation times ``0 = t_0 < … < t_n = T`` with markers"""

    times: np.ndarray
    markers: np.ndarray
    """:class:`~driftmc.util.GridMarker` flags per time"""
    dt: float
    """Configured maximum step"""

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def mean_step(self) -> float:
        """Average realized step (at most :attr:`dt`)"""
        return self.horizon / (self.times.size - 1)

    def __len__(self) -> int:
        return int(self.times.size)

    def index_of(self, t: float) -> int:
        """Index of ``t`` in :attr:`times`

        :raises ModelError: ``t`` is not a grid time (within ``1e−12``)
        """
        i = int(np.searchsorted(self.times, t - TIME_TOL))
        if i >= self.times.size or abs(self.times[i] - t) > TIME_TOL:
            raise ModelError(f"time {t!r} is not on the simulation grid")
        return i

    def marked(self, marker: GridMarker) -> np.ndarray:
        """Boolean mask of the times carrying ``marker``"""
        return (self.markers & int(marker)) != 0


def build_grid(
    horizon: float,
    dt: float,
    quad: Optional[QuadratureRule] = None,
    fixings: Sequence[float] = (),
    segments: Optional[Sequence[float]] = None,
) -> TimeGrid:
    """Uniform grid of step at most ``dt`` with embedded quadrature nodes and
    fixing dates

    Quadrature nodes are placed on every segment between consecutive break
    points; the break points are ``segments`` if given, the fixing dates
    otherwise (always including 0 and ``horizon``).

    :raises ModelError: non-positive ``horizon``/``dt`` or a fixing outside
        ``[0, horizon]``
    """
    if not horizon > 0 or not dt > 0:
        raise ModelError("horizon and dt must be positive")
    fixings = [float(f) for f in fixings]
    for f in fixings:
        if f < -TIME_TOL or f > horizon + TIME_TOL:
            raise ModelError(f"fixing date {f} outside [0, {horizon}]")
    fixings = [min(max(f, 0.0), horizon) for f in fixings]

    steps = max(1, math.ceil(horizon / dt - TIME_TOL))
    base = np.arange(steps + 1, dtype=float) * (horizon / steps)
    base[-1] = horizon

    extra_t: list[float] = []
    extra_m: list[int] = []
    for f in fixings:
        extra_t.append(f)
        extra_m.append(GridMarker.FIXING_DATE)
    if quad is not None:
        cuts = fixings if segments is None else [float(s) for s in segments]
        breaks = sorted({0.0, horizon, *(c for c in cuts if 0.0 < c < horizon)})
        for start, end in zip(breaks[:-1], breaks[1:]):
            nodes, _ = quad.nodes(start, end)
            extra_t.extend(nodes.tolist())
            extra_m.extend([GridMarker.QUADRATURE_NODE] * nodes.size)

    # marked times first so that they win ties against plain stepping times
    all_t = np.concatenate([np.asarray(extra_t, dtype=float), base])
    all_m = np.concatenate(
        [np.asarray(extra_m, dtype=np.int64), np.zeros(base.size, dtype=np.int64)]
    )
    order = np.argsort(all_t, kind="stable")
    times: list[float] = []
    markers: list[int] = []
    for t, m in zip(all_t[order].tolist(), all_m[order].tolist()):
        if times and t - times[-1] <= TIME_TOL:
            if markers[-1] == 0 and m != 0:
                times[-1] = t
            markers[-1] |= m
            continue
        times.append(t)
        markers.append(m)
    times[0] = 0.0
    times[-1] = horizon

    grid_times = np.asarray(times)
    grid_markers = np.asarray(markers, dtype=np.int64)
    grid_times.setflags(write=False)
    grid_markers.setflags(write=False)
    logger.debug(
        "grid: T=%g, dt=%g, %d times (%d marked)",
        horizon,
        dt,
        grid_times.size,
        int(np.count_nonzero(grid_markers)),
    )
    return TimeGrid(times=grid_times, markers=grid_markers, dt=float(dt))


class PathSet:
    """Simulated paths recorded on (a subset of) a :class:`TimeGrid`

    Arrays are indexed ``[path, recorded time, asset]``. Path sets are only
    produced by :func:`simulate` (and :meth:`path`/:meth:`concat`).
    """

    model: ModelSpec
    grid: TimeGrid
    record_index: np.ndarray
    """Grid indices of the recorded times"""
    times: np.ndarray
    """Recorded times"""
    assets: np.ndarray
    """Forward levels ``X_t``"""
    vols: np.ndarray
    """Absolute diffusion coefficients ``σ_t`` (as they enter ``dX = σ dW``)"""
    variance: np.ndarray
    """Volatility state (``v⁺`` for Heston, ``v`` for SABR, ``σ`` otherwise)"""
    spot_min: np.ndarray
    """Running minimum of the spot level over all grid points up to each
    recorded time"""
    seed: int
    first_path: int

    def __init__(self, _: Never):
        """Private constructor

        Path sets cannot be instantiated directly, use :func:`simulate`.
        """
        raise RuntimeError("Path sets cannot be instantiated directly, use simulate().")

    @classmethod
    def _from_arrays(
        cls,
        model: ModelSpec,
        grid: TimeGrid,
        record_index: np.ndarray,
        assets: np.ndarray,
        vols: np.ndarray,
        variance: np.ndarray,
        spot_min: np.ndarray,
        seed: int,
        first_path: int,
    ) -> Self:
        paths = cls.__new__(cls)
        paths.model = model
        paths.grid = grid
        paths.record_index = record_index
        paths.times = grid.times[record_index]
        paths.assets = assets
        paths.vols = vols
        paths.variance = variance
        paths.spot_min = spot_min
        paths.seed = seed
        paths.first_path = first_path
        return paths

    @property
    def n_paths(self) -> int:
        return int(self.assets.shape[0])

    @property
    def dim(self) -> int:
        return int(self.assets.shape[2])

    @property
    def drift(self) -> np.ndarray:
        """Drift ``μ_t``, identically zero under the forward formulation"""
        return np.broadcast_to(0.0, self.assets.shape)

    @property
    def is_complete(self) -> bool:
        """Whether every grid time is recorded"""
        return self.record_index.size == len(self.grid)

    @property
    def terminal(self) -> np.ndarray:
        """Levels at the horizon, shape ``(n_paths, d)``"""
        return self.assets[:, -1, :]

    def index_of(self, t: float) -> int:
        """Position of ``t`` among the recorded times

        :raises ModelError: ``t`` is not recorded
        """
        i = int(np.searchsorted(self.times, t - TIME_TOL))
        if i >= self.times.size or abs(self.times[i] - t) > TIME_TOL:
            raise ModelError(f"time {t!r} is not recorded in this path set")
        return i

    def spot(self, index: int) -> np.ndarray:
        """Spot levels at recorded position ``index``, shape ``(n_paths, d)``"""
        t = self.times[index]
        return self.assets[:, index, :] * self.model.spot_factor(t, self.grid.horizon)

    def path(self, i: int) -> "PathSet":
        """Single-path view of path ``i`` (relative to this set)"""
        s = slice(i, i + 1)
        return PathSet._from_arrays(
            self.model,
            self.grid,
            self.record_index,
            self.assets[s],
            self.vols[s],
            self.variance[s],
            self.spot_min[s],
            self.seed,
            self.first_path + i,
        )

    @classmethod
    def concat(cls, blocks: Sequence["PathSet"]) -> "PathSet":
        """Merge consecutive path blocks, ordered by path index"""
        if not blocks:
            raise ModelError("cannot concatenate an empty sequence of path sets")
        blocks = sorted(blocks, key=lambda b: b.first_path)
        first = blocks[0]
        expected = first.first_path
        for b in blocks:
            if b.first_path != expected or b.seed != first.seed:
                raise ModelError("path blocks are not consecutive parts of one simulation")
            expected += b.n_paths
        return cls._from_arrays(
            first.model,
            first.grid,
            first.record_index,
            np.concatenate([b.assets for b in blocks]),
            np.concatenate([b.vols for b in blocks]),
            np.concatenate([b.variance for b in blocks]),
            np.concatenate([b.spot_min for b in blocks]),
            first.seed,
            first.first_path,
        )


def _path_generator(seed: int, path_index: int) -> np.random.Generator:
    """Counter-based substream of path ``path_index``

    The Philox key is ``(seed, path_index)``, so every path draws the same
    normals no matter how paths are split into blocks.
    """
    key = ((int(seed) & 0xFFFF_FFFF_FFFF_FFFF) << 64) | int(path_index)
    return np.random.Generator(np.random.Philox(key=key))


def _check_finite(arrays: Sequence[np.ndarray], first_path: int, t: float) -> None:
    for arr in arrays:
        bad = ~np.isfinite(arr)
        if bad.any():
            path = int(np.argwhere(bad)[0][0])
            raise SimulationError("non-finite simulated state", first_path + path, t)


def simulate(
    model: ModelSpec,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    *,
    first_path: int = 0,
    record: Optional[np.ndarray] = None,
) -> PathSet:
    """Euler–Maruyama simulation of ``n_paths`` paths on ``grid``

    Heston uses full truncation (``v⁺`` in drift and diffusion), SABR uses
    ``(X⁺)^β`` and absorbs at zero. Asset increments are correlated through
    the model's :class:`CorrelationFactor`; the volatility noise of asset
    ``i`` has correlation ``ρ_sv`` with that asset only.

    :param first_path: index of the first simulated path; path ``p`` always
        uses the substream ``(seed, p)``
    :param record: boolean mask over grid times to store (default: all); the
        first and last grid times are always stored
    :raises SimulationError: a state became NaN or infinite
    """
    if n_paths < 1:
        raise ModelError(f"n_paths must be positive, got {n_paths}")
    times = grid.times
    n_steps = times.size - 1
    horizon = grid.horizon
    d = model.dim
    cf = model.correlation_factor
    c_t = cf.matrix.T
    n_factors = cf.rank
    stoch_vol = model.kind in (ModelKind.HESTON, ModelKind.SABR)
    k = n_factors + (d if stoch_vol else 0)

    if record is None:
        mask = np.ones(times.size, dtype=bool)
    else:
        mask = np.asarray(record, dtype=bool).copy()
        if mask.shape != times.shape:
            raise ModelError("record mask must match the grid")
    mask[0] = mask[-1] = True
    record_index = np.flatnonzero(mask)
    slot = np.full(times.size, -1)
    slot[record_index] = np.arange(record_index.size)

    m = record_index.size
    assets = np.empty((n_paths, m, d))
    vols = np.empty((n_paths, m, d))
    variance = np.empty((n_paths, m, d))
    spot_min = np.empty((n_paths, m, d))

    x = np.tile(model.forward0(horizon), (n_paths, 1))
    v = np.tile(model.vol_state0(), (n_paths, 1))
    running_min = x * model.spot_factor(0.0, horizon)

    if model.kind == ModelKind.HESTON:
        assert model.heston is not None
        kappa, gamma = model.heston.kappa, model.heston.gamma
        theta = np.asarray(model.heston.theta)
        rho_sv = model.heston.rho_sv
    elif model.kind == ModelKind.SABR:
        assert model.sabr is not None
        alpha, beta = model.sabr.alpha, model.sabr.beta
        rho_sv = model.sabr.rho_sv
    else:
        rho_sv = 0.0
    rho_perp = math.sqrt(max(0.0, 1.0 - rho_sv * rho_sv))

    def store(i: int) -> None:
        j = slot[i]
        if j < 0:
            return
        state = np.maximum(v, 0.0) if model.kind == ModelKind.HESTON else v
        assets[:, j] = x
        vols[:, j] = model.diffusion(x, state)
        variance[:, j] = state
        spot_min[:, j] = running_min

    store(0)
    gens = [_path_generator(seed, first_path + p) for p in range(n_paths)]
    block = max(1, _NORMALS_PER_BLOCK // max(1, n_paths * k))
    logger.debug(
        "simulate %s: %d paths from %d, %d steps, %d normals/step",
        model.kind.value,
        n_paths,
        first_path,
        n_steps,
        k,
    )

    for b0 in range(0, n_steps, block):
        b1 = min(n_steps, b0 + block)
        z = np.stack([g.standard_normal((b1 - b0, k)) for g in gens], axis=1)
        for i in range(b0, b1):
            h = times[i + 1] - times[i]
            sq = math.sqrt(h)
            zi = z[i - b0]
            dw = zi[:, :n_factors] @ c_t
            if model.kind == ModelKind.HESTON:
                dz = rho_sv * dw + rho_perp * zi[:, n_factors:]
                vp = np.maximum(v, 0.0)
                root = np.sqrt(vp)
                x = np.maximum(x + root * x * sq * dw, 0.0)
                v = v + kappa * (theta - vp) * h + gamma * root * sq * dz
            elif model.kind == ModelKind.SABR:
                dz = rho_sv * dw + rho_perp * zi[:, n_factors:]
                alive = x > 0.0
                step = x + v * np.maximum(x, 0.0) ** beta * sq * dw
                x = np.where(alive, np.maximum(step, 0.0), 0.0)
                v = np.maximum(v + alpha * v * sq * dz, 0.0)
            elif model.kind == ModelKind.GBM:
                x = np.maximum(x + v * x * sq * dw, 0.0)
            else:
                x = x + v * sq * dw
            _check_finite((x, v), first_path, float(times[i + 1]))
            running_min = np.minimum(
                running_min, x * model.spot_factor(times[i + 1], horizon)
            )
            store(i + 1)

    return PathSet._from_arrays(
        model, grid, record_index, assets, vols, variance, spot_min, int(seed), first_path
    )
