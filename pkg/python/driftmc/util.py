"""Primitives and utilities"""

__all__ = [
    "ModelKind",
    "PayoffKind",
    "Dynamics",
    "GridMarker",
    "GreekMethod",
    "DriftMCError",
    "ModelError",
    "PairingError",
    "SimulationError",
    "PricingError",
    "EstimatorError",
    "GreeksError",
    "ConfigError",
    "AccuracyWarning",
    "mean_stderr",
    "worker_count",
    "map_blocks",
    "path_blocks",
]

import enum
import math
import os
from collections.abc import Iterator, Sequence
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Optional, TypeVar

import numpy as np

#: Environment variable holding the worker-thread count for path blocks
THREADS_ENV = "DRIFTMC_THREADS"


class ModelKind(enum.Enum):
    """Original dynamics of the simulated (forward) asset levels"""

    HESTON = "heston"
    """``dX = √v X dW``, ``dv = κ(θ − v)dt + γ√v dZ``"""
    SABR = "sabr"
    """``dX = v X^β dW``, ``dv = α v dZ``"""
    GBM = "gbm"
    """``dX = σ X dW``"""
    ABM = "abm"
    """``dX = σ dW``"""


class PayoffKind(enum.Enum):
    """Payoff families of the test design"""

    VANILLA = "vanilla"
    """``max(0, X_T − K)``"""
    BARRIER = "barrier"
    """Down-and-out call without rebate, monitored on the simulation grid"""
    ASIAN = "asian"
    """Call on the arithmetic average of quarterly fixings"""
    BASKET = "basket"
    """Call on a weighted average of terminal levels"""
    RAINBOW = "rainbow"
    """Call on the maximum of terminal levels"""


class Dynamics(enum.IntEnum):
    """Simplified dynamics ``σ̃(t, x) = σ̃ · x^B``"""

    BACHELIER = 0
    """``B = 0``: arithmetic Brownian motion"""
    BLACK_SCHOLES = 1
    """``B = 1``: geometric Brownian motion"""

    @classmethod
    def parse(cls, name: str) -> "Dynamics":
        """Parse ``black-scholes``/``bs`` or ``bachelier`` (case-insensitive)"""
        key = name.strip().lower().replace("_", "-")
        if key in ("black-scholes", "bs", "blackscholes", "1"):
            return cls.BLACK_SCHOLES
        if key in ("bachelier", "normal", "0"):
            return cls.BACHELIER
        raise ValueError(f"unknown simplified dynamics '{name}'")

    @property
    def label(self) -> str:
        return "Black-Scholes" if self == Dynamics.BLACK_SCHOLES else "Bachelier"


class GridMarker(enum.IntFlag):
    """Tags attached to simulation grid times"""

    PLAIN = 0
    """Ordinary stepping time"""
    QUADRATURE_NODE = 1
    """A quadrature abscissa of some integration segment"""
    FIXING_DATE = 2
    """An observation date of a path-dependent payoff"""


class GreekMethod(enum.Enum):
    """How a Greek was estimated"""

    DRIFT_CORRECTION = "drift_correction"
    """Simplified-model Greek plus the pathwise derivative of the correction"""
    BUMP_REVALUE = "bump_revalue"
    """Central difference of crude Monte Carlo prices, common random numbers"""


class DriftMCError(Exception):
    """Base class of all errors raised by this package"""


class ModelError(DriftMCError, ValueError):
    """Invalid model, grid, payoff or correlation input"""


class PairingError(ModelError):
    """Payoff and simplified dynamics do not admit a closed-form ψ"""


class SimulationError(DriftMCError, ArithmeticError):
    """A simulated state became NaN or infinite"""

    def __init__(self, message: str, path_index: int, time: float):
        super().__init__(f"{message} (path {path_index}, t={time:.6g})")
        self.path_index = path_index
        self.time = time


class PricingError(DriftMCError, ArithmeticError):
    """A ψ evaluation failed"""


class EstimatorError(DriftMCError, ValueError):
    """An estimator cannot be formed from the given samples"""


class GreeksError(DriftMCError, ValueError):
    """Greek requested for an unsupported configuration"""


class ConfigError(DriftMCError, ValueError):
    """Experiment file could not be parsed or validated"""

    def __init__(self, message: str, lineno: Optional[int] = None):
        super().__init__(f"line {lineno}: {message}" if lineno else message)
        self.lineno = lineno


class AccuracyWarning(UserWarning):
    """A deterministic pricer missed its accuracy target"""


def mean_stderr(values: np.ndarray) -> tuple[float, float]:
    """Sample mean and standard error of the mean

    Both sums are compensated (``math.fsum``), so the result does not depend
    on how the samples were produced in blocks.
    """
    values = np.asarray(values, dtype=float).ravel()
    n = values.size
    if n < 2:
        raise EstimatorError(f"need at least 2 samples, got {n}")
    mean = math.fsum(values.tolist()) / n
    dev = values - mean
    var = math.fsum((dev * dev).tolist()) / (n - 1)
    return mean, math.sqrt(var / n)


def worker_count() -> int:
    """Worker threads for path blocks, read from ``DRIFTMC_THREADS``"""
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got '{raw}'") from None
    return max(1, n)


def path_blocks(n_paths: int, block_size: int) -> Iterator[tuple[int, int]]:
    """Split ``range(n_paths)`` into ``(first, count)`` blocks of consecutive
    path indices"""
    for first in range(0, n_paths, block_size):
        yield first, min(block_size, n_paths - first)


T = TypeVar("T")
R = TypeVar("R")


def map_blocks(
    fn: Callable[[T], R], items: Sequence[T], threads: Optional[int] = None
) -> list[R]:
    """Apply ``fn`` to every item, possibly on a thread pool

    Results are returned in the order of ``items`` regardless of the number of
    workers.
    """
    threads = worker_count() if threads is None else threads
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
