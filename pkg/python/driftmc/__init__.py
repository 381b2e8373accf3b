"""driftmc

Drift-correction Monte Carlo: variance-reduced option prices and Greeks from
the difference between an intractable model and a simplified one with a
closed-form price.
"""

import importlib.metadata

__all__ = [
    "analytic_pricers",
    "cli",
    "correction_engine",
    "experiments",
    "greeks",
    "payoffs",
    "protocols",
    "psi",
    "quadrature",
    "sde_models",
    "selftest",
    "util",
]
__version__ = importlib.metadata.version("driftmc")

from . import (
    analytic_pricers,
    cli,
    correction_engine,
    experiments,
    greeks,
    payoffs,
    protocols,
    psi,
    quadrature,
    sde_models,
    selftest,
    util,
)
