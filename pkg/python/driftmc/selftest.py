"""Fast in-process invariant checks"""

__all__ = ["CheckResult", "run_selftest", "CHECKS"]

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .analytic_pricers import SimplifiedModel, bachelier_asian_psi
from .correction_engine import Legendre, directional_laplacian, integrate_correction, record_mask
from .payoffs import PathObservables, PayoffSpec
from .psi import PAIRINGS, AsianPsi, make_psi
from .quadrature import gauss_legendre
from .sde_models import HestonParams, ModelSpec, build_grid, factor_correlation, simulate
from .util import Dynamics, ModelKind, PayoffKind


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _equicorrelation(d: int, rho: float) -> np.ndarray:
    corr = np.full((d, d), rho)
    np.fill_diagonal(corr, 1.0)
    return corr


def check_quadrature() -> str:
    worst = 0.0
    for nodes in (1, 2, 5, 24):
        rule = gauss_legendre(nodes)
        for p in range(2 * nodes):
            exact = (1.7 ** (p + 1) - 0.3 ** (p + 1)) / (p + 1)
            approx = rule.integrate(lambda t, p=p: t**p, 0.3, 1.7)
            worst = max(worst, abs(approx - exact) / abs(exact))
    assert worst < 1e-12, f"relative error {worst:.3g}"
    return f"max relative error {worst:.2g}"


def check_factorization() -> str:
    rho = _equicorrelation(3, 0.4)
    cf = factor_correlation(rho)
    err = float(np.max(np.abs(cf.correlation() - rho)))
    assert err < 1e-12 and cf.rank == 3, f"error {err:.3g}, rank {cf.rank}"
    ones = factor_correlation(np.ones((2, 2)))
    assert ones.rank == 1, f"rank {ones.rank} for a singular matrix"
    return f"reconstruction error {err:.2g}"


def check_exact_cancellation() -> str:
    for kind, dynamics in ((ModelKind.GBM, Dynamics.BLACK_SCHOLES), (ModelKind.ABM, Dynamics.BACHELIER)):
        sigma = 0.2 if kind == ModelKind.GBM else 20.0
        model = ModelSpec(kind, [100.0], sigma=[sigma])
        payoff = PayoffSpec(PayoffKind.VANILLA, 105.0, 1.0)
        psi = make_psi(payoff, SimplifiedModel.matching(model, dynamics, 1.0))
        grid = build_grid(1.0, 1 / 64, Legendre(8).rule)
        paths = simulate(model, grid, 64, seed=7, record=record_mask(psi, grid, [Legendre(8)]))
        sample = integrate_correction(paths, psi, Legendre(8))
        assert sample.node_xi is not None
        worst = float(np.max(np.abs(sample.node_xi)))
        assert worst == 0.0, f"{kind.value}: |ξ| up to {worst:.3g}"
    return "ξ ≡ 0 for GBM/Black-Scholes and ABM/Bachelier"


def check_directional_laplacian() -> str:
    rho = _equicorrelation(3, 0.4)
    model = ModelSpec(ModelKind.GBM, [100.0, 100.0, 100.0], sigma=[0.2, 0.25, 0.3], asset_corr=rho)
    simplified = SimplifiedModel.matching(model, Dynamics.BLACK_SCHOLES, 1.0)
    psi = make_psi(PayoffSpec(PayoffKind.RAINBOW, 100.0, 1.0), simplified)
    rng = np.random.default_rng(11)
    x = rng.uniform(85.0, 115.0, size=(5, 3))
    c = rng.uniform(10.0, 30.0, size=(5, 3))
    fast = directional_laplacian(psi, 0.2, x, c, simplified.corr)

    h = 0.1
    dense = np.zeros(x.shape[0])
    a = c[:, :, None] * simplified.corr.matrix[None, :, :]
    for n in range(x.shape[0]):
        hess = np.empty((3, 3))
        for i in range(3):
            for j in range(3):
                pts = []
                for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                    y = x[n].copy()
                    y[i] += si * h
                    y[j] += sj * h
                    pts.append(si * sj * psi.value(0.2, y[None, :])[0])
                hess[i, j] = math.fsum(pts) / (4 * h * h)
        dense[n] = float(np.trace(a[n].T @ hess @ a[n]))
    err = float(np.max(np.abs(fast - dense) / np.abs(dense)))
    assert err < 1e-4, f"relative error {err:.3g}"
    return f"max relative error {err:.2g}"


def check_pde_residual() -> str:
    rng = np.random.default_rng(5)
    dt = 1e-5
    worst = 0.0
    for dynamics, kinds in PAIRINGS.items():
        for kind in sorted(kinds, key=lambda k: k.value):
            d = 3 if kind in (PayoffKind.BASKET, PayoffKind.RAINBOW) else 1
            if dynamics == Dynamics.BLACK_SCHOLES:
                model = ModelSpec(ModelKind.GBM, [100.0] * d, sigma=[0.2] * d, asset_corr=_equicorrelation(d, 0.4))
            else:
                model = ModelSpec(ModelKind.ABM, [100.0] * d, sigma=[20.0] * d, asset_corr=_equicorrelation(d, 0.4))
            simplified = SimplifiedModel.matching(model, dynamics, 1.0)
            extra = {"barrier": 90.0} if kind == PayoffKind.BARRIER else {}
            psi = make_psi(PayoffSpec(kind, 100.0, 1.0, **extra), simplified, dt_monitor=1 / 64)
            # between the first and second fixing for the Asian call
            t = float(rng.uniform(0.3, 0.45) if kind == PayoffKind.ASIAN else rng.uniform(0.05, 0.75))
            x = rng.uniform(100.0, 130.0, size=(8, d))
            obs = None
            if kind == PayoffKind.ASIAN:
                obs = PathObservables(x[:, 0], rng.uniform(90.0, 110.0, size=8), 1)
            value = psi.value(t, x, obs)
            dpsi = (psi.value(t + dt, x, obs) - psi.value(t - dt, x, obs)) / (2 * dt)
            trace = directional_laplacian(psi, t, x, simplified.diffusion(x), simplified.corr, obs)
            res = np.abs(dpsi + 0.5 * trace) / np.maximum(np.abs(value), 1.0)
            worst = max(worst, float(np.max(res)))
    assert worst < 1e-3, f"relative residual {worst:.3g}"
    return f"max relative residual {worst:.2g} over {sum(map(len, PAIRINGS.values()))} pairings"


def check_fixing_continuity() -> str:
    model = ModelSpec(ModelKind.ABM, [100.0], sigma=[10.0])
    simplified = SimplifiedModel.matching(model, Dynamics.BACHELIER, 1.0)
    payoff = PayoffSpec(PayoffKind.ASIAN, 100.0, 1.0)
    psi = make_psi(payoff, simplified, rate=0.03)
    assert isinstance(psi, AsianPsi)
    rng = np.random.default_rng(3)
    worst = 0.0
    fixings = payoff.fixings
    scales = np.exp(-0.03 * (1.0 - np.asarray(fixings)))
    for k in range(len(fixings) - 1):
        x = rng.uniform(90.0, 110.0, size=(8, 1))
        partial = rng.uniform(90.0, 110.0, size=8) * k
        before = psi.value(fixings[k], x, PathObservables(x[:, 0], partial, k))
        after = bachelier_asian_psi(
            fixings[k],
            x[:, 0],
            partial + scales[k] * x[:, 0],
            fixings[k + 1 :],
            payoff.strike,
            float(simplified.sigma_tilde[0]),
            fixings_observed=k + 1,
            scales=scales[k + 1 :],
        ).value
        worst = max(worst, float(np.max(np.abs(before - after))))
    assert worst < 1e-10, f"jump {worst:.3g}"
    return f"max jump {worst:.2g}"


def check_determinism() -> str:
    model = ModelSpec(
        ModelKind.HESTON,
        [100.0],
        heston=HestonParams(v0=0.01, kappa=5.0, theta=0.01, gamma=0.3, rho_sv=-0.1, r=0.05),
    )
    grid = build_grid(1.0, 1 / 32)
    whole = simulate(model, grid, 10, seed=42)
    head = simulate(model, grid, 4, seed=42)
    tail = simulate(model, grid, 6, seed=42, first_path=4)
    assert np.array_equal(whole.assets[:4], head.assets), "block split changed paths 0..3"
    assert np.array_equal(whole.assets[4:], tail.assets), "block split changed paths 4..9"
    return "paths independent of block split"


CHECKS: dict[str, Callable[[], str]] = {
    "quadrature exactness": check_quadrature,
    "correlation factorization": check_factorization,
    "exact cancellation": check_exact_cancellation,
    "directional laplacian": check_directional_laplacian,
    "pde residual": check_pde_residual,
    "fixing continuity": check_fixing_continuity,
    "determinism": check_determinism,
}


def run_selftest() -> list[CheckResult]:
    """Run every check; failures are reported, not raised"""
    results = []
    for name, check in CHECKS.items():
        try:
            results.append(CheckResult(name, True, check()))
        except Exception as e:  # noqa: BLE001
            results.append(CheckResult(name, False, f"{type(e).__name__}: {e}"))
    return results
