import math
import warnings

import numpy as np
import pytest
from scipy.stats import norm

from driftmc.analytic_pricers import (
    SimplifiedModel,
    bachelier_asian_psi,
    bachelier_basket_psi,
    bachelier_call,
    bs_call,
    bs_down_out_call,
    bs_rainbow_max_psi,
    one_factor_loadings,
    psi_directional_second_derivative,
)
from driftmc.payoffs import PayoffSpec
from driftmc.psi import make_psi
from driftmc.sde_models import HestonParams, ModelSpec, SABRParams
from driftmc.util import Dynamics, ModelError, ModelKind, PayoffKind, PricingError


def equicorrelation(d: int, rho: float) -> np.ndarray:
    corr = np.full((d, d), rho)
    np.fill_diagonal(corr, 1.0)
    return corr


# --- vanilla -----------------------------------------------------------------


def test_bs_call_at_the_money():
    price = bs_call(100.0, 100.0, 0.2, 1.0)
    assert float(price.value) == pytest.approx(100.0 * (2.0 * norm.cdf(0.1) - 1.0), rel=1e-14)
    assert float(price.delta) == pytest.approx(norm.cdf(0.1))
    assert float(price.gamma) == pytest.approx(norm.pdf(0.1) / 20.0)


def test_bs_call_derivatives():
    f = np.linspace(60.0, 160.0, 11)
    h = 1e-4
    price = bs_call(f, 105.0, 0.25, 2.0)
    up, down = bs_call(f + h, 105.0, 0.25, 2.0), bs_call(f - h, 105.0, 0.25, 2.0)
    assert price.delta == pytest.approx((up.value - down.value) / (2 * h), rel=1e-6)
    assert price.gamma == pytest.approx((up.delta - down.delta) / (2 * h), rel=1e-6)


def test_bs_call_degenerate():
    price = bs_call(np.array([110.0, 90.0, 0.0]), 100.0, 0.0, 1.0)
    assert price.value == pytest.approx([10.0, 0.0, 0.0])
    assert price.delta == pytest.approx([1.0, 0.0, 0.0])
    assert price.gamma == pytest.approx([0.0, 0.0, 0.0])
    expired = bs_call(120.0, 100.0, 0.3, -0.5)
    assert float(expired.value) == 20.0


def test_bachelier_call():
    assert float(bachelier_call(100.0, 100.0, 20.0, 1.0).value) == pytest.approx(
        20.0 / math.sqrt(2.0 * math.pi)
    )
    deep = bachelier_call(200.0, 100.0, 20.0, 1.0)
    assert float(deep.value) == pytest.approx(100.0)
    assert float(deep.delta) == pytest.approx(1.0)
    assert float(bachelier_call(90.0, 100.0, 20.0, 0.0).value) == 0.0


# --- barrier -----------------------------------------------------------------


def test_down_out_far_barrier_is_vanilla():
    f = np.array([90.0, 100.0, 120.0])
    price = bs_down_out_call(f, 100.0, 1e-6, 0.2, 1.0, 1 / 512)
    assert price.value == pytest.approx(bs_call(f, 100.0, 0.2, 1.0).value, rel=1e-9)


def test_down_out_properties():
    f = np.linspace(96.0, 140.0, 12)
    vanilla = bs_call(f, 100.0, 0.2, 1.0).value
    price = bs_down_out_call(f, 100.0, 95.0, 0.2, 1.0, 1 / 512)
    assert np.all(price.value >= 0.0)
    assert np.all(price.value <= vanilla + 1e-12)
    assert np.all(np.diff(price.value) > 0)
    assert np.all(price.delta > 0)
    assert float(bs_down_out_call(94.0, 100.0, 95.0, 0.2, 1.0, 1 / 512).value) == 0.0


def test_down_out_monitoring_shift():
    # coarser monitoring moves the effective barrier down and raises the price
    fine = bs_down_out_call(100.0, 100.0, 95.0, 0.2, 1.0, 1 / 4096).value
    coarse = bs_down_out_call(100.0, 100.0, 95.0, 0.2, 1.0, 1 / 12).value
    assert float(coarse) > float(fine)


def test_down_out_rate_observes_spot():
    # the spot is below the barrier although the forward is above
    price = bs_down_out_call(99.0, 90.0, 95.0, 0.2, 1.0, 1 / 512, rate=0.05)
    assert float(price.value) == 0.0


def test_down_out_rejects():
    with pytest.raises(ModelError):
        bs_down_out_call(100.0, 100.0, 0.0, 0.2, 1.0, 1 / 512)
    with pytest.raises(ModelError):
        bs_down_out_call(100.0, 100.0, 95.0, 0.2, 1.0, 0.0)


# --- asian -------------------------------------------------------------------


def test_asian_single_fixing_is_vanilla():
    x = np.array([95.0, 100.0, 110.0])
    price = bachelier_asian_psi(0.2, x, np.zeros(3), [1.0], 100.0, 15.0)
    vanilla = bachelier_call(x, 100.0, 15.0, 0.8)
    assert price.value == pytest.approx(vanilla.value)
    assert price.delta == pytest.approx(vanilla.delta)


def test_asian_all_fixed_is_intrinsic():
    partial = np.array([400.0, 420.0])
    price = bachelier_asian_psi(1.0, np.array([1.0, 1.0]), partial, [], 100.0, 15.0, fixings_observed=4)
    assert price.value == pytest.approx([0.0, 5.0])
    assert price.delta == pytest.approx([0.0, 0.0])


def test_asian_moments():
    fixings = np.array([0.25, 0.5, 0.75, 1.0])
    sigma, t = 12.0, 0.1
    lag = fixings - t
    var = sigma**2 * np.minimum.outer(lag, lag).sum() / 16.0
    x = np.array([100.0])
    price = bachelier_asian_psi(t, x, np.zeros(1), fixings, 100.0, sigma)
    assert float(price.value[0]) == pytest.approx(math.sqrt(var) / math.sqrt(2.0 * math.pi))
    assert float(price.delta[0]) == pytest.approx(0.5)


def test_asian_scales():
    scales = np.array([0.9, 1.0])
    price = bachelier_asian_psi(0.0, np.array([100.0]), np.zeros(1), [0.5, 1.0], 50.0, 1e-9, scales=scales)
    assert float(price.value[0]) == pytest.approx(0.5 * (90.0 + 100.0) - 50.0)
    assert float(price.delta[0]) == pytest.approx(0.95)
    with pytest.raises(ModelError):
        bachelier_asian_psi(0.0, 100.0, 0.0, [0.5, 1.0], 50.0, 1.0, scales=[1.0])
    with pytest.raises(ModelError):
        bachelier_asian_psi(0.0, 100.0, 0.0, [], 50.0, 1.0)


# --- basket ------------------------------------------------------------------


def test_basket_single_asset_is_vanilla():
    x = np.array([[90.0], [105.0]])
    price = bachelier_basket_psi(0.0, x, np.ones(1), 100.0, np.array([20.0]), np.eye(1), 1.0)
    vanilla = bachelier_call(x[:, 0], 100.0, 20.0, 1.0)
    assert price.value == pytest.approx(vanilla.value)
    assert price.delta[:, 0] == pytest.approx(vanilla.delta)


def test_basket_variance_and_delta():
    d = 4
    w = np.full(d, 0.25)
    sigma = np.array([10.0, 20.0, 30.0, 40.0])
    corr = equicorrelation(d, 0.3)
    sd = math.sqrt(0.5 * float((sigma * w) @ corr @ (sigma * w)))
    x = np.full((1, d), 100.0)
    price = bachelier_basket_psi(0.5, x, w, 100.0, sigma, corr, 1.0)
    assert float(price.value[0]) == pytest.approx(sd / math.sqrt(2.0 * math.pi))
    assert price.delta[0] == pytest.approx(0.5 * w)
    assert price.delta.shape == (1, d)
    with pytest.raises(ModelError):
        bachelier_basket_psi(0.0, x, np.ones(3) / 3, 100.0, sigma, corr, 1.0)
    with pytest.raises(ModelError):
        bachelier_basket_psi(0.0, x, w, 100.0, sigma[:3], corr, 1.0)
    with pytest.raises(PricingError):
        bachelier_basket_psi(0.0, x, w, 100.0, sigma, -np.ones((d, d)), 1.0)


# --- rainbow -----------------------------------------------------------------


def test_one_factor_loadings():
    a = one_factor_loadings(equicorrelation(3, 0.4))
    assert a is not None
    assert a == pytest.approx(np.full(3, math.sqrt(0.4)))
    b = one_factor_loadings(equicorrelation(2, -0.25))
    assert b is not None
    assert b[0] * b[1] == pytest.approx(-0.25)
    banded = np.array([[1.0, 0.5, 0.0], [0.5, 1.0, 0.5], [0.0, 0.5, 1.0]])
    assert one_factor_loadings(banded) is None
    assert one_factor_loadings(np.ones((2, 2))) is None


def test_rainbow_single_asset_is_vanilla():
    x = np.array([[90.0], [110.0]])
    value = bs_rainbow_max_psi(0.0, x, 100.0, np.array([0.2]), np.eye(1), 1.0)
    assert value == pytest.approx(bs_call(x[:, 0], 100.0, 0.2, 1.0).value)


@pytest.mark.parametrize("rho", [0.0, 0.4, -0.3])
def test_rainbow_zero_strike_is_exchange(rho: float):
    # E max(X1, X2) = X1 + E (X2 − X1)⁺ (Margrabe)
    x = np.array([[100.0, 95.0], [90.0, 110.0]])
    s1, s2 = 0.2, 0.3
    corr = equicorrelation(2, rho)
    value = bs_rainbow_max_psi(0.0, x, 1e-8, np.array([s1, s2]), corr, 1.0)
    s_ex = math.sqrt(s1 * s1 + s2 * s2 - 2.0 * rho * s1 * s2)
    expected = x[:, 0] + bs_call(x[:, 1], x[:, 0], s_ex, 1.0).value - 1e-8
    assert value == pytest.approx(expected, rel=1e-5)


def test_rainbow_monte_carlo():
    rng = np.random.default_rng(2024)
    sigma = np.array([0.2, 0.25, 0.3])
    corr = equicorrelation(3, 0.4)
    n = 400_000
    z = rng.standard_normal((n, 3)) @ np.linalg.cholesky(corr).T
    x0 = np.array([100.0, 95.0, 105.0])
    terminal = x0 * np.exp(-0.5 * sigma**2 + sigma * z)
    pay = np.maximum(terminal.max(axis=1) - 110.0, 0.0)
    value = bs_rainbow_max_psi(0.0, x0[None, :], 110.0, sigma, corr, 1.0)
    assert abs(float(value[0]) - pay.mean()) < 4.0 * pay.std() / math.sqrt(n)


def test_rainbow_general_correlation_falls_back():
    corr = np.array([[1.0, 0.5, 0.0], [0.5, 1.0, 0.5], [0.0, 0.5, 1.0]])
    sigma = np.array([0.2, 0.2, 0.2])
    x = np.array([[100.0, 100.0, 100.0]])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        value = float(bs_rainbow_max_psi(0.0, x, 100.0, sigma, corr, 1.0)[0])
    single = float(bs_call(100.0, 100.0, 0.2, 1.0).value)
    assert single < value < 3.0 * single


def test_rainbow_identical_assets():
    x = np.array([[100.0, 100.0]])
    value = bs_rainbow_max_psi(0.0, x, 100.0, np.array([0.2, 0.2]), np.ones((2, 2)), 1.0)
    assert value.shape == (1,)
    assert float(value[0]) == pytest.approx(float(bs_call(100.0, 100.0, 0.2, 1.0).value))


def test_rainbow_absorbed_asset_drops_out():
    sigma = np.array([0.3, 0.25, 0.2])
    corr = equicorrelation(3, 0.4)
    x = np.array([[0.0, 110.0, 120.0], [100.0, 110.0, 120.0], [0.0, 0.0, 120.0], [0.0, 0.0, 0.0]])
    value = bs_rainbow_max_psi(0.0, x, 118.0, sigma, corr, 1.0)
    live = bs_rainbow_max_psi(0.0, x[:1, 1:], 118.0, sigma[1:], corr[1:, 1:], 1.0)
    assert np.all(np.isfinite(value))
    assert value[0] == pytest.approx(float(live[0]), rel=1e-12)
    assert value[0] < value[1]
    assert value[2] == pytest.approx(float(bs_call(120.0, 118.0, 0.2, 1.0).value), rel=1e-12)
    assert value[3] == 0.0


def test_rainbow_rejects():
    with pytest.raises(PricingError):
        bs_rainbow_max_psi(0.0, np.array([[100.0, -1.0]]), 100.0, np.ones(2), np.eye(2), 1.0)
    with pytest.raises(ModelError):
        bs_rainbow_max_psi(0.0, np.array([[100.0, 90.0]]), 100.0, np.ones(2), np.eye(3), 1.0)


# --- simplified model ----------------------------------------------------------


def test_matching_heston():
    params = HestonParams(v0=0.01, kappa=5.0, theta=0.01, gamma=0.3, rho_sv=-0.1, r=0.05)
    model = ModelSpec(ModelKind.HESTON, [100.0], heston=params)
    bs = SimplifiedModel.matching(model, Dynamics.BLACK_SCHOLES, 1.0)
    assert bs.sigma_tilde == pytest.approx([0.1])
    assert bs.exponent == 1
    bachelier = SimplifiedModel.matching(model, Dynamics.BACHELIER, 1.0)
    assert bachelier.sigma_tilde == pytest.approx([0.1 * 100.0 * math.exp(0.05)])
    x = np.array([[50.0], [200.0]])
    assert bachelier.diffusion(x) == pytest.approx(np.full((2, 1), bachelier.sigma_tilde[0]))
    assert bs.diffusion(x) == pytest.approx(0.1 * x)


def test_matching_sabr_and_override():
    model = ModelSpec(ModelKind.SABR, [100.0, 100.0], sabr=SABRParams(v0=[2.0, 3.0], alpha=0.4, beta=0.5))
    bs = SimplifiedModel.matching(model, Dynamics.BLACK_SCHOLES, 1.0)
    assert bs.sigma_tilde == pytest.approx([0.2, 0.3])
    assert bs.dim == 2
    fixed = SimplifiedModel.matching(model, Dynamics.BLACK_SCHOLES, 1.0, sigma_tilde=[0.25])
    assert fixed.sigma_tilde == pytest.approx([0.25, 0.25])
    with pytest.raises(ModelError):
        SimplifiedModel.matching(model, Dynamics.BLACK_SCHOLES, 1.0, sigma_tilde=[-0.25])


# --- directional derivatives ---------------------------------------------------


def test_directional_second_derivative_vanilla():
    model = ModelSpec(ModelKind.GBM, [100.0], sigma=0.2)
    simplified = SimplifiedModel.matching(model, Dynamics.BLACK_SCHOLES, 1.0)
    psi = make_psi(PayoffSpec(PayoffKind.VANILLA, 100.0, 1.0), simplified)
    x = np.array([[80.0], [100.0], [130.0]])
    u = np.array([[2.0], [3.0], [-1.0]])
    second = psi_directional_second_derivative(psi, 0.3, x, u, 0.01)
    assert second == pytest.approx(psi.gamma(0.3, x) * u[:, 0] ** 2, rel=1e-5)


def test_directional_second_derivative_shrinks_step():
    model = ModelSpec(ModelKind.GBM, [100.0], sigma=0.2)
    simplified = SimplifiedModel.matching(model, Dynamics.BLACK_SCHOLES, 1.0)
    psi = make_psi(PayoffSpec(PayoffKind.VANILLA, 1.0, 1.0), simplified)
    x = np.array([[0.5]])
    second = psi_directional_second_derivative(psi, 0.5, x, np.ones((1, 1)), 1.0)
    assert np.isfinite(second).all()
    # steps 1 and 0.5 leave the positive half-line
    values = psi.value(0.5, np.array([[0.75], [0.5], [0.25]]))
    assert second == pytest.approx((values[0] - 2.0 * values[1] + values[2]) / 0.0625)
    with pytest.raises(ModelError):
        psi_directional_second_derivative(psi, 0.5, x, np.ones((1, 1)), 0.0)
