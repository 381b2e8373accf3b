import numpy as np
import pytest

from driftmc.quadrature import gauss_legendre
from driftmc.sde_models import (
    HestonParams,
    ModelSpec,
    PathSet,
    SABRParams,
    build_grid,
    factor_correlation,
    simulate,
)
from driftmc.util import GridMarker, ModelError, ModelKind


def heston(rate: float = 0.05, v0=0.01, x0=(100.0,)) -> ModelSpec:
    params = HestonParams(v0=v0, kappa=5.0, theta=v0, gamma=0.3, rho_sv=-0.1, r=rate)
    return ModelSpec(ModelKind.HESTON, list(x0), heston=params)


def equicorrelation(d: int, rho: float) -> np.ndarray:
    corr = np.full((d, d), rho)
    np.fill_diagonal(corr, 1.0)
    return corr


# --- correlation factor ------------------------------------------------------


@pytest.mark.parametrize("d,rho", [(1, 0.0), (3, 0.4), (10, 0.0), (4, -0.2)])
def test_factor_reconstructs(d: int, rho: float):
    corr = equicorrelation(d, rho)
    cf = factor_correlation(corr)
    assert cf.rank == d
    assert cf.dim == d
    assert cf.correlation() == pytest.approx(corr, abs=1e-12)
    assert np.all(np.diff(cf.eigenvalues) <= 0)


def test_factor_drops_null_space():
    cf = factor_correlation(np.ones((3, 3)))
    assert cf.rank == 1
    assert cf.matrix[:, 0] == pytest.approx(np.ones(3))


@pytest.mark.parametrize(
    "corr",
    [
        [[1.0, 0.5], [0.4, 1.0]],
        [[2.0, 0.0], [0.0, 1.0]],
        [[1.0, 0.9, -0.9], [0.9, 1.0, 0.9], [-0.9, 0.9, 1.0]],
        [[1.0, 0.0, 0.0]],
    ],
)
def test_factor_rejects(corr):
    with pytest.raises(ModelError):
        factor_correlation(corr)


# --- model -------------------------------------------------------------------


def test_model_validation():
    with pytest.raises(ModelError):
        ModelSpec(ModelKind.HESTON, [100.0])
    with pytest.raises(ModelError):
        ModelSpec(ModelKind.GBM, [100.0], sigma=[0.2], heston=HestonParams(0.01, 1.0, 0.01, 0.1, 0.0))
    with pytest.raises(ModelError):
        ModelSpec(ModelKind.GBM, [-1.0], sigma=[0.2])
    with pytest.raises(ModelError):
        ModelSpec(ModelKind.GBM, [100.0, 100.0], sigma=[0.2, 0.3, 0.4])
    with pytest.raises(ModelError):
        ModelSpec(ModelKind.SABR, [100.0], sabr=SABRParams(v0=2.5, alpha=0.4, beta=1.5))
    with pytest.raises(ModelError):
        heston(v0=-0.01)


def test_model_broadcasts_scalars():
    model = heston(v0=0.04, x0=(100.0, 90.0))
    assert model.dim == 2
    assert model.vol_state0() == pytest.approx([0.04, 0.04])
    assert model.asset_corr == pytest.approx(np.eye(2))


def test_forward_and_spot():
    model = heston(rate=0.05)
    assert model.forward0(2.0)[0] == pytest.approx(100.0 * np.exp(0.1))
    assert model.spot_factor(2.0, 2.0) == pytest.approx(1.0)
    assert model.spot_factor(0.0, 2.0) == pytest.approx(np.exp(-0.1))
    assert model.rate == 0.05


def test_diffusion():
    assert heston(rate=0.0).diffusion0(1.0) == pytest.approx([10.0])
    sabr = ModelSpec(ModelKind.SABR, [100.0], sabr=SABRParams(v0=2.5, alpha=0.4, beta=0.5))
    assert sabr.diffusion0(1.0) == pytest.approx([25.0])
    assert not sabr.multiplicative_exact and sabr.multiplicative
    abm = ModelSpec(ModelKind.ABM, [100.0], sigma=[20.0])
    np.testing.assert_allclose(abm.diffusion(np.array([[50.0]]), np.array([20.0])), [[20.0]])
    assert not abm.multiplicative


# --- grid --------------------------------------------------------------------


def test_grid_uniform():
    grid = build_grid(1.0, 0.25)
    assert grid.times == pytest.approx([0.0, 0.25, 0.5, 0.75, 1.0])
    assert not grid.markers.any()
    assert grid.horizon == 1.0
    assert len(grid) == 5
    assert grid.mean_step == 0.25


def test_grid_embeds_nodes_and_fixings():
    rule = gauss_legendre(3)
    fixings = (0.25, 0.5, 0.75, 1.0)
    grid = build_grid(1.0, 1 / 16, rule, fixings)
    assert np.all(np.diff(grid.times) > 0)
    assert np.max(np.diff(grid.times)) <= 1 / 16 + 1e-12
    assert grid.times[-1] == 1.0
    assert int(grid.marked(GridMarker.QUADRATURE_NODE).sum()) == 12
    assert grid.mean_step == pytest.approx(1.0 / (len(grid) - 1))
    assert grid.mean_step < 1 / 16
    for f in fixings:
        assert grid.marked(GridMarker.FIXING_DATE)[grid.index_of(f)]
    for start in (0.0, 0.25, 0.5, 0.75):
        nodes, _ = rule.nodes(start, start + 0.25)
        for t in nodes:
            assert grid.marked(GridMarker.QUADRATURE_NODE)[grid.index_of(float(t))]


def test_grid_merges_coincident_times():
    # the midpoint of the odd rule falls on a stepping time
    grid = build_grid(1.0, 0.5, gauss_legendre(1))
    assert grid.times == pytest.approx([0.0, 0.5, 1.0])
    assert grid.marked(GridMarker.QUADRATURE_NODE).tolist() == [False, True, False]


def test_grid_errors():
    grid = build_grid(1.0, 0.1)
    with pytest.raises(ModelError):
        grid.index_of(0.05)
    with pytest.raises(ModelError):
        build_grid(0.0, 0.1)
    with pytest.raises(ModelError):
        build_grid(1.0, 0.1, fixings=(1.5,))


# --- simulation ----------------------------------------------------------------


def test_path_set_private_constructor():
    with pytest.raises(RuntimeError):
        PathSet(None)  # type: ignore


def test_simulate_shapes_and_start():
    model = heston()
    grid = build_grid(1.0, 1 / 32)
    paths = simulate(model, grid, 8, seed=3)
    assert paths.assets.shape == (8, len(grid), 1)
    assert paths.is_complete
    assert paths.assets[:, 0, 0] == pytest.approx(np.full(8, model.forward0(1.0)[0]))
    assert paths.vols[:, 0, 0] == pytest.approx(np.full(8, 0.1 * model.forward0(1.0)[0]))
    assert np.all(paths.variance >= 0.0)
    assert np.all(paths.drift == 0.0)
    assert paths.spot_min[:, 0, 0] == pytest.approx(np.full(8, 100.0))


def test_simulate_block_split_is_deterministic():
    model = heston(v0=[0.01, 0.02], x0=(100.0, 110.0))
    grid = build_grid(1.0, 1 / 64)
    whole = simulate(model, grid, 10, seed=42)
    head = simulate(model, grid, 3, seed=42)
    tail = simulate(model, grid, 7, seed=42, first_path=3)
    merged = PathSet.concat([tail, head])
    assert np.array_equal(whole.assets, merged.assets)
    assert np.array_equal(whole.vols, merged.vols)
    assert np.array_equal(whole.spot_min, merged.spot_min)
    assert not np.array_equal(whole.assets, simulate(model, grid, 10, seed=43).assets)


def test_concat_rejects_gaps():
    model = heston()
    grid = build_grid(1.0, 0.25)
    a = simulate(model, grid, 2, seed=1)
    b = simulate(model, grid, 2, seed=1, first_path=3)
    with pytest.raises(ModelError):
        PathSet.concat([a, b])


def test_record_mask_keeps_endpoints():
    grid = build_grid(1.0, 0.125)
    mask = np.zeros(len(grid), dtype=bool)
    mask[4] = True
    paths = simulate(heston(), grid, 4, seed=9, record=mask)
    assert paths.times == pytest.approx([0.0, 0.5, 1.0])
    assert not paths.is_complete
    full = simulate(heston(), grid, 4, seed=9)
    assert np.array_equal(paths.terminal, full.terminal)
    assert np.array_equal(paths.spot_min[:, -1], full.spot_min[:, -1])


def test_running_minimum_is_spot_minimum():
    model = heston(rate=0.05)
    grid = build_grid(1.0, 1 / 32)
    paths = simulate(model, grid, 16, seed=5)
    spots = np.stack([paths.spot(i) for i in range(len(grid))], axis=1)
    assert paths.spot_min == pytest.approx(np.minimum.accumulate(spots, axis=1))


def test_constant_paths_without_volatility():
    model = ModelSpec(ModelKind.GBM, [100.0], sigma=[0.0])
    paths = simulate(model, build_grid(1.0, 0.1), 4, seed=0)
    assert np.all(paths.assets == 100.0)


def test_sabr_absorbed_at_zero():
    model = ModelSpec(ModelKind.SABR, [1.0], sabr=SABRParams(v0=3.0, alpha=0.4, beta=0.5))
    paths = simulate(model, build_grid(1.0, 1 / 64), 200, seed=11)
    assert np.all(paths.assets >= 0.0)
    dead = paths.assets[:, :-1, 0] == 0.0
    assert np.all(paths.assets[:, 1:, 0][dead] == 0.0)


def test_gbm_forward_is_martingale():
    model = ModelSpec(ModelKind.GBM, [100.0], sigma=[0.2])
    paths = simulate(model, build_grid(1.0, 0.25), 20000, seed=17)
    x = paths.terminal[:, 0]
    assert abs(x.mean() - 100.0) < 4.0 * x.std() / np.sqrt(x.size)


def test_asset_correlation():
    corr = equicorrelation(2, 0.6)
    model = ModelSpec(ModelKind.ABM, [1.0, 1.0], sigma=[1.0, 1.0], asset_corr=corr)
    paths = simulate(model, build_grid(1.0, 1.0), 20000, seed=23)
    increments = paths.terminal - 1.0
    assert np.corrcoef(increments.T)[0, 1] == pytest.approx(0.6, abs=0.03)
