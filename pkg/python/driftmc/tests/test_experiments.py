import io
import math

import pytest

from driftmc.analytic_pricers import bs_call
from driftmc.cli import default_config
from driftmc.correction_engine import Legendre, Riemann
from driftmc.experiments import (
    CSV_COLUMNS,
    ExperimentConfig,
    compute_z_score,
    load_suite,
    parse_suite,
    run_experiment,
    run_suite,
    write_csv,
)
from driftmc.psi import BarrierPsi
from driftmc.util import ConfigError, Dynamics, EstimatorError, ModelKind, PayoffKind

SABR_RAINBOW = """\
[DEFAULT]
dt = 1/512
seed = 7

[rainbow]
dynamics = SABR
alpha = 0.4
beta = 0.5
v0 = 2, 2.5, 3
asset_corr = 0.4
payoff = rainbow
simplified = black-scholes
maturity = 1
strike = 118
"""

ABM_VANILLA = """\
[DEFAULT]
n_paths = 40
n_benchmark = 4000
dt = 1/64
quad_nodes = 4
seed = 11

[abm-vanilla]
dynamics = abm
sigma = 20
payoff = vanilla
simplified = bachelier
maturity = 1
strike = 105
"""


def test_parse_suite():
    (cfg,) = parse_suite(SABR_RAINBOW)
    assert cfg.name == "rainbow"
    assert cfg.dynamics == ModelKind.SABR
    assert cfg.payoff == PayoffKind.RAINBOW
    assert cfg.simplified == Dynamics.BLACK_SCHOLES
    assert cfg.dt == 1 / 512
    assert cfg.v0 == [2.0, 2.5, 3.0]
    assert cfg.dim == 3
    assert cfg.seed == 7
    assert cfg.seed_benchmark == 8
    model = cfg.model_spec()
    assert model.dim == 3
    assert model.x0.tolist() == [100.0, 100.0, 100.0]


def test_derived_settings():
    cfg = ExperimentConfig(
        dynamics="gbm",
        sigma=[0.2],
        payoff="vanilla",
        simplified="bs",
        maturity=1,
        strike=100,
        dt=1 / 256,
        riemann_dt=0.001,
        quad_nodes=6,
        benchmark_seed=99,
    )
    assert cfg.grid_dt == 0.001
    assert cfg.methods() == [Legendre(6), Riemann(0.001)]
    assert cfg.seed_benchmark == 99
    assert len(cfg.build_grid()) > 1000
    coarse = cfg.model_copy(update={"riemann_dt": None})
    assert coarse.grid_dt == 1 / 256
    assert coarse.methods() == [Legendre(6)]


def test_overrides():
    (cfg,) = parse_suite(SABR_RAINBOW, {"n_paths": 10, "seed": 3, "greeks": True})
    assert cfg.n_paths == 10
    assert cfg.seed == 3
    assert cfg.greeks


def test_config_error_names_line():
    text = ABM_VANILLA.replace("maturity = 1", "maturity = -1")
    with pytest.raises(ConfigError) as e:
        parse_suite(text)
    assert e.value.lineno == 13
    assert "[abm-vanilla] maturity" in str(e.value)


def test_config_error_unknown_key():
    with pytest.raises(ConfigError) as e:
        parse_suite(ABM_VANILLA + "colour = blue\n")
    assert e.value.lineno == 15


def test_config_error_pairing():
    text = ABM_VANILLA.replace("simplified = bachelier", "simplified = black-scholes").replace(
        "payoff = vanilla", "payoff = asian"
    )
    with pytest.raises(ConfigError) as e:
        parse_suite(text)
    assert e.value.lineno == 8
    assert "cannot be paired" in str(e.value)


@pytest.mark.parametrize(
    "text",
    [
        "[broken\nkey = 1\n",
        "[a]\ndynamics = gbm\npayoff = vanilla\nsimplified = bs\nmaturity = 1\nstrike = 100\n",
        "[a]\ndynamics = gbm\nsigma = 0.2\npayoff = barrier\nsimplified = bs\nmaturity = 1\nstrike = 100\n",
        "[a]\ndynamics = gbm\nsigma = 0.2\npayoff = vanilla\nsimplified = bs\nmaturity = 1\nstrike = 1/0\n",
        "[a]\ndynamics = gbm\nsigma = 0.2\npayoff = barrier\nsimplified = bs\nmaturity = 1\n"
        "strike = 100\nbarrier = 90\ngreeks = true\n",
    ],
)
def test_config_rejects(text: str):
    with pytest.raises(ConfigError):
        parse_suite(text)


def test_load_suite_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_suite(tmp_path / "missing.cfg")


def test_shipped_tables():
    configs = load_suite(default_config())
    assert len(configs) == 42
    assert sum(c.greeks for c in configs) == 32
    assert len({c.name for c in configs}) == 42
    assert {c.dynamics for c in configs} == {ModelKind.HESTON, ModelKind.SABR}
    barriers = [c for c in configs if c.payoff == PayoffKind.BARRIER]
    assert barriers and all(c.barrier == 95.0 for c in barriers)


def test_z_score():
    assert compute_z_score(1.0, 0.3, 0.5, 0.4) == pytest.approx(1.0)
    assert compute_z_score(0.5, 0.4, 1.0, 0.3) == pytest.approx(-1.0)
    assert compute_z_score(2.0, 0.0, 2.0, 0.0) == 0.0
    with pytest.raises(EstimatorError):
        compute_z_score(2.0, 0.0, 2.5, 0.0)


def test_z_score_is_calibrated():
    # ABM paths are exact and the Bachelier ψ is the exact price, so the
    # z-score only sees benchmark noise
    scores = []
    for seed in range(40):
        (cfg,) = parse_suite(ABM_VANILLA, {"seed": 100 + 2 * seed})
        scores.append(run_experiment(cfg).method.z_score)
    inside = sum(abs(z) < 2.0 for z in scores)
    assert inside >= 34, scores
    assert max(abs(z) for z in scores) < 4.5


def test_run_experiment_exact_simplified_model():
    cfg = ExperimentConfig(
        name="gbm",
        dynamics="gbm",
        sigma=[0.2],
        payoff="vanilla",
        simplified="black-scholes",
        maturity=1,
        strike=105,
        n_paths=40,
        n_benchmark=4000,
        dt=1 / 64,
        quad_nodes=4,
        greeks=True,
    )
    result = run_experiment(cfg)
    psi0 = result.method.estimate
    assert result.method.stderr == 0.0
    assert result.method.variance_ratio == math.inf
    assert result.method.extras["correction"] == 0.0
    assert abs(result.method.z_score) < 4.0
    assert result.riemann is None
    assert result.sample is not None and result.sample.integrals.shape == (40,)
    assert psi0 == pytest.approx(float(bs_call(100.0, 105.0, 0.2, 1.0).value), rel=1e-12)
    assert result.delta is not None and result.crude_delta is not None
    assert result.delta.stderr_delta < 1e-6
    rows = result.rows()
    assert [r["quantity"] for r in rows] == ["value", "delta"]
    assert rows[0]["crude_se"] == pytest.approx(result.crude.stderr * 10.0)


def test_write_csv_is_deterministic():
    (cfg,) = parse_suite(ABM_VANILLA)
    outputs = []
    for _ in range(2):
        out = io.StringIO()
        write_csv([run_experiment(cfg, threads=2)], out)
        outputs.append(out.getvalue())
    assert outputs[0] == outputs[1]
    header, row = outputs[0].splitlines()
    assert header == ",".join(CSV_COLUMNS)
    fields = dict(zip(CSV_COLUMNS, row.split(",")))
    assert fields["name"] == "abm-vanilla"
    assert fields["simplified"] == "Bachelier"
    assert fields["runtime_ms"] == ""
    assert fields["riemann_estimate"] == ""
    assert fields["variance_ratio"] == "inf"
    assert fields["status"] == "PASS"


def test_run_suite(tmp_path):
    source = tmp_path / "suite.cfg"
    source.write_text(ABM_VANILLA)
    out = tmp_path / "report.csv"
    suite = run_suite(source, out, overrides={"riemann_dt": 1 / 64}, timings=True)
    assert suite.statuses == ["PASS"]
    assert suite.summary() == "1 rows: 1 passed, 0 failed"
    lines = out.read_text().splitlines()
    assert len(lines) == 2
    fields = dict(zip(CSV_COLUMNS, lines[1].split(",")))
    assert fields["runtime_ms"] != ""
    assert fields["riemann_estimate"] == fields["method_estimate"]
    with pytest.raises(ConfigError):
        run_suite(source, out, only=["missing"])


def shipped(name: str, **update) -> ExperimentConfig:
    (cfg,) = [c for c in load_suite(default_config()) if c.name == name]
    return cfg.model_copy(update=update)


def test_barrier_monitoring_step_follows_grid():
    cfg = shipped("heston-barrier-bs-1y-105")
    model = cfg.model_spec()
    grid = cfg.build_grid()
    psi = cfg.build_psi(model, grid)
    assert isinstance(psi, BarrierPsi)
    # embedded quadrature nodes refine the monitoring grid
    assert psi.dt_monitor == pytest.approx(grid.horizon / (len(grid) - 1))
    assert psi.dt_monitor < cfg.dt


@pytest.mark.slow
@pytest.mark.parametrize(
    "name",
    [
        "heston-vanilla-bs-1y-105",
        "heston-barrier-bs-1y-105",
        "heston-basket-bachelier-1y-105",
        "heston-basket-bachelier-5y-128",
        "sabr-rainbow-bs-1y-100",
    ],
)
def test_shipped_acceptance_bands(name: str):
    result = run_experiment(shipped(name, greeks=False))
    assert result.method.variance_ratio >= result.config.min_variance_ratio
    assert abs(result.method.z_score) < 4.0
    if result.riemann is not None:
        assert abs(result.riemann.estimate - result.method.estimate) < 2.0 * result.method.stderr


@pytest.mark.slow
def test_shipped_heston_delta():
    result = run_experiment(shipped("heston-vanilla-bs-1y-105", riemann_dt=None))
    assert result.delta is not None
    assert result.delta.stderr_delta <= 0.004
    assert result.delta_passed()
