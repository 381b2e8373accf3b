"""Experiment configuration, runner and CSV reports

An experiment file is INI-style: one section per experiment, shared keys in
``[DEFAULT]``. Numbers may be written as fractions (``dt = 1/512``) and
vectors as comma-separated lists (``v0 = 2, 2.5, 3``).
"""

__all__ = [
    "ExperimentConfig",
    "ExperimentResult",
    "SuiteResult",
    "CSV_COLUMNS",
    "load_suite",
    "parse_suite",
    "run_experiment",
    "run_suite",
    "compute_z_score",
    "write_csv",
]

import configparser
import csv
import logging
import math
import os
import re
import time
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Optional, TextIO, Union

import numpy as np
from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, ValidationError, model_validator
from typing_extensions import Annotated, Self

from .analytic_pricers import SimplifiedModel
from .correction_engine import (
    CorrectionSample,
    EstimatorReport,
    IntegrationMethod,
    Legendre,
    Riemann,
    estimate_crude,
    estimate_price,
    integrate_correction,
    record_mask,
)
from .greeks import (
    GreekReport,
    delta_bump_revalue,
    greek_asset,
    greek_report_from,
    pathwise_correction,
)
from .protocols import PsiFunction
from .payoffs import PayoffSpec, simulate_payoffs
from .psi import PAIRINGS, make_psi
from .sde_models import HestonParams, ModelSpec, SABRParams, TimeGrid, build_grid, simulate
from .util import (
    ConfigError,
    DriftMCError,
    Dynamics,
    EstimatorError,
    ModelKind,
    PayoffKind,
    map_blocks,
    path_blocks,
)

logger = logging.getLogger(__name__)

CSV_COLUMNS = (
    "name",
    "dynamics",
    "payoff",
    "simplified",
    "maturity",
    "strike",
    "quantity",
    "crude_estimate",
    "crude_se",
    "benchmark_se",
    "method_estimate",
    "method_se",
    "riemann_estimate",
    "riemann_se",
    "z_score",
    "variance_ratio",
    "status",
    "runtime_ms",
    "seed",
)

#: Normals (and stored floats) budget of one method path block
_BLOCK_BUDGET = 1 << 23


def _parse_number(value: Any) -> Any:
    if isinstance(value, str):
        text = value.strip()
        if "/" in text:
            try:
                return float(Fraction(text))
            except (ValueError, ZeroDivisionError):
                raise ValueError(f"invalid number '{text}'") from None
        return text
    return value


def _parse_list(value: Any) -> Any:
    if isinstance(value, str):
        return [_parse_number(v) for v in value.split(",") if v.strip()]
    if isinstance(value, (int, float)):
        return [value]
    return value


def _parse_enum(value: Any) -> Any:
    return value.strip().lower() if isinstance(value, str) else value


def _parse_dynamics(value: Any) -> Any:
    return Dynamics.parse(value) if isinstance(value, str) else value


Number = Annotated[float, BeforeValidator(_parse_number)]
NumberList = Annotated[list[Number], BeforeValidator(_parse_list)]


class ExperimentConfig(BaseModel):
    """One pricing experiment: original dynamics, payoff, simplified dynamics
    and Monte Carlo settings"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str = "experiment"
    dynamics: Annotated[ModelKind, BeforeValidator(_parse_enum)]
    payoff: Annotated[PayoffKind, BeforeValidator(_parse_enum)]
    simplified: Annotated[Dynamics, BeforeValidator(_parse_dynamics)]
    maturity: Number = Field(gt=0)
    strike: Number = Field(gt=0)
    barrier: Optional[Number] = Field(default=None, gt=0)
    weights: Optional[NumberList] = None

    x0: NumberList = Field(default_factory=lambda: [100.0])
    v0: Optional[NumberList] = None
    sigma: Optional[NumberList] = None
    """Volatility of GBM/ABM dynamics"""
    kappa: Number = Field(default=0.0, ge=0)
    theta: Optional[NumberList] = None
    """Long-run variance (defaults to ``v0``)"""
    gamma: Number = Field(default=0.0, ge=0)
    rate: Number = 0.0
    alpha: Number = Field(default=0.0, ge=0)
    beta: Number = Field(default=1.0, ge=0, le=1)
    rho_sv: Number = Field(default=0.0, ge=-1, le=1)
    asset_corr: Number = Field(default=0.0, ge=-1, le=1)
    """Pairwise asset correlation"""
    sigma_tilde: Optional[NumberList] = None

    n_paths: int = Field(default=5000, ge=2)
    n_benchmark: int = Field(default=200_000, ge=2)
    dt: Number = Field(default=1 / 512, gt=0)
    quad_nodes: int = Field(default=24, ge=1)
    riemann_dt: Optional[Number] = Field(default=None, gt=0)
    seed: int = Field(default=1, ge=0)
    benchmark_seed: Optional[int] = Field(default=None, ge=0)
    greeks: bool = False
    bump: Number = Field(default=0.01, gt=0, lt=1)
    z_tolerance: Number = Field(default=4.0, gt=0)
    min_variance_ratio: Optional[Number] = Field(default=None, ge=0)
    min_delta_variance_ratio: Optional[Number] = Field(default=None, ge=0)

    @model_validator(mode="after")
    def _check_combination(self) -> Self:
        if self.payoff not in PAIRINGS[self.simplified]:
            raise ValueError(
                f"{self.payoff.value} payoff cannot be paired with {self.simplified.label} dynamics"
            )
        if self.greeks and self.payoff == PayoffKind.BARRIER:
            raise ValueError("greeks are not available for barrier payoffs")
        try:
            model = self.model_spec()
            self.payoff_spec().for_model(model)
        except DriftMCError as e:
            raise ValueError(str(e)) from None
        return self

    @property
    def dim(self) -> int:
        vols = self.v0 if self.dynamics in (ModelKind.HESTON, ModelKind.SABR) else self.sigma
        return len(vols) if vols else len(self.x0)

    def model_spec(self) -> ModelSpec:
        d = self.dim
        x0 = self.x0 * d if len(self.x0) == 1 else self.x0
        corr = np.full((d, d), self.asset_corr)
        np.fill_diagonal(corr, 1.0)
        if self.dynamics == ModelKind.HESTON:
            if self.v0 is None:
                raise ConfigError("heston dynamics need v0")
            heston = HestonParams(
                v0=self.v0,
                kappa=self.kappa,
                theta=self.v0 if self.theta is None else self.theta,
                gamma=self.gamma,
                rho_sv=self.rho_sv,
                r=self.rate,
            )
            return ModelSpec(ModelKind.HESTON, x0, heston=heston, asset_corr=corr)
        if self.dynamics == ModelKind.SABR:
            if self.v0 is None:
                raise ConfigError("sabr dynamics need v0")
            sabr = SABRParams(v0=self.v0, alpha=self.alpha, beta=self.beta, rho_sv=self.rho_sv)
            return ModelSpec(ModelKind.SABR, x0, sabr=sabr, asset_corr=corr)
        if self.sigma is None:
            raise ConfigError(f"{self.dynamics.value} dynamics need sigma")
        return ModelSpec(self.dynamics, x0, sigma=self.sigma, asset_corr=corr)

    def payoff_spec(self) -> PayoffSpec:
        return PayoffSpec(
            self.payoff,
            self.strike,
            self.maturity,
            barrier=self.barrier,
            weights=None if self.weights is None else tuple(self.weights),
        )

    def simplified_model(self, model: ModelSpec) -> SimplifiedModel:
        return SimplifiedModel.matching(model, self.simplified, self.maturity, self.sigma_tilde)

    @property
    def grid_dt(self) -> float:
        """Simulation step: ``dt``, refined to ``riemann_dt`` if smaller"""
        return self.dt if self.riemann_dt is None else min(self.dt, self.riemann_dt)

    def methods(self) -> list[IntegrationMethod]:
        methods: list[IntegrationMethod] = [Legendre(self.quad_nodes)]
        if self.riemann_dt is not None:
            methods.append(Riemann(self.riemann_dt))
        return methods

    def build_grid(self) -> TimeGrid:
        payoff = self.payoff_spec()
        return build_grid(self.maturity, self.grid_dt, Legendre(self.quad_nodes).rule, payoff.fixings)

    def build_psi(self, model: ModelSpec, grid: TimeGrid) -> PsiFunction:
        """ψ of this experiment on ``grid``

        The crude benchmark observes barriers at every grid time, embedded
        quadrature nodes included, so the barrier correction uses the mean
        realized step.
        """
        payoff = self.payoff_spec().for_model(model)
        return make_psi(payoff, self.simplified_model(model), rate=model.rate, dt_monitor=grid.mean_step)

    @property
    def seed_benchmark(self) -> int:
        return self.seed + 1 if self.benchmark_seed is None else self.benchmark_seed


def compute_z_score(estimate_a: float, se_a: float, estimate_b: float, se_b: float) -> float:
    """``(a − b) / √(se_a² + se_b²)`` of two independent estimators

    :raises EstimatorError: both standard errors are zero but the estimates
        differ
    """
    pooled = math.sqrt(se_a * se_a + se_b * se_b)
    diff = estimate_a - estimate_b
    if pooled == 0.0:
        if diff != 0.0:
            raise EstimatorError("estimates differ but both standard errors are zero")
        return 0.0
    return diff / pooled


def _variance_ratio(crude_se: float, method_se: float) -> float:
    if method_se == 0.0:
        return math.inf
    return (crude_se / method_se) ** 2


@dataclass
class ExperimentResult:
    """Reports of one experiment"""

    config: ExperimentConfig
    crude: EstimatorReport
    """Benchmark crude Monte Carlo, standard error at the benchmark size"""
    method: EstimatorReport
    riemann: Optional[EstimatorReport] = None
    delta: Optional[GreekReport] = None
    crude_delta: Optional[GreekReport] = None
    runtime_ms: float = 0.0
    sample: Optional[CorrectionSample] = field(default=None, repr=False)

    def value_passed(self) -> bool:
        cfg = self.config
        assert self.method.z_score is not None and self.method.variance_ratio is not None
        ok = abs(self.method.z_score) < cfg.z_tolerance
        if cfg.min_variance_ratio is not None:
            ok = ok and self.method.variance_ratio >= cfg.min_variance_ratio
        return ok

    def delta_passed(self) -> bool:
        cfg = self.config
        assert self.delta is not None and self.crude_delta is not None
        z = compute_z_score(
            self.delta.delta, self.delta.stderr_delta, self.crude_delta.delta, self.crude_delta.stderr_delta
        )
        ok = abs(z) < cfg.z_tolerance
        if cfg.min_delta_variance_ratio is not None:
            ok = ok and self._delta_ratio() >= cfg.min_delta_variance_ratio
        return ok

    def _crude_delta_se(self) -> float:
        assert self.crude_delta is not None and self.delta is not None
        scale = math.sqrt(self.crude_delta.n_paths / self.delta.n_paths)
        return self.crude_delta.stderr_delta * scale

    def _delta_ratio(self) -> float:
        assert self.delta is not None
        return _variance_ratio(self._crude_delta_se(), self.delta.stderr_delta)

    def rows(self, timings: bool = False) -> list[dict[str, Any]]:
        """CSV rows: the value row, then the delta row if Greeks were run"""
        cfg = self.config
        base = {
            "name": cfg.name,
            "dynamics": cfg.dynamics.value,
            "payoff": cfg.payoff.value,
            "simplified": cfg.simplified.label,
            "maturity": cfg.maturity,
            "strike": cfg.strike,
            "runtime_ms": round(self.runtime_ms) if timings else None,
            "seed": cfg.seed,
        }
        crude_se = self.crude.extras["stderr_at_n"]
        value = {
            **base,
            "quantity": "value",
            "crude_estimate": self.crude.estimate,
            "crude_se": crude_se,
            "benchmark_se": self.crude.stderr,
            "method_estimate": self.method.estimate,
            "method_se": self.method.stderr,
            "riemann_estimate": None if self.riemann is None else self.riemann.estimate,
            "riemann_se": None if self.riemann is None else self.riemann.stderr,
            "z_score": self.method.z_score,
            "variance_ratio": self.method.variance_ratio,
            "status": "PASS" if self.value_passed() else "FAIL",
        }
        rows = [value]
        if self.delta is not None and self.crude_delta is not None:
            rows.append(
                {
                    **base,
                    "quantity": "delta",
                    "crude_estimate": self.crude_delta.delta,
                    "crude_se": self._crude_delta_se(),
                    "benchmark_se": self.crude_delta.stderr_delta,
                    "method_estimate": self.delta.delta,
                    "method_se": self.delta.stderr_delta,
                    "riemann_estimate": None,
                    "riemann_se": None,
                    "z_score": compute_z_score(
                        self.delta.delta,
                        self.delta.stderr_delta,
                        self.crude_delta.delta,
                        self.crude_delta.stderr_delta,
                    ),
                    "variance_ratio": self._delta_ratio(),
                    "status": "PASS" if self.delta_passed() else "FAIL",
                }
            )
        return rows


@dataclass
class _Block:
    samples: list[CorrectionSample]
    delta: Optional[np.ndarray]


def run_experiment(cfg: ExperimentConfig, *, threads: Optional[int] = None) -> ExperimentResult:
    """Crude benchmark versus drift-correction estimate of one experiment

    The benchmark uses ``n_benchmark`` paths on ``seed_benchmark``; the method
    uses ``n_paths`` paths on ``seed``. All integration methods run on the
    same method paths.
    """
    start = time.perf_counter()
    logger.info("experiment %s: start", cfg.name)
    model = cfg.model_spec()
    payoff = cfg.payoff_spec().for_model(model)
    grid = cfg.build_grid()
    psi = cfg.build_psi(model, grid)
    methods = cfg.methods()

    bench = simulate_payoffs(model, grid, payoff, cfg.n_benchmark, cfg.seed_benchmark, threads=threads)
    crude = estimate_crude(bench)
    crude.seed = cfg.seed_benchmark
    crude.extras["stderr_at_n"] = crude.stderr * math.sqrt(cfg.n_benchmark / cfg.n_paths)

    mask = record_mask(psi, grid, methods)
    per_path = int(np.count_nonzero(mask)) * model.dim * 4
    block_size = max(16, min(1024, _BLOCK_BUDGET // max(1, per_path)))
    asset = greek_asset(model)

    def run_block(block: tuple[int, int]) -> _Block:
        first, count = block
        paths = simulate(model, grid, count, cfg.seed, first_path=first, record=mask)
        samples = [integrate_correction(paths, psi, m) for m in methods]
        delta = None
        if cfg.greeks:
            delta = pathwise_correction(paths, psi, methods[0], order=1, asset=asset)
        return _Block(samples, delta)

    blocks = map_blocks(run_block, list(path_blocks(cfg.n_paths, block_size)), threads)
    psi0 = float(psi.value(0.0, model.forward0(cfg.maturity)[None, :])[0])

    reports = []
    for k in range(len(methods)):
        sample = CorrectionSample.concat([b.samples[k] for b in blocks])
        report = estimate_price(psi0, sample)
        report.seed = cfg.seed
        report.benchmark_estimate = crude.estimate
        report.benchmark_stderr = crude.stderr
        report.z_score = compute_z_score(report.estimate, report.stderr, crude.estimate, crude.stderr)
        report.variance_ratio = _variance_ratio(crude.extras["stderr_at_n"], report.stderr)
        reports.append((report, sample))

    result = ExperimentResult(
        config=cfg,
        crude=crude,
        method=reports[0][0],
        riemann=reports[1][0] if len(reports) > 1 else None,
        sample=reports[0][1],
    )
    if cfg.greeks:
        correction = np.concatenate([b.delta for b in blocks if b.delta is not None])
        base = float(psi.delta(0.0, model.forward0(cfg.maturity)[None, :])[0, asset])
        result.delta = greek_report_from(base, correction, model, asset)
        result.crude_delta = delta_bump_revalue(
            model, payoff, grid, cfg.n_benchmark, cfg.seed_benchmark, cfg.bump, asset=asset
        )

    result.runtime_ms = 1000.0 * (time.perf_counter() - start)
    result.method.runtime_ms = result.runtime_ms
    logger.info(
        "experiment %s: %.6g ± %.2g (crude %.6g ± %.2g), ratio %.4g in %.0f ms",
        cfg.name,
        result.method.estimate,
        result.method.stderr,
        crude.estimate,
        crude.stderr,
        result.method.variance_ratio,
        result.runtime_ms,
    )
    return result


_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^\s*([^\s=:#;\[][^=:]*?)\s*[=:]")


def _key_lines(text: str) -> dict[tuple[str, str], int]:
    """``(section, key) → line number`` of every assignment in ``text``"""
    lines: dict[tuple[str, str], int] = {}
    section = configparser.DEFAULTSECT
    for lineno, line in enumerate(text.splitlines(), start=1):
        m = _SECTION_RE.match(line)
        if m:
            section = m.group(1).strip()
            lines[(section, "")] = lineno
            continue
        m = _KEY_RE.match(line)
        if m and not line[:1].isspace():
            lines[(section, m.group(1).strip().lower())] = lineno
    return lines


def load_suite(
    source: Union[str, os.PathLike], overrides: Optional[dict[str, Any]] = None
) -> list[ExperimentConfig]:
    """Parse and validate an experiment file

    ``overrides`` replace the corresponding keys of every experiment.

    :raises ConfigError: parse or validation failure, naming the section, the
        key and its line
    """
    try:
        with open(source, encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read experiment file: {e}") from None
    return parse_suite(text, overrides)


def parse_suite(text: str, overrides: Optional[dict[str, Any]] = None) -> list[ExperimentConfig]:
    """Validate experiments from the text of an experiment file"""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e).splitlines()[0], getattr(e, "lineno", None)) from None
    lines = _key_lines(text)

    configs = []
    for section in parser.sections():
        values: dict[str, Any] = {"name": section, **dict(parser.items(section))}
        values.update(overrides or {})
        try:
            configs.append(ExperimentConfig.model_validate(values))
        except ValidationError as e:
            err = e.errors()[0]
            key = str(err["loc"][0]) if err["loc"] else ""
            lineno = lines.get((section, key)) or lines.get((configparser.DEFAULTSECT, key))
            where = f"[{section}] {key}".rstrip()
            raise ConfigError(f"{where}: {err['msg']}", lineno or lines.get((section, ""))) from None
    return configs


def _format(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def write_csv(results: Iterable[ExperimentResult], out: TextIO, timings: bool = False) -> None:
    """Write the report rows of ``results`` with a fixed column order"""
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for result in results:
        for row in result.rows(timings):
            writer.writerow([_format(row[c]) for c in CSV_COLUMNS])


@dataclass
class SuiteResult:
    """Outcome of a suite run"""

    results: list[ExperimentResult]

    @property
    def statuses(self) -> list[str]:
        return [row["status"] for r in self.results for row in r.rows()]

    @property
    def passed(self) -> int:
        return self.statuses.count("PASS")

    @property
    def failed(self) -> int:
        return self.statuses.count("FAIL")

    def summary(self) -> str:
        return f"{len(self.statuses)} rows: {self.passed} passed, {self.failed} failed"


def run_suite(
    source: Union[str, os.PathLike],
    out: Union[str, os.PathLike],
    *,
    overrides: Optional[dict[str, Any]] = None,
    timings: bool = False,
    threads: Optional[int] = None,
    only: Sequence[str] = (),
) -> SuiteResult:
    """Run every experiment of an experiment file and write the CSV report

    :param only: restrict to these section names
    """
    configs = load_suite(source, overrides)
    if only:
        unknown = set(only) - {c.name for c in configs}
        if unknown:
            raise ConfigError(f"unknown experiments: {', '.join(sorted(unknown))}")
        configs = [c for c in configs if c.name in only]
    results = []
    for cfg in configs:
        result = run_experiment(cfg, threads=threads)
        for row in result.rows():
            if row["status"] != "PASS":
                logger.warning(
                    "experiment %s (%s) outside its band: z=%.3g, ratio=%.4g",
                    cfg.name,
                    row["quantity"],
                    row["z_score"],
                    row["variance_ratio"],
                )
        results.append(result)
    with open(out, "w", newline="", encoding="utf-8") as f:
        write_csv(results, f, timings)
    suite = SuiteResult(results)
    logger.info("suite %s: %s", os.fspath(source), suite.summary())
    return suite
