"""Command-line interface: ``driftmc run | quad | selftest``"""

__all__ = ["main", "build_parser", "default_config"]

import argparse
import logging
import os
import sys
from importlib import resources
from pathlib import Path
from typing import Any, Optional

from .correction_engine import write_xi_profile
from .experiments import run_suite
from .quadrature import gauss_legendre
from .selftest import run_selftest
from .util import THREADS_ENV, DriftMCError, worker_count

logger = logging.getLogger("driftmc")


def default_config() -> Path:
    """The shipped preset reproducing the pricing and delta tables"""
    return Path(str(resources.files("driftmc") / "tables.cfg"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="driftmc",
        description="Drift-correction Monte Carlo for option prices and Greeks",
    )
    parser.add_argument(
        "--log-level",
        default="WARNING",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="logging threshold (default: WARNING)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment file and write a CSV report")
    run.add_argument("--config", type=Path, default=None, help="experiment file (default: shipped tables.cfg)")
    run.add_argument("--out", type=Path, required=True, help="CSV report path")
    run.add_argument("--seed", type=int, help="seed of the method paths")
    run.add_argument("--benchmark-seed", type=int, help="seed of the benchmark paths")
    run.add_argument("--paths", type=int, help="method path count N")
    run.add_argument("--benchmark-paths", type=int, help="benchmark path count")
    integration = run.add_mutually_exclusive_group()
    integration.add_argument("--quad", type=int, metavar="L", help="Gauss-Legendre node count")
    integration.add_argument(
        "--riemann", type=float, metavar="DT", help="also report a left Riemann sum with step DT"
    )
    run.add_argument("--greeks", action="store_true", help="also estimate deltas")
    run.add_argument("--only", nargs="+", default=(), metavar="NAME", help="run only these experiments")
    run.add_argument("--timings", action="store_true", help="fill the runtime_ms column")
    run.add_argument("--xi-profile", type=Path, metavar="DIR", help="write per-node mean ξ of each experiment")
    run.add_argument("--threads", type=int, help=f"worker threads (default: ${THREADS_ENV} or 1)")

    quad = sub.add_parser("quad", help="print a Gauss-Legendre rule on (0, 1)")
    quad.add_argument("--nodes", type=int, required=True, metavar="L")

    sub.add_parser("selftest", help="run the invariant checks")
    return parser


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    pairs = {
        "seed": args.seed,
        "benchmark_seed": args.benchmark_seed,
        "n_paths": args.paths,
        "n_benchmark": args.benchmark_paths,
        "quad_nodes": args.quad,
        "riemann_dt": args.riemann,
        "greeks": True if args.greeks else None,
    }
    return {k: v for k, v in pairs.items() if v is not None}


def _run(args: argparse.Namespace) -> int:
    config = args.config or default_config()
    threads = args.threads if args.threads is not None else worker_count()
    suite = run_suite(
        config,
        args.out,
        overrides=_overrides(args),
        timings=args.timings,
        threads=threads,
        only=args.only,
    )
    if args.xi_profile is not None:
        os.makedirs(args.xi_profile, exist_ok=True)
        for result in suite.results:
            if result.sample is not None:
                write_xi_profile(result.sample, args.xi_profile / f"{result.config.name}.csv")
    print(suite.summary())
    return 0 if suite.failed == 0 else 1


def _quad(args: argparse.Namespace) -> int:
    rule = gauss_legendre(args.nodes)
    print("abscissa,weight")
    for a, w in zip(rule.abscissas.tolist(), rule.weights.tolist()):
        print(f"{a:.17g},{w:.17g}")
    return 0


def _selftest(_: argparse.Namespace) -> int:
    results = run_selftest()
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
    return 0 if all(r.passed for r in results) else 1


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    commands = {"run": _run, "quad": _quad, "selftest": _selftest}
    try:
        return commands[args.command](args)
    except DriftMCError as e:
        logger.debug("command failed", exc_info=True)
        print(f"driftmc: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
