import argparse
import logging
import sys
from typing import List, Optional

from src.analysis import BoundInputs, beta_g_tradeoff, theorem_bound
from src.config import APP_TITLE, ExitCode
from src.errors import ConfigError, HalosError, TraceError, UnschedulableError
from src import runner
from src.settings import load_config

logger = logging.getLogger(APP_TITLE)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=APP_TITLE, description="Hierarchical asynchronous local-SGD simulator")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings only")
    verbs = parser.add_subparsers(dest="verb", required=True)

    def with_config(name: str, help_text: str) -> argparse.ArgumentParser:
        sub = verbs.add_parser(name, help=help_text)
        sub.add_argument("config", help="YAML run config")
        sub.add_argument("--set", dest="overrides", action="append", default=[], metavar="PATH=VALUE",
                         help="override a config key, e.g. strategy.merge_alpha=0.5")
        return sub

    run = with_config("run", "generate, replay and report one run")
    run.add_argument("--strategy", help="strategy preset, or 'all' for a comparison")
    run.add_argument("--sweep", metavar="AXIS=V1,V2", help="sweep one config key")

    sweep = with_config("sweep", "vary one config key")
    sweep.add_argument("axis", metavar="AXIS=V1,V2,...")

    compare = with_config("compare", "one run per strategy preset plus a comparison table")
    compare.add_argument("--strategy", nargs="+", default=["all"])

    replay = with_config("replay", "re-execute a stored trace")
    replay.add_argument("--trace", required=True)

    breakdown = with_config("breakdown", "compute / communication / stall split per strategy")
    breakdown.add_argument("--strategy", nargs="+", default=["sync-paper", "diloco-paper", "async-paper"])

    bound = verbs.add_parser("bound", help="evaluate the convergence bound")
    for flag in ("f0-minus-fstar", "eta-0", "eta-m", "beta-g", "beta-l", "lipschitz", "grad-bound", "sigma-sq"):
        bound.add_argument(f"--{flag}", type=float, required=True)
    bound.add_argument("--steps", type=int, required=True)
    bound.add_argument("--d-g-sq", type=float, default=0.0)
    bound.add_argument("--d-l-sq", type=float, default=0.0)
    bound.add_argument("--variant", choices=("theorem", "derivation"), default="theorem")
    return parser


def _split_axis(text: str):
    if "=" not in text:
        raise ConfigError(text, "sweep must look like axis=v1,v2,...")
    axis, values = text.split("=", 1)
    return axis.strip(), runner.parse_values(values)


def _bound(args: argparse.Namespace) -> ExitCode:
    try:
        inputs = BoundInputs(
            f0_minus_fstar=args.f0_minus_fstar, eta_0=args.eta_0, eta_m=args.eta_m, steps=args.steps,
            beta_g=args.beta_g, beta_l=args.beta_l, lipschitz=args.lipschitz, grad_bound=args.grad_bound,
            sigma_sq=args.sigma_sq, d_g_sq=args.d_g_sq, d_l_sq=args.d_l_sq,
        )
    except ValueError as exc:
        raise ConfigError("bound", str(exc)) from None
    print(f"bound = {theorem_bound(inputs, args.variant)!r}")
    print(f"beta_g trade-off term = {beta_g_tradeoff(args.beta_g)!r}")
    return ExitCode.OK


def _dispatch(args: argparse.Namespace) -> ExitCode:
    if args.verb == "bound":
        return _bound(args)

    config = load_config(args.config, args.overrides)
    if args.verb == "run":
        if args.sweep:
            axis, values = _split_axis(args.sweep)
            return _summary_code(runner.run_sweep(config, axis, values))
        if args.strategy == "all":
            return _summary_code(runner.compare(config, ["all"]))
        if args.strategy:
            config = runner.with_strategy(config, args.strategy)
        return runner.run(config)
    if args.verb == "sweep":
        axis, values = _split_axis(args.axis)
        return _summary_code(runner.run_sweep(config, axis, values))
    if args.verb == "compare":
        return _summary_code(runner.compare(config, args.strategy))
    if args.verb == "replay":
        return runner.replay_from_trace(config, args.trace)
    if args.verb == "breakdown":
        for name, split in runner.breakdown(config, args.strategy).items():
            print(f"{name:24s} compute {split.compute_fraction:6.1%}  "
                  f"comm {split.comm_fraction:6.1%}  stall {split.stall_fraction:6.1%}")
        return ExitCode.OK
    raise ConfigError("verb", f"unknown verb {args.verb!r}")


def _summary_code(summary) -> ExitCode:
    return ExitCode.DIVERGED if any(row.diverged for row in summary.rows) else ExitCode.OK


def main(argv: Optional[List[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        code = _dispatch(args)
    except (ConfigError, TraceError, UnschedulableError) as exc:
        logger.error("%s", exc)
        return int(ExitCode.CONFIG_ERROR)
    except OSError as exc:
        logger.error("I/O error: %s", exc)
        return int(ExitCode.IO_ERROR)
    except HalosError as exc:
        logger.error("%s", exc)
        return int(ExitCode.CONFIG_ERROR)
    if code is ExitCode.DIVERGED:
        logger.warning("run diverged; report written")
    return int(code)


if __name__ == "__main__":
    sys.exit(main())
