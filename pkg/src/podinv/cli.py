"""Command line entry point: ``podinv <subcommand> [--config FILE] [--set section.key=value ...]``."""

from __future__ import annotations

import argparse
import json
import sys

from .config import describe_keys, load_config, shipped_profiles
from .errors import ConfigError, PodInvError
from .experiments import OUTPUT_ROOT_ENV, run_basis, run_experiment, run_snapshots

SUBCOMMANDS = {
    "snapshots": "compute the training snapshots and store them (snapshots.npz)",
    "basis": "build the POD basis (basis.npz, spectrum.csv, leading mode images)",
    "recover": "reconstruct experiment.truth from one noisy observation",
    "sweep": "error sweep over h, lambda or the POD rank (see --param)",
    "lambda-iter": "choose lambda by the fixed-point iteration",
    "timing": "compare POD and FEM optimisation times over the training sources",
}


def build_parser() -> argparse.ArgumentParser:
    epilog = (
        "configuration keys (INI file sections; override any of them with --set section.key=value):\n\n"
        + describe_keys()
        + f"\n\nenvironment:\n  {OUTPUT_ROOT_ENV}  root directory for relative output paths\n"
        + "\nshipped profiles: " + ", ".join(shipped_profiles())
        + "\n\nOn failure the exit status is nonzero and a JSON object\n"
        + '{"error": <code>, "message": <text>} is printed on stderr.'
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="INI configuration file")
    common.add_argument("--profile", help="shipped configuration profile (e.g. letters)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one configuration key (repeatable)")
    common.add_argument("-o", "--output", help="output directory (overrides experiment.output)")

    parser = argparse.ArgumentParser(
        prog="podinv",
        description="POD reduced-order reconstruction of source terms in the heat equation.",
        epilog=epilog,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in SUBCOMMANDS.items():
        sp = sub.add_parser(name, parents=[common], help=text, description=text, epilog=epilog,
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        if name == "sweep":
            sp.add_argument("--param", choices=("h", "lambda", "npod"),
                            help="swept parameter (default: taken from experiment.kind)")
    return parser


def _kind_overrides(args) -> list:
    if args.command in ("recover", "lambda-iter", "timing"):
        return [f"experiment.kind={args.command}"]
    if args.command == "sweep" and args.param:
        return [f"experiment.kind=sweep-{args.param}"]
    return []


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, list(args.overrides) + _kind_overrides(args), profile=args.profile)
        if args.command == "sweep" and not cfg.experiment.kind.startswith("sweep-"):
            raise ConfigError("sweep needs --param or experiment.kind = sweep-h | sweep-lambda | sweep-npod")
        if args.command == "snapshots":
            summary = run_snapshots(cfg, args.output)
        elif args.command == "basis":
            summary = run_basis(cfg, args.output)
        else:
            summary = run_experiment(cfg, args.output)
    except PodInvError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # report anything unexpected in the same machine-readable form
        print(json.dumps({"error": "internal-error", "message": f"{type(exc).__name__}: {exc}"}), file=sys.stderr)
        return 1
    summary.pop("config", None)
    print(json.dumps({k: v for k, v in summary.items() if not isinstance(v, (list, dict))}, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
