"""Command-line interface for the SSAFL simulator"""

import sys
import argparse
import logging

from ssaflsim import __version__
from ssaflsim.config import ExperimentConfig, apply_overrides, dump_config, load_config
from ssaflsim.errors import ConfigError, SSAFLError
from ssaflsim.experiment_runner import ExperimentRunner

EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _load(args):
    config = load_config(args.config) if args.config else ExperimentConfig()
    return apply_overrides(config, seed=getattr(args, 'seed', None),
                           method=getattr(args, 'method', None), output_dir=getattr(args, 'out', None))


def _add_common(parser, method=False):
    parser.add_argument("--config", metavar="PATH", help="YAML experiment config (defaults if omitted)")
    parser.add_argument("--out", metavar="DIR", help="Output directory (overrides output_dir)")
    parser.add_argument("--seed", type=int, metavar="N", help="Run a single seed (overrides seeds)")
    if method:
        parser.add_argument("--method", metavar="NAME",
                            help="Run a single method: SSAFL, SSAFLNoAdaptive, FedAvg, FedAsyn, SemiAsyn")


def build_parser():
    """Argument parser with one subcommand per operation"""
    parser = argparse.ArgumentParser(
        description="SSAFL - similarity-aware asynchronous federated learning simulator",
        prog="ssafl"
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")

    subparsers = parser.add_subparsers(dest="command", help="Command to run")

    gen_data = subparsers.add_parser("gen-data", help="Write synthetic per-node partitions")
    _add_common(gen_data)

    gen_pop = subparsers.add_parser("gen-population", help="Write a synthetic node population")
    _add_common(gen_pop)

    run = subparsers.add_parser("run", help="Run every (method, seed) pair of a config")
    _add_common(run, method=True)

    compare = subparsers.add_parser("compare", help="Compare run summaries across seeds")
    compare.add_argument("summary_glob", nargs="?", help="Glob of *.summary.json files")
    compare.add_argument("--reference", default="SemiAsyn", help="Method for the upload-reduction column")
    compare.add_argument("--config", metavar="PATH", help="YAML experiment config")
    compare.add_argument("--out", metavar="DIR", help="Where comparison.csv/.xlsx go")

    diagnose = subparsers.add_parser("diagnose", help="Staleness, trigger-bias, PL and federated-gap report")
    _add_common(diagnose)
    diagnose.add_argument("--no-pl", action="store_true", help="Skip the quadratic PL task")
    diagnose.add_argument("--no-gap", action="store_true", help="Skip the centralized reference")

    verify = subparsers.add_parser("verify", help="Check a deployed strategy against telemetry")
    _add_common(verify)
    verify.add_argument("--strategy", required=True, metavar="FILE", help="Strategy DSL or .json file")
    verify.add_argument("--telemetry", required=True, metavar="CSV", help="Telemetry CSV (time,<metric>...)")
    verify.add_argument("--p-min", type=float, default=0.9, help="Reliability threshold (default 0.9)")
    verify.add_argument("--no-reverify", action="store_true", help="Only report the verdict")

    subparsers.add_parser("print-default-config", help="Print the default YAML config")
    return parser


def dispatch(args):
    """Run one parsed command; returns the process exit status"""
    if args.command == "print-default-config":
        sys.stdout.write(dump_config(ExperimentConfig()))
        return 0

    config = _load(args)
    runner = ExperimentRunner(config)
    if args.command == "gen-data":
        runner.generate_data(config.seeds[0])
    elif args.command == "gen-population":
        runner.generate_population(config.seeds[0])
    elif args.command == "run":
        runner.run()
    elif args.command == "compare":
        pattern = args.summary_glob or f"{config.output_dir}/*.summary.json"
        runner.compare(pattern, args.reference)
    elif args.command == "diagnose":
        runner.diagnose(with_pl=not args.no_pl, with_gap=not args.no_gap)
    elif args.command == "verify":
        if not 0 <= args.p_min <= 1:
            raise ConfigError('p_min', "must lie in [0, 1]")
        runner.verify(args.strategy, args.telemetry, args.p_min, reverify=not args.no_reverify)
    return 0


def main(argv=None):
    """Main entry point for the ssafl command"""
    parser = build_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format='%(asctime)s - %(levelname)s - %(message)s'
    )

    if not args.command:
        parser.print_help()
        sys.exit(1)

    try:
        status = dispatch(args)
    except ConfigError as e:
        print(f"❌ Config error: {e}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)
    except (SSAFLError, OSError) as e:
        print(f"❌ Error: {e}", file=sys.stderr)
        sys.exit(EXIT_RUNTIME)
    except Exception as e:
        print(f"❌ Error: {e}", file=sys.stderr)
        sys.exit(1)
    sys.exit(status)


if __name__ == "__main__":
    main()
