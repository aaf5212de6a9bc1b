"""``explab`` command line entry point.

Exit codes: 0 success, 2 configuration error, 3 experiment failure.
``EXPLAB_OUT`` and ``EXPLAB_JOBS`` stand in for ``--out`` and ``--jobs``
when the flags are absent.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

from .experiments import EXPERIMENTS, ConfigError, config_from_dict, load_config, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_FAILURE = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser():
    p = _Parser(prog="explab", description="Run a desk-scale decision-rule experiment.")
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--config", help="JSON config; omitted keys take the documented defaults")
    p.add_argument("--out", help="output directory (env EXPLAB_OUT)")
    p.add_argument("--seed", type=int, help="override seeds.master")
    p.add_argument("--jobs", type=int, help="worker processes (env EXPLAB_JOBS)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args, environ=os.environ):
    """Merge the config file, CLI flags and environment into one config."""
    if args.config:
        config = load_config(args.config)
    else:
        config = config_from_dict({"experiment": args.experiment})
    if config.experiment != args.experiment:
        raise ConfigError(f"config is for {config.experiment!r}, not {args.experiment!r}")
    if args.seed is not None:
        config = replace(config, seeds=replace(config.seeds, master=args.seed))
    out = args.out or environ.get("EXPLAB_OUT")
    if not out:
        raise ConfigError("no output directory: pass --out or set EXPLAB_OUT")
    jobs = args.jobs
    if jobs is None and environ.get("EXPLAB_JOBS"):
        try:
            jobs = int(environ["EXPLAB_JOBS"])
        except ValueError as err:
            raise ConfigError(f"EXPLAB_JOBS is not an integer: {environ['EXPLAB_JOBS']!r}") from err
    try:
        config = replace(config, output_dir=out, jobs=jobs if jobs is not None else config.jobs)
    except ValueError as err:
        raise ConfigError(str(err)) from err
    return config


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args)
    except ConfigError as err:
        print(f"explab: config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        result = run_experiment(config, config.output_dir)
    except Exception as err:  # any failure inside a run maps to one exit code
        logging.getLogger("explab").exception("experiment failed")
        print(f"explab: experiment failed: {err}", file=sys.stderr)
        return EXIT_FAILURE
    if result and result.get("failed_models"):
        print(f"explab: models failed: {', '.join(result['failed_models'])}", file=sys.stderr)
        return EXIT_FAILURE
    print(config.output_dir)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
