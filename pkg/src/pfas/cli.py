"""Command-line entry point: ``pfas-sim {nmse,rate} [options]``.

Exit status is 0 on success, 2 for configuration errors and 3 when a
solver hits an unrecoverable numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .errors import ConfigError, NumericalError
from .harness import PROFILES, emit_csv, load_config, parse_config_text, run_experiment

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pfas-sim",
        description="Channel estimation and antenna-state precoding experiments.",
    )
    parser.add_argument("experiment", choices=("nmse", "rate"))
    parser.add_argument("--config", help="plain-text 'key = value' scenario file")
    parser.add_argument("--profile", choices=sorted(PROFILES), help="default parameter set")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--trials", type=int, help="number of Monte-Carlo trials")
    parser.add_argument("--out", help="CSV output path (default: stdout summary only)")
    parser.add_argument("--estimator", help="comma list from ls, omp, vbi")
    parser.add_argument("--precoder", help="comma list from proposed, random, nonfas, groupopt, upper")
    parser.add_argument("--snr-db", type=float, help="transmit power P_T in dB (noise variance 1)")
    parser.add_argument("--workers", type=int, help="worker processes")
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override any scenario key; repeatable",
    )
    parser.add_argument(
        "--debug-trace",
        metavar="PREFIX",
        help="write per-iteration turbo-VBI traces to PREFIX_trial<t>_user<k>.csv",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _overrides(args) -> dict:
    extra = parse_config_text("\n".join(args.set)) if args.set else {}
    return {
        "seed": args.seed,
        "n_trials": args.trials,
        "estimator": args.estimator,
        "precoder": args.precoder,
        "p_t_db": args.snr_db,
        "workers": args.workers,
        **extra,
    }


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = load_config(args.config, args.profile, **_overrides(args))
        result = run_experiment(args.experiment, config, args.debug_trace)
        if args.out:
            emit_csv(result, args.out)
    except ConfigError as exc:
        print(f"pfas-sim: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"pfas-sim: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"pfas-sim: cannot write output: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for metric, (mean, std) in result.summary().items():
        print(f"{metric:24s} mean {mean:10.4f}  std {std:8.4f}  (n={len(result.values(metric))})")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
