"""Command-line pipeline driver.

Subcommands mirror the stage order: gen-data, calibrate, fit-heuristic,
attack, detect, report. Every post-gen stage reads the run directory's
manifest, so only gen-data takes a config file. Exit codes: 0 success,
2 configuration error, 3 missing prior-stage artifact.
"""

from __future__ import annotations

import argparse
import sys

from . import __version__
from .config import ConfigError, default_config, load_config
from .harness import (
    ATTACK_MODES,
    config_label,
    DETECTORS,
    load_run,
    MissingArtifactError,
    stage_attack,
    stage_calibrate,
    stage_detect,
    stage_fit_heuristic,
    stage_gen_data,
    stage_report,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3

MATCHERS = ("centroid", "maximum", "ocsvm")
SCHEMES = ("flat", "sigmoid")


def _add_matcher_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--matcher", choices=MATCHERS, default="centroid",
                        help="matcher kind (default: centroid)")
    parser.add_argument("--weights", choices=SCHEMES, default="flat",
                        help="sample weighting scheme (default: flat)")
    parser.add_argument("--nu", type=float, default=0.5,
                        help="ocsvm nu parameter (ignored otherwise)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="poisonsim",
        description="Template-poisoning attack and detection pipeline on "
                    "synthetic biometric verifiers.")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data",
                         help="generate and persist a synthetic population")
    gen.add_argument("--config", help="dotted-key config file; defaults apply "
                                      "to any key it omits")
    gen.add_argument("--out", required=True, help="run directory to create")
    gen.add_argument("--seed", type=int, help="override the config seed")

    cal = sub.add_parser("calibrate",
                         help="fix one matcher's EER threshold on the "
                              "calibration pool")
    cal.add_argument("--data", required=True, help="run directory")
    _add_matcher_flags(cal)

    fit = sub.add_parser("fit-heuristic",
                         help="fit the injection heuristic on oracle runs "
                              "against calibration users")
    fit.add_argument("--data", required=True, help="run directory")
    _add_matcher_flags(fit)
    fit.add_argument("--pairs", type=int, default=None,
                     help="fitting pairs (default: sweep.heuristic_pairs)")
    fit.add_argument("--jobs", type=int, default=1)

    att = sub.add_parser("attack", help="run the attacker-victim pair sweep")
    att.add_argument("--data", required=True, help="run directory")
    att.add_argument("--mode", choices=ATTACK_MODES, default="oracle")
    _add_matcher_flags(att)
    att.add_argument("--jobs", type=int, default=1)

    det = sub.add_parser("detect",
                         help="evaluate a poisoning detector on an attack "
                              "sweep")
    det.add_argument("--data", required=True, help="run directory")
    det.add_argument("--detector", choices=DETECTORS, default="cosine")
    det.add_argument("--mode", choices=ATTACK_MODES, default="oracle",
                     help="attack sweep to read injections from")
    _add_matcher_flags(det)

    rep = sub.add_parser("report", help="aggregate all attack sweeps to CSV")
    rep.add_argument("--data", required=True, help="run directory")
    return parser


def _nu(args: argparse.Namespace) -> float | None:
    return args.nu if args.matcher == "ocsvm" else None


def _dispatch(args: argparse.Namespace) -> None:
    if args.command == "gen-data":
        cfg = load_config(args.config) if args.config else default_config()
        if args.seed is not None:
            import dataclasses
            cfg = dataclasses.replace(cfg, seed=args.seed)
        manifest = stage_gen_data(cfg, args.out)
        print(f"wrote {args.out}: {len(manifest['config']['population'])} "
              f"population keys, fingerprint "
              f"{manifest['population_sha256'][:12]}")
        return
    ctx = load_run(args.data)
    if args.command == "calibrate":
        record = stage_calibrate(ctx, args.matcher, args.weights, _nu(args))
        print(f"calibrated {config_label(args.matcher, args.weights, _nu(args))}: "
              f"threshold={record['threshold']:.6g} eer={record['eer']:.4f}")
    elif args.command == "fit-heuristic":
        payload = stage_fit_heuristic(ctx, args.matcher, args.weights,
                                      _nu(args), n_pairs=args.pairs,
                                      jobs=args.jobs)
        print(f"fitted heuristic on {payload['n_pairs']} pairs: "
              f"{payload['n_records_used']}/{payload['n_records']} records, "
              f"ranks {payload['model']['ranks']}")
    elif args.command == "attack":
        results = stage_attack(ctx, args.mode, args.matcher, args.weights,
                               _nu(args), jobs=args.jobs)
        n_success = sum(1 for r in results if r.success)
        label = f"{args.mode}_{config_label(args.matcher, args.weights, _nu(args))}"
        print(f"attack {label}: {n_success}/{len(results)} pairs succeeded")
    elif args.command == "detect":
        label = f"{args.mode}_{config_label(args.matcher, args.weights, _nu(args))}"
        summary = stage_detect(ctx, args.detector, label)
        if args.detector == "cosine":
            print(f"detect cosine on {label}: eer={summary['eer']:.4f} "
                  f"alarm_by_second={summary['poison_alarm_by_second']:.2f}")
        else:
            print(f"detect hypersphere on {label}: "
                  f"radius={summary['radius']:.6g} "
                  f"poison_revert={summary['poison_revert_rate']:.2f}")
    elif args.command == "report":
        info = stage_report(ctx)
        print(f"report over {len(info['labels'])} sweeps, "
              f"{info['n_results']} runs: {ctx.root / 'report'}")
    else:  # pragma: no cover - argparse enforces the choices
        raise AssertionError(args.command)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_MISSING
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
