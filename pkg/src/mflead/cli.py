"""Command-line entry point: ``mflead <subcommand> [--config PATH] [--out DIR] ...``."""

import argparse
import logging
import sys
from collections.abc import Callable, Sequence

from pydantic import ValidationError

from mflead._internal.state import _GLOBAL_STATE
from mflead.config import ExperimentConfig
from mflead.exceptions import MfleadError
from mflead.experiments import RunBundle, convergence_study, run_audit, run_test1, run_test2, validate

DEFAULT_CONFIGS = {
    "run-test1": "test1",
    "run-test2": "test2",
    "converge": "convergence",
    "validate": "test1",
    "audit": "test1",
}


def _load(args: argparse.Namespace) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.load_path(args.config)
    else:
        cfg = ExperimentConfig.builtin(DEFAULT_CONFIGS[args.command])
    return cfg.with_overrides(seed=args.seed, controlled=args.controlled, backend=args.backend, out=args.out)


def _report_bundle(bundle: RunBundle) -> int:
    passed = sum(c.passed for c in bundle.checks)
    print(f"{bundle.name}: {passed}/{len(bundle.checks)} checks passed, see {bundle.manifest}")
    return 0


def _run_test1(cfg: ExperimentConfig) -> int:
    return _report_bundle(run_test1(cfg))


def _run_test2(cfg: ExperimentConfig) -> int:
    return _report_bundle(run_test2(cfg))


def _converge(cfg: ExperimentConfig) -> int:
    result = convergence_study(cfg)
    print(result.medians.to_string(index=False))
    for key, slope in result.slopes.items():
        print(f"log-log slope {key}: {slope:.3f}")
    return 0


def _validate(cfg: ExperimentConfig) -> int:
    report = validate(cfg)
    for check in report.checks:
        print(f"{'PASS' if check.passed else 'FAIL'} {check.name}: {check.detail}")
    return 0 if report.passed else 1


def _audit(cfg: ExperimentConfig) -> int:
    report = run_audit(cfg)
    for key, value in report.constants.items():
        print(f"{key}: {value:.6g}{' (flagged)' if key in report.flagged else ''}")
    return 0 if report.finite else 1


COMMANDS: dict[str, Callable[[ExperimentConfig], int]] = {
    "run-test1": _run_test1,
    "run-test2": _run_test2,
    "converge": _converge,
    "validate": _validate,
    "audit": _audit,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mflead", description="Selective mean-field control with transient leaders: simulations and checks."
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    helps = {
        "run-test1": "emerging-leaders opinion dynamics, uncontrolled and MPC-controlled",
        "run-test2": "competing-leaders opinion dynamics on three labels",
        "converge": "particle to mean-field convergence study",
        "validate": "invariant checks; exits nonzero on any failure",
        "audit": "randomized audit of the structural assumptions",
    }
    for name, text in helps.items():
        sub = subparsers.add_parser(name, help=text)
        sub.add_argument("--config", default=None, help=f"experiment JSON (default: builtin {DEFAULT_CONFIGS[name]})")
        sub.add_argument("--out", default=None, help="output directory")
        sub.add_argument("--seed", type=int, default=None, help="particle and audit seed")
        sub.add_argument("--controlled", choices=["on", "off", "both"], default=None)
        sub.add_argument("--backend", choices=["pde", "particle", "both"], default=None)
        sub.add_argument("-v", "--verbose", action="store_true", help="log at DEBUG level")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = _load(args)
        return COMMANDS[args.command](cfg)
    except (MfleadError, ValidationError, ValueError, OSError):
        _GLOBAL_STATE.logger.error("mflead %s failed", args.command, exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
