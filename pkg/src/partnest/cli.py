"""Command line interface: ``partnest {analyze,simulate,diagnose}``.

Exit codes: 0 success, 2 invalid input, 3 estimation failure.  Errors are
printed to stderr as ``error code=<n> <ErrorClass>: <message>``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import analysis
from . import estimators as est
from . import simulation as sim
from .data import BINARY, CONTINUOUS, parse_csv
from .errors import EstimationError, ValidationError

EXIT_VALIDATION = 2
EXIT_ESTIMATION = 3


def _spec(args):
    return est.ModelSpec(known_treatment_prob=args.known_treat_prob,
                         normalized_weights=args.normalized_weights)


def _methods(value):
    return {"sandwich": ("sandwich",), "boot": ("bootstrap",),
            "both": ("sandwich", "bootstrap")}[value]


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_analyze(args):
    data = parse_csv(args.input, args.covariates, args.outcome)
    reports = analysis.analyze(data, analysis.parse_estimators(args.estimators),
                               spec=_spec(args), methods=_methods(args.inference),
                               B=args.boot, seed=args.seed, stratified=args.stratified_boot,
                               threads=args.threads)
    out = _out_dir(args)
    analysis.write_report_csv(reports, out / "estimates.csv")
    analysis.write_diagnostics_csv(reports[0].diagnostics, out / "diagnostics.csv")
    text = (analysis.format_report(reports) + "\n"
            + analysis.format_diagnostics(reports[0].diagnostics))
    (out / "estimates.txt").write_text(text, encoding="utf-8")
    print(text, end="")


def cmd_diagnose(args):
    data = parse_csv(args.input, args.covariates, args.outcome)
    spec = _spec(args)
    nuis = est.fit_nuisances(data, spec)
    diag = est.weight_diagnostic(data, nuis)
    out = _out_dir(args)
    analysis.write_diagnostics_csv(diag, out / "diagnostics.csv")
    text = analysis.format_diagnostics(diag)
    (out / "diagnostics.txt").write_text(text, encoding="utf-8")
    print(text, end="")


def cmd_simulate(args):
    sc = sim.scenario(args.scenario, args.outcome)
    methods = _methods(args.inference)
    report = sim.run_replications(
        sc, args.runs, args.boot if "bootstrap" in methods else 0, args.seed,
        kinds=analysis.parse_estimators(args.estimators), spec=_spec(args),
        sandwich="sandwich" in methods, stratified=args.stratified_boot,
        truth_N=args.truth_draws, threads=args.threads,
    )
    out = _out_dir(args)
    stem = f"simulation_{sc.label}_{sc.outcome_kind}"
    report.to_csv(out / f"{stem}.csv")
    text = report.to_text()
    (out / f"{stem}.txt").write_text(text, encoding="utf-8")
    print(text, end="")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="partnest",
        description="Generalizability estimators for partially nested trial designs.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, need_input):
        if need_input:
            p.add_argument("--input", required=True, help="CSV with covariates, p, s, a, y")
            p.add_argument("--covariates", type=lambda t: [c for c in t.split(",") if c],
                           default=None,
                           help="comma-separated covariate columns (default: all others)")
        p.add_argument("--outcome", choices=(BINARY, CONTINUOUS), default=BINARY)
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--known-treat-prob", type=float, default=None, metavar="P",
                       help="use the design probability of treatment instead of a model")
        p.add_argument("--normalized-weights", action="store_true",
                       help="divide weighted sums by the weight total")
        p.add_argument("--threads", type=int, default=1)

    def inference_flags(p, default_estimators):
        p.add_argument("--estimators", default=default_estimators,
                       help="comma-separated subset of trial,g,w,aug")
        p.add_argument("--inference", choices=("sandwich", "boot", "both"), default="both")
        p.add_argument("--boot", type=int, default=1000, metavar="N")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--stratified-boot", action="store_true",
                       help="resample within the p=0 and p=1 parts")

    pa = sub.add_parser("analyze", help="estimate target-population means and effects")
    common(pa, need_input=True)
    inference_flags(pa, "g,w,aug")
    pa.set_defaults(func=cmd_analyze)

    ps = sub.add_parser("simulate", help="run the simulation study")
    common(ps, need_input=False)
    inference_flags(ps, "trial,g,w,aug")
    ps.add_argument("--scenario", choices=sim.SCENARIO_LABELS, required=True)
    ps.add_argument("--runs", type=int, default=1000, metavar="N")
    ps.add_argument("--truth-draws", type=int, default=10**7, metavar="N")
    ps.set_defaults(func=cmd_simulate)

    pd = sub.add_parser("diagnose", help="weight and positivity diagnostics")
    common(pd, need_input=True)
    pd.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    needs_seed = args.command == "simulate" or (
        args.command == "analyze" and args.inference in ("boot", "both"))
    if needs_seed and args.seed is None:
        parser.error("--seed is required for simulate and for bootstrap inference")
    try:
        args.func(args)
    except ValidationError as err:
        print(f"error code={EXIT_VALIDATION} {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except EstimationError as err:
        print(f"error code={EXIT_ESTIMATION} {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_ESTIMATION
    except ValueError as err:
        print(f"error code={EXIT_VALIDATION} {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    return 0


if __name__ == "__main__":
    sys.exit(main())
