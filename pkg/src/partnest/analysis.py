"""End-to-end analysis of one dataset: point estimates, SEs and diagnostics."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import estimators as est
from . import inference as inf
from .estimators import EstimateReport, ModelSpec

SHORT_NAMES = {"trial": est.TRIAL_ONLY, "g": est.G_FORMULA, "w": est.WEIGHTING,
               "aug": est.AUGMENTED}
METHODS = ("sandwich", "bootstrap")


def analyze(data, kinds=est.PROPOSED, *, spec: ModelSpec | None = None,
            methods=METHODS, B=1000, seed=None, stratified=False, threads=1):
    """Estimate, attach standard errors and diagnostics for each estimator kind.

    Returns a list of :class:`EstimateReport` in the order of ``kinds``.
    ``se`` and ``ci95`` are keyed by inference method (``"sandwich"``,
    ``"bootstrap"``, ``"bootstrap_percentile"``) then by target.
    """
    spec = spec or ModelSpec()
    kinds = tuple(kinds)
    if "bootstrap" in methods and seed is None:
        raise ValueError("a seed is required for the bootstrap")
    nuis = est.fit_nuisances(data, spec)
    pred = est.predict_nuisances(data, nuis)
    diagnostics = est.weight_diagnostic(data, nuis, pred)

    boot = None
    if "bootstrap" in methods:
        boot = inf.bootstrap(data, kinds, B, seed, spec, stratified=stratified,
                             threads=threads, nuisances=nuis)

    reports = []
    for kind in kinds:
        psi0, psi1, ate = est.estimate(data, nuis, kind, pred)
        se, ci = {}, {}
        if "sandwich" in methods:
            res = inf.sandwich_se(inf.build_stack(data, nuis, kind))
            se["sandwich"] = {t: res[t].se for t in est.TARGETS}
            ci["sandwich"] = {t: (res[t].lower, res[t].upper) for t in est.TARGETS}
        if boot is not None:
            for label, table in (("bootstrap", boot.intervals[kind]),
                                 ("bootstrap_percentile", boot.percentile[kind])):
                se[label] = {t: table[t].se for t in est.TARGETS}
                ci[label] = {t: (table[t].lower, table[t].upper) for t in est.TARGETS}
        reports.append(EstimateReport(kind, psi0, psi1, ate, se, ci, diagnostics))
    return reports


# -- output --------------------------------------------------------------------------

REPORT_FIELDS = ("estimator", "estimand", "estimate", "method", "se", "ci_lower", "ci_upper")


def report_rows(reports):
    for r in reports:
        for t in est.TARGETS:
            point = r.points[t]
            if not r.se:
                yield (r.estimator_kind, t, point, "", "", "", "")
            for method in r.se:
                lo, hi = r.ci95[method][t]
                yield (r.estimator_kind, t, point, method, r.se[method][t], lo, hi)


def write_report_csv(reports, path):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_FIELDS)
        for row in report_rows(reports):
            w.writerow([v if isinstance(v, str) else repr(float(v)) for v in row])


def format_report(reports) -> str:
    lines = [f"{'estimator':<11} {'estimand':<8} {'estimate':>10} {'method':<21} "
             f"{'se':>9} {'95% CI':>23}"]
    for row in report_rows(reports):
        kind, t, point, method, se, lo, hi = row
        if method:
            lines.append(f"{kind:<11} {t:<8} {point:10.5f} {method:<21} {se:9.5f} "
                         f"[{lo:9.5f}, {hi:9.5f}]")
        else:
            lines.append(f"{kind:<11} {t:<8} {point:10.5f}")
    return "\n".join(lines) + "\n"


def diagnostics_rows(diag):
    yield ("weight_sum_ratio", diag.weight_sum_ratio)
    yield ("min_participation_prob", diag.min_participation_prob)
    for k, v in diag.participation_prob_percentiles.items():
        yield (f"participation_prob_p{k}", v)
    if diag.part_exchangeability_stat is None:
        yield ("part_exchangeability_stat", "not applicable")
        yield ("part_exchangeability_pvalue", "not applicable")
    else:
        yield ("part_exchangeability_stat", diag.part_exchangeability_stat)
        yield ("part_exchangeability_pvalue", diag.part_exchangeability_pvalue)
    yield ("flags", ";".join(diag.flags))


def write_diagnostics_csv(diag, path):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("quantity", "value"))
        for k, v in diagnostics_rows(diag):
            w.writerow((k, v if isinstance(v, str) else repr(float(v))))


def format_diagnostics(diag) -> str:
    lines = []
    for k, v in diagnostics_rows(diag):
        shown = v if isinstance(v, str) else f"{v:.6g}"
        lines.append(f"{k:<30} {shown}")
    for note in diag.notes:
        lines.append(f"note: {note}")
    if diag.flags:
        lines.append("FLAGGED: " + ", ".join(diag.flags))
    else:
        lines.append("no flags")
    return "\n".join(lines) + "\n"


def parse_estimators(text):
    names = [t.strip() for t in text.split(",") if t.strip()]
    bad = [t for t in names if t not in SHORT_NAMES]
    if bad or not names:
        raise ValueError(f"unknown estimator(s) {bad}; choose from {sorted(SHORT_NAMES)}")
    return tuple(SHORT_NAMES[t] for t in names)


def points_table(reports):
    """``{kind: array([psi0, psi1, ate])}`` convenience view."""
    return {r.estimator_kind: np.array([r.psi0, r.psi1, r.ate]) for r in reports}
