"""Monte Carlo study of the estimators under partial nesting.

A fully nested cohort of ``n_total`` trial-eligible individuals is simulated
first (three standard-normal covariates, logistic trial participation, a
part indicator independent of everything, 1:1 randomization and logistic or
linear potential outcomes).  Dropping the non-randomized individuals of the
``p = 1`` part turns it into a partially nested dataset.

Random streams are keyed by ``(seed, run, purpose)`` through
:class:`numpy.random.SeedSequence`, so a run's data and bootstrap draws do not
depend on which other runs are executed or in what order.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import estimators as est
from . import inference as inf
from .data import BINARY, CONTINUOUS, PartialNestDataset
from .errors import EstimationError, TooManyFailedRuns

log = logging.getLogger(__name__)

SELECTION_BETA = (-0.471, 0.5, 0.5, 0.5)
ZETA0 = (0.5, 0.5, 0.5, 0.5)
ZETA1 = {
    "no_em": (1.0, 0.5, 0.5, 0.5),
    "moderate_em": (1.0, 0.0, 0.5, 0.5),
    "strong_em": (1.0, 0.0, 0.0, 0.5),
}
SCENARIO_LABELS = tuple(ZETA1)
COVARIATES = ("x1", "x2", "x3")

# purpose tags for seed keys
_DATA, _BOOT = 0, 1

MAX_FAILED_RUNS = 0.02
TRUTH_SEED = 20240101


@dataclass(frozen=True)
class Scenario:
    label: str
    outcome_kind: str = BINARY
    n_total: int = 750
    selection_beta: tuple = SELECTION_BETA
    part_prob: float = 0.5
    treat_prob: float = 0.5
    zeta0: tuple = ZETA0
    zeta1: tuple = ZETA1["no_em"]

    def __post_init__(self):
        for name in ("selection_beta", "zeta0", "zeta1"):
            vec = tuple(float(v) for v in getattr(self, name))
            if len(vec) != 4:
                raise ValueError(f"{name} must have 4 entries (intercept + 3 covariates)")
            object.__setattr__(self, name, vec)
        for name in ("part_prob", "treat_prob"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.outcome_kind not in (BINARY, CONTINUOUS):
            raise ValueError(f"unknown outcome kind {self.outcome_kind!r}")

    @property
    def scale(self) -> float:
        return math.sqrt(self.n_total)


def scenario(label: str, outcome_kind: str = BINARY, **overrides) -> Scenario:
    """One of the three effect-modification scenarios (``no_em``, ``moderate_em``, ``strong_em``)."""
    if label not in ZETA1:
        raise ValueError(f"unknown scenario {label!r}; choose from {SCENARIO_LABELS}")
    overrides.setdefault("zeta1", ZETA1[label])
    return Scenario(label=label, outcome_kind=outcome_kind, **overrides)


@dataclass(frozen=True)
class FullCohort:
    """Fully nested cohort with both potential outcomes retained."""

    X: np.ndarray
    S: np.ndarray
    P: np.ndarray
    A: np.ndarray
    Y0: np.ndarray
    Y1: np.ndarray
    outcome_kind: str

    @property
    def Y(self):
        return np.where(self.A == 1, self.Y1, self.Y0)


def _design(X):
    return np.column_stack([np.ones(X.shape[0]), X])


def conditional_mean(sc: Scenario, zeta, X):
    eta = _design(X) @ np.asarray(zeta)
    return expit(eta) if sc.outcome_kind == BINARY else eta


def generate_full_nested(sc: Scenario, rng: np.random.Generator, n=None) -> FullCohort:
    n = sc.n_total if n is None else n
    X = rng.standard_normal((n, 3))
    S = (rng.random(n) < expit(_design(X) @ np.asarray(sc.selection_beta))).astype(int)
    P = (rng.random(n) < sc.part_prob).astype(int)
    # treatment drawn for everyone, used only where S = 1
    A = np.where(S == 1, (rng.random(n) < sc.treat_prob).astype(int), 0)
    if sc.outcome_kind == BINARY:
        Y0 = (rng.random(n) < conditional_mean(sc, sc.zeta0, X)).astype(float)
        Y1 = (rng.random(n) < conditional_mean(sc, sc.zeta1, X)).astype(float)
    else:
        Y0 = conditional_mean(sc, sc.zeta0, X) + rng.standard_normal(n)
        Y1 = conditional_mean(sc, sc.zeta1, X) + rng.standard_normal(n)
    return FullCohort(X, S, P, A, Y0, Y1, sc.outcome_kind)


def induce_partial_nesting(cohort: FullCohort) -> PartialNestDataset:
    """Drop ``S = 0, P = 1`` rows and blank treatment/outcome where ``S = 0``."""
    keep = ~((cohort.S == 0) & (cohort.P == 1))
    S = cohort.S[keep]
    A = np.where(S == 1, cohort.A[keep], np.nan)
    Y = np.where(S == 1, cohort.Y[keep], np.nan)
    return PartialNestDataset(cohort.X[keep], cohort.P[keep], S, A, Y,
                              COVARIATES, cohort.outcome_kind)


def monte_carlo_truth(sc: Scenario, N: int = 10**7, rng=None, chunk: int = 10**6):
    """``(psi0, psi1, ate)`` in the ``P = 0`` population by simulation.

    Draws ``N`` cohort members and averages the conditional means
    ``E[Y^a | X]`` over those with ``P = 0``.  Because ``P`` is generated
    independently of ``X``, this also equals the overall ``E[Y^a]``; the
    average is nonetheless taken over ``P = 0`` members only.
    """
    if N < 10**6:
        raise ValueError("Monte Carlo truth needs N >= 1e6")
    rng = rng if rng is not None else np.random.default_rng(TRUTH_SEED)
    tot = np.zeros(2)
    count = 0
    done = 0
    while done < N:
        m = min(chunk, N - done)
        X = rng.standard_normal((m, 3))
        P = rng.random(m) < sc.part_prob
        Xt = X[~P]
        tot += [conditional_mean(sc, sc.zeta0, Xt).sum(), conditional_mean(sc, sc.zeta1, Xt).sum()]
        count += Xt.shape[0]
        done += m
    psi0, psi1 = tot / count
    return float(psi0), float(psi1), float(psi1 - psi0)


def quadrature_truth(sc: Scenario, degree: int = 80):
    """Gauss-Hermite value of ``E[Y^a]`` for standard-normal covariates.

    ``zeta . (1, X)`` is normal with mean ``zeta_0`` and variance
    ``|zeta_{1:}|^2``, so each expectation is one-dimensional.
    """
    nodes, wts = np.polynomial.hermite_e.hermegauss(degree)
    wts = wts / wts.sum()

    def mean(zeta):
        zeta = np.asarray(zeta)
        sd = np.linalg.norm(zeta[1:])
        eta = zeta[0] + sd * nodes
        vals = expit(eta) if sc.outcome_kind == BINARY else eta
        return float(wts @ vals)

    psi0, psi1 = mean(sc.zeta0), mean(sc.zeta1)
    return psi0, psi1, psi1 - psi0


@lru_cache(maxsize=32)
def _cached_truth(sc: Scenario, N: int, seed: int):
    return monte_carlo_truth(sc, N, np.random.default_rng(seed))


# -- replications -----------------------------------------------------------------------

def _run_key(seed, run, purpose):
    return np.random.SeedSequence(seed, spawn_key=(run, purpose))


@dataclass
class RunRecord:
    estimates: dict                       # kind -> (3,) array
    sandwich_se: dict = field(default_factory=dict)
    bootstrap_se: dict = field(default_factory=dict)
    n: int = 0


def run_once(sc: Scenario, run: int, seed: int, kinds=est.ESTIMATOR_KINDS, *, spec=None,
             sandwich=True, bootstrap_B=0, stratified=False) -> RunRecord:
    """Generate, induce partial nesting, estimate and (optionally) compute SEs for one run."""
    spec = spec or est.ModelSpec()
    rng = np.random.default_rng(_run_key(seed, run, _DATA))
    data = induce_partial_nesting(generate_full_nested(sc, rng))
    nuis = est.fit_nuisances(data, spec)
    pred = est.predict_nuisances(data, nuis)
    rec = RunRecord({k: np.array(est.estimate(data, nuis, k, pred)) for k in kinds}, n=data.n)
    if sandwich:
        for k in kinds:
            res = inf.sandwich_se(inf.build_stack(data, nuis, k))
            rec.sandwich_se[k] = np.array([res[t].se for t in est.TARGETS])
    if bootstrap_B:
        boot = inf.bootstrap(data, kinds, bootstrap_B, _run_key(seed, run, _BOOT), spec,
                             stratified=stratified, nuisances=nuis)
        for k in kinds:
            rec.bootstrap_se[k] = np.array([boot.intervals[k][t].se for t in est.TARGETS])
    return rec


@dataclass
class Cell:
    scenario: str
    estimand: str
    estimator: str
    scaled_bias: float
    scaled_sd: float
    coverage_sandwich: float
    coverage_bootstrap: float
    mean_estimate: float
    truth: float


@dataclass
class SimulationReport:
    scenario: Scenario
    runs: int
    bootstrap_B: int
    seed: int
    truth: tuple
    kinds: tuple
    estimates: dict                 # kind -> (runs_ok, 3)
    sandwich_se: dict
    bootstrap_se: dict
    n_failed: int = 0
    cells: list = field(default_factory=list)

    def cell(self, estimator, estimand) -> Cell:
        for c in self.cells:
            if c.estimator == estimator and c.estimand == estimand:
                return c
        raise KeyError((estimator, estimand))

    def to_csv(self, path):
        write_cells_csv(self.cells, path)

    def to_text(self) -> str:
        return format_tables([self])


def _aggregate(rep: SimulationReport):
    scale = rep.scenario.scale
    cells = []
    for kind in rep.kinds:
        est_k = rep.estimates[kind]
        for j, target in enumerate(est.TARGETS):
            truth = rep.truth[j]
            col = est_k[:, j]
            bias = scale * float(np.mean(col - truth))
            sd = scale * float(np.std(col, ddof=1)) if col.size > 1 else float("nan")
            cov = {}
            for name, ses in (("sandwich", rep.sandwich_se), ("bootstrap", rep.bootstrap_se)):
                if kind in ses:
                    half = inf.Z95 * ses[kind][:, j]
                    cov[name] = float(np.mean((col - half <= truth) & (truth <= col + half)))
                else:
                    cov[name] = float("nan")
            cells.append(Cell(rep.scenario.label, target, kind, bias, sd, cov["sandwich"],
                              cov["bootstrap"], float(np.mean(col)), truth))
    rep.cells = cells


def run_replications(sc: Scenario, runs: int, bootstrap_B: int = 0, seed: int = 1, *,
                     kinds=est.ESTIMATOR_KINDS, spec=None, sandwich=True, stratified=False,
                     truth=None, truth_N: int = 10**7, threads: int = 1,
                     progress=None) -> SimulationReport:
    """Repeat the study ``runs`` times and summarize bias, SD and coverage.

    Bias and SD are multiplied by ``sqrt(n_total)``.  Coverage uses normal
    95% intervals from the sandwich and (when ``bootstrap_B > 0``) the
    bootstrap.  Runs whose estimation fails are excluded and counted; more
    than 2% failures raises :class:`TooManyFailedRuns`.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    kinds = tuple(kinds)
    if truth is None:
        truth = _cached_truth(sc, truth_N, TRUTH_SEED)

    def one(r):
        try:
            return run_once(sc, r, seed, kinds, spec=spec, sandwich=sandwich,
                            bootstrap_B=bootstrap_B, stratified=stratified)
        except EstimationError as err:
            log.warning("run %d failed: %s", r, err)
            return err

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(one, range(runs)))
    else:
        records = []
        for r in range(runs):
            records.append(one(r))
            if progress is not None:
                progress(r + 1, runs)

    good = [rec for rec in records if isinstance(rec, RunRecord)]
    n_failed = runs - len(good)
    if n_failed > MAX_FAILED_RUNS * runs:
        raise TooManyFailedRuns(n_failed, runs)
    if n_failed:
        warnings.warn(f"{n_failed} of {runs} runs failed and were excluded", RuntimeWarning)

    def stack(attr):
        out = {}
        for k in kinds:
            rows = [getattr(rec, attr)[k] for rec in good if k in getattr(rec, attr)]
            if rows:
                out[k] = np.vstack(rows)
        return out

    rep = SimulationReport(sc, runs, bootstrap_B, seed, tuple(truth), kinds,
                           stack("estimates"), stack("sandwich_se"), stack("bootstrap_se"),
                           n_failed)
    _aggregate(rep)
    return rep


# -- output ------------------------------------------------------------------------------

CELL_FIELDS = ("scenario", "estimand", "estimator", "scaled_bias", "scaled_sd",
               "coverage_sandwich", "coverage_bootstrap", "mean_estimate", "truth")


def write_cells_csv(cells, path):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CELL_FIELDS)
        for c in cells:
            writer.writerow([getattr(c, f) if isinstance(getattr(c, f), str)
                             else repr(float(getattr(c, f))) for f in CELL_FIELDS])


ESTIMAND_LABELS = {"psi0": "E[Y^0|P=0]", "psi1": "E[Y^1|P=0]", "ate": "ATE"}
SHORT = {est.TRIAL_ONLY: "Trial", est.G_FORMULA: "psi_g", est.WEIGHTING: "psi_w",
         est.AUGMENTED: "psi_aug"}


def _fmt(v):
    return "   -  " if v is None or not np.isfinite(v) else f"{v:6.3f}"


def format_tables(reports) -> str:
    """Aligned text mirroring the scaled-bias, scaled-SD and coverage tables."""
    lines = []

    def table(title, value, kinds):
        lines.append(title)
        head = f"{'Scenario':<12} {'Estimand':<11} " + " ".join(f"{SHORT[k]:>8}" for k in kinds)
        lines.append(head)
        lines.append("-" * len(head))
        for rep in reports:
            for i, t in enumerate(est.TARGETS):
                label = rep.scenario.label if i == 0 else ""
                vals = " ".join(f"{_fmt(value(rep.cell(k, t))):>8}" for k in kinds)
                lines.append(f"{label:<12} {ESTIMAND_LABELS[t]:<11} {vals}")
        lines.append("")

    kinds_all = [k for k in est.ESTIMATOR_KINDS if k in reports[0].kinds]
    proposed = [k for k in est.PROPOSED if k in reports[0].kinds]
    scale = reports[0].scenario.scale
    table(f"Scaled bias (x sqrt({reports[0].scenario.n_total}) = {scale:.2f})",
          lambda c: c.scaled_bias, kinds_all)
    table("Scaled standard deviation", lambda c: c.scaled_sd, kinds_all)
    table("Coverage, sandwich", lambda c: c.coverage_sandwich, proposed)
    table("Coverage, bootstrap", lambda c: c.coverage_bootstrap, proposed)
    meta = ", ".join(f"{r.scenario.label}: runs={r.runs} failed={r.n_failed} B={r.bootstrap_B} "
                     f"seed={r.seed}" for r in reports)
    lines.append(meta)
    return "\n".join(lines) + "\n"


def with_selection_slopes(sc: Scenario, factor: float) -> Scenario:
    """Scenario with the covariate slopes of trial participation multiplied by ``factor``."""
    b = sc.selection_beta
    return replace(sc, selection_beta=(b[0], *(factor * v for v in b[1:])))
