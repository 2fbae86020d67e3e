"""Target-population estimators for the partially nested design.

All estimators target ``E[Y^a | P = 0]``, the counterfactual mean in the
population underlying the part of the study where the trial is nested, and
divide by the number of ``p = 0`` rows.  Four nuisance regressions feed them:

* ``g_a(X)``  outcome mean among trial participants with ``A = a``
* ``p(X)``    probability of trial participation among sampled rows
* ``q(X)``    probability of being in the nested part among sampled rows
* ``e_a(X)``  probability of treatment ``a`` among trial participants

The weight ``I(S=1, A=a) q(X) / (p(X) e_a(X))`` uses the ratio ``q/p``; only
that ratio is identified under partial nesting, and it is estimated from two
separately fit logistic models on the same rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.special import expit

from . import glm
from .data import BINARY, PartialNestDataset, add_intercept
from .errors import (
    EstimationError,
    NoTargetRows,
    NoTrialRows,
    OneClassResponse,
    OnePartOnly,
    PositivityViolation,
)
from .glm import FittedModel

TRIAL_ONLY = "trial_only"
G_FORMULA = "g_formula"
WEIGHTING = "weighting"
AUGMENTED = "augmented"
ESTIMATOR_KINDS = (TRIAL_ONLY, G_FORMULA, WEIGHTING, AUGMENTED)
PROPOSED = (G_FORMULA, WEIGHTING, AUGMENTED)

TARGETS = ("psi0", "psi1", "ate")
ARMS = (0, 1)

POSITIVITY_FLOOR = 1e-6
RATIO_BAND = (0.8, 1.25)
LOW_PARTICIPATION = 0.01
PERCENTILES = (1, 5, 50, 95, 99)


@dataclass(frozen=True)
class ModelSpec:
    """Covariates used by each nuisance model.

    ``None`` means all covariates of the dataset, an empty tuple means an
    intercept-only model.  ``known_treatment_prob`` replaces the fitted
    treatment model by the design constant ``Pr[A = 1 | S = 1]``.
    ``normalized_weights`` switches the weighting and augmented estimators
    to divide by the weight total instead of the target-row count.
    """

    outcome: Sequence[str] | None = None
    participation: Sequence[str] | None = None
    part: Sequence[str] | None = None
    treatment: Sequence[str] | None = None
    known_treatment_prob: float | None = None
    normalized_weights: bool = False

    def __post_init__(self):
        for name in ("outcome", "participation", "part", "treatment"):
            cols = getattr(self, name)
            if cols is not None:
                object.__setattr__(self, name, tuple(cols))
        kp = self.known_treatment_prob
        if kp is not None and not 0.0 < kp < 1.0:
            raise ValueError("known_treatment_prob must lie in (0, 1)")


@dataclass(frozen=True)
class NuisanceSet:
    outcome_models: dict
    participation_model: FittedModel
    part_model: FittedModel | None
    treatment_model: FittedModel | None
    spec: ModelSpec = field(default_factory=ModelSpec)

    @property
    def models(self):
        """Fitted models by block name, in stacking order."""
        out = {f"outcome{a}": m for a, m in self.outcome_models.items()}
        out["participation"] = self.participation_model
        if self.part_model is not None:
            out["part"] = self.part_model
        if self.treatment_model is not None:
            out["treatment"] = self.treatment_model
        return out

    @property
    def converged(self) -> bool:
        return all(m.converged for m in self.models.values())


@dataclass(frozen=True)
class Predictions:
    """Nuisance predictions at every row of a dataset."""

    g: dict
    p: np.ndarray
    q: np.ndarray
    e1: np.ndarray

    def e(self, arm):
        return self.e1 if arm == 1 else 1.0 - self.e1


@dataclass(frozen=True)
class WeightDiagnostics:
    weight_sum_ratio: float
    min_participation_prob: float
    participation_prob_percentiles: dict
    part_exchangeability_stat: float | None
    part_exchangeability_pvalue: float | None
    flags: tuple = ()
    notes: tuple = ()


@dataclass(frozen=True)
class EstimateReport:
    estimator_kind: str
    psi0: float
    psi1: float
    ate: float
    se: dict = field(default_factory=dict)
    ci95: dict = field(default_factory=dict)
    diagnostics: WeightDiagnostics | None = None

    def __post_init__(self):
        if self.ate != self.psi1 - self.psi0:
            raise ValueError("ate must equal psi1 - psi0")

    @property
    def points(self):
        return {"psi0": self.psi0, "psi1": self.psi1, "ate": self.ate}


# -- fitting ---------------------------------------------------------------------------

def _annotate(name, err):
    err.nuisance = name
    err.args = (f"{name} model: {err.args[0] if err.args else ''}",)
    return err


def _fit_model(name, kind, features, response, description):
    fit = glm.fit_logistic if kind == glm.LOGISTIC else glm.fit_linear
    try:
        return fit(features, response, subset_description=description)
    except EstimationError as err:
        raise _annotate(name, err) from None


def model_features(data: PartialNestDataset, columns) -> np.ndarray:
    """Intercept-augmented design for every row of ``data``."""
    return add_intercept(data.columns(columns))


def outcome_link(data: PartialNestDataset) -> str:
    return glm.LOGISTIC if data.outcome_kind == BINARY else glm.LINEAR


def fit_nuisances(data: PartialNestDataset, spec: ModelSpec | None = None) -> NuisanceSet:
    """Fit the outcome, participation, part and treatment models.

    Outcome models are fit separately in each arm on ``{s=1, a=arm}``; the
    treatment model on ``{s=1}``; participation and part models on all rows.
    With no ``p = 1`` rows the design is fully nested and ``q`` is
    identically one (``part_model`` is ``None``).
    """
    spec = spec or ModelSpec()
    if data.n0 == 0:
        raise NoTargetRows("dataset has no p=0 rows; the target population is empty")
    trial = data.s == 1
    if not trial.any():
        raise NoTrialRows("dataset has no trial participants")
    y = np.nan_to_num(data.y)
    a = np.nan_to_num(data.a)

    # the treatment model goes first so that a one-arm trial is reported there
    treatment = None
    if spec.known_treatment_prob is None:
        Ze = model_features(data, spec.treatment)
        treatment = _fit_model("treatment", glm.LOGISTIC, Ze[trial], a[trial], "s=1, response a")

    Zg = model_features(data, spec.outcome)
    outcome_models = {}
    for arm in ARMS:
        rows = trial & (a == arm)
        if not rows.any():
            raise _annotate(f"outcome{arm}",
                            OneClassResponse(f"no trial participants with a={arm}"))
        outcome_models[arm] = _fit_model(f"outcome{arm}", outcome_link(data), Zg[rows], y[rows],
                                         f"s=1, a={arm}")

    Zp = model_features(data, spec.participation)
    participation = _fit_model("participation", glm.LOGISTIC, Zp, data.s.astype(float),
                               "all rows, response s")

    part = None
    if data.n1 > 0:
        Zq = model_features(data, spec.part)
        part = _fit_model("part", glm.LOGISTIC, Zq, (data.p == 0).astype(float),
                          "all rows, response 1{p=0}")

    return NuisanceSet(outcome_models, participation, part, treatment, spec)


def predict_nuisances(data: PartialNestDataset, nuisances: NuisanceSet) -> Predictions:
    spec = nuisances.spec
    Zg = model_features(data, spec.outcome)
    g = {arm: m.predict(Zg) for arm, m in nuisances.outcome_models.items()}
    p = nuisances.participation_model.predict(model_features(data, spec.participation))
    if nuisances.part_model is None:
        q = np.ones(data.n)
    else:
        q = nuisances.part_model.predict(model_features(data, spec.part))
    if nuisances.treatment_model is None:
        e1 = np.full(data.n, spec.known_treatment_prob)
    else:
        e1 = nuisances.treatment_model.predict(model_features(data, spec.treatment))
    return Predictions(g, p, q, e1)


# -- arithmetic shared by point estimates and the bootstrap -------------------------------
#
# Arrays are either (n,) or batched (B, n); ``counts`` are bootstrap frequency
# weights and default to one per row.

def weights_from(arm, s, a, p_hat, q_hat, e_arm):
    ind = (s == 1) & (a == arm)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = q_hat / (p_hat * e_arm)
    return np.where(ind, w, 0.0)


def psi_from(kind, *, target, trial, w, y, g, counts=1.0, normalized=False):
    """Estimator value(s) for one arm from row-level ingredients."""
    if kind == TRIAL_ONLY:
        return np.sum(counts * trial * g, axis=-1) / np.sum(counts * trial, axis=-1)
    n_target = np.sum(counts * target, axis=-1)
    if kind == G_FORMULA:
        return np.sum(counts * target * g, axis=-1) / n_target
    denom = np.sum(counts * w, axis=-1) if normalized else n_target
    if kind == WEIGHTING:
        return np.sum(counts * w * y, axis=-1) / denom
    if kind == AUGMENTED:
        return (np.sum(counts * target * g, axis=-1) / n_target
                + np.sum(counts * w * (y - g), axis=-1) / denom)
    raise ValueError(f"unknown estimator kind {kind!r}")


def _check_positivity(data, pred, arm):
    trial = data.s == 1
    low = trial & (pred.p < POSITIVITY_FLOOR)
    if low.any():
        i = int(np.flatnonzero(low)[0])
        raise PositivityViolation(
            f"estimated participation probability {pred.p[i]:.3g} < {POSITIVITY_FLOOR} "
            f"at trial row {i} ({int(low.sum())} rows below the floor)"
        )
    e = pred.e(arm)
    low = trial & (e < POSITIVITY_FLOOR)
    if low.any():
        raise PositivityViolation(
            f"estimated probability of treatment {arm} below {POSITIVITY_FLOOR} "
            f"for {int(low.sum())} trial rows"
        )


def compute_weights(data, nuisances, a, predictions=None) -> np.ndarray:
    """Per-row weights ``I(S=1, A=a) q(X) / (p(X) e_a(X))``; zero off ``{s=1, a}``."""
    pred = predictions or predict_nuisances(data, nuisances)
    _check_positivity(data, pred, a)
    return weights_from(a, data.s, np.nan_to_num(data.a, nan=-1), pred.p, pred.q, pred.e(a))


def _ingredients(data, nuisances, a, need_weights, predictions=None):
    target = (data.p == 0).astype(float)
    trial = (data.s == 1).astype(float)
    if target.sum() == 0:
        raise NoTargetRows("no p=0 rows")
    pred = predictions or predict_nuisances(data, nuisances)
    w = compute_weights(data, nuisances, a, pred) if need_weights else None
    return dict(target=target, trial=trial, w=w, y=np.nan_to_num(data.y), g=pred.g[a])


def estimate_g_formula(data, nuisances, a, predictions=None) -> float:
    """Mean of the arm-``a`` outcome predictions over all ``p = 0`` rows."""
    ing = _ingredients(data, nuisances, a, False, predictions)
    return float(psi_from(G_FORMULA, **ing))


def estimate_weighting(data, nuisances, a, predictions=None) -> float:
    ing = _ingredients(data, nuisances, a, True, predictions)
    return float(psi_from(WEIGHTING, normalized=nuisances.spec.normalized_weights, **ing))


def estimate_augmented(data, nuisances, a, predictions=None) -> float:
    ing = _ingredients(data, nuisances, a, True, predictions)
    return float(psi_from(AUGMENTED, normalized=nuisances.spec.normalized_weights, **ing))


def estimate_trial_only(data, nuisances, a, predictions=None) -> float:
    """Mean of the arm-``a`` outcome predictions over trial participants (both parts)."""
    if not np.any(data.s == 1):
        raise NoTrialRows("no s=1 rows")
    pred = predictions or predict_nuisances(data, nuisances)
    trial = (data.s == 1).astype(float)
    return float(psi_from(TRIAL_ONLY, target=None, trial=trial, w=None, y=None, g=pred.g[a]))


_ESTIMATORS = {
    TRIAL_ONLY: estimate_trial_only,
    G_FORMULA: estimate_g_formula,
    WEIGHTING: estimate_weighting,
    AUGMENTED: estimate_augmented,
}


def estimate(data, nuisances, kind, predictions=None):
    """``(psi0, psi1, ate)`` for one estimator."""
    pred = predictions or predict_nuisances(data, nuisances)
    fn = _ESTIMATORS[kind]
    psi0 = fn(data, nuisances, 0, pred)
    psi1 = fn(data, nuisances, 1, pred)
    return psi0, psi1, psi1 - psi0


# -- diagnostics ------------------------------------------------------------------------

def part_exchangeability_test(data: PartialNestDataset, spec: ModelSpec | None = None):
    """Wald test for a part effect in the trial outcome regressions.

    In each arm the outcome model is refit on trial rows with an added
    indicator for ``p = 1``.  The squared z-statistics of the two indicator
    coefficients are summed into a chi-square statistic with two degrees of
    freedom.  Under exchangeability between the two parts of the trial the
    coefficients are zero.

    Returns
    -------
    statistic, p_value : float
    """
    spec = spec or ModelSpec()
    trial = data.s == 1
    if not (np.any(trial & (data.p == 0)) and np.any(trial & (data.p == 1))):
        raise OnePartOnly("part exchangeability needs trial rows in both parts")
    Z = np.column_stack([model_features(data, spec.outcome), (data.p == 1).astype(float)])
    y = np.nan_to_num(data.y)
    a = np.nan_to_num(data.a, nan=-1)
    stat = 0.0
    for arm in ARMS:
        rows = trial & (a == arm)
        parts = data.p[rows]
        if not (np.any(parts == 0) and np.any(parts == 1)):
            raise OnePartOnly(f"arm {arm} has trial rows in only one part")
        model = _fit_model(f"part-exchangeability{arm}", outcome_link(data), Z[rows], y[rows],
                           f"s=1, a={arm}, with part indicator")
        cov = np.linalg.inv(model.information(Z[rows])) * model.dispersion
        z = model.coefficients[-1] / np.sqrt(cov[-1, -1])
        stat += float(z * z)
    return stat, float(stats.chi2.sf(stat, df=len(ARMS)))


def weight_diagnostic(data, nuisances, predictions=None) -> WeightDiagnostics:
    """Compare the weight total with the target-row count, and summarize ``p(X)``.

    ``weight_sum_ratio`` is ``sum_{s=1} q/p`` over ``sum 1{p=0}``; values far
    from one point at near-positivity violations or misspecified weight
    models.  Participation-probability summaries are over the ``p = 0`` rows,
    the population in which positivity is required.
    """
    pred = predictions or predict_nuisances(data, nuisances)
    trial = data.s == 1
    target = data.p == 0
    ratio = float(np.sum(pred.q[trial] / pred.p[trial]) / np.sum(target))
    p_target = pred.p[target] if target.any() else pred.p
    pct = {k: float(v) for k, v in zip(PERCENTILES, np.percentile(p_target, PERCENTILES))}

    flags, notes = [], []
    if not RATIO_BAND[0] <= ratio <= RATIO_BAND[1]:
        flags.append("weight_sum_ratio_out_of_band")
    if pct[1] < LOW_PARTICIPATION:
        flags.append("low_participation_probability")
    try:
        stat, pval = part_exchangeability_test(data, nuisances.spec)
    except OnePartOnly as err:
        stat = pval = None
        notes.append(f"part exchangeability test not applicable: {err}")
    return WeightDiagnostics(ratio, float(p_target.min()), pct, stat, pval,
                             tuple(flags), tuple(notes))


# -- batched refits for the bootstrap ---------------------------------------------------

def fit_predict_batch(data: PartialNestDataset, spec: ModelSpec, counts, start=None):
    """Refit every nuisance under each row of ``counts`` and predict at all rows.

    ``start`` is an optional full-data :class:`NuisanceSet` whose
    coefficients seed the iterations.  Returns ``(pred, ok)`` where ``pred``
    holds ``(B, n)`` arrays and ``ok`` marks replicates in which every model
    fit and positivity held.
    """
    C = np.asarray(counts, dtype=float)
    B = C.shape[0]
    trial = data.s == 1
    a = np.nan_to_num(data.a, nan=-1)
    y = np.nan_to_num(data.y)
    ok = np.ones(B, dtype=bool)

    models = start.models if start is not None else {}

    def logistic(name, Z, resp, mask):
        init = models[name].coefficients if name in models else None
        coef, good = glm.fit_logistic_batch(Z, resp, C * mask, start=init)
        return expit(coef @ Z.T), good

    Zg = model_features(data, spec.outcome)
    g = {}
    for arm in ARMS:
        mask = trial & (a == arm)
        if outcome_link(data) == glm.LOGISTIC:
            g[arm], good = logistic(f"outcome{arm}", Zg, y, mask)
        else:
            coef, good = glm.fit_linear_batch(Zg, y, C * mask)
            g[arm] = coef @ Zg.T
        ok &= good

    p_hat, good = logistic("participation", model_features(data, spec.participation), data.s.astype(float), 1.0)
    ok &= good
    if data.n1 > 0:
        q_hat, good = logistic("part", model_features(data, spec.part), (data.p == 0).astype(float), 1.0)
        ok &= good
    else:
        q_hat = np.ones((B, data.n))
    if spec.known_treatment_prob is None:
        e1, good = logistic("treatment", model_features(data, spec.treatment), np.where(trial, a, 0.0), trial)
        ok &= good
    else:
        e1 = np.full((B, data.n), spec.known_treatment_prob)

    drawn_trial = (C > 0) & trial
    with np.errstate(invalid="ignore"):
        ok &= ~np.any(drawn_trial & ((p_hat < POSITIVITY_FLOOR)
                                      | (e1 < POSITIVITY_FLOOR)
                                      | (1.0 - e1 < POSITIVITY_FLOOR)), axis=1)
    ok &= (C @ (data.p == 0)) > 0
    return Predictions(g, p_hat, q_hat, e1), ok


def estimate_batch(data, spec, pred, counts, kind):
    """``(B, 3)`` array of ``(psi0, psi1, ate)`` per replicate."""
    target = (data.p == 0).astype(float)
    trial = (data.s == 1).astype(float)
    a = np.nan_to_num(data.a, nan=-1)
    y = np.nan_to_num(data.y)
    out = []
    for arm in ARMS:
        w = weights_from(arm, data.s, a, pred.p, pred.q, pred.e(arm))
        out.append(psi_from(kind, target=target, trial=trial, w=w, y=y, g=pred.g[arm],
                            counts=counts, normalized=spec.normalized_weights))
    psi0, psi1 = out
    return np.column_stack([psi0, psi1, psi1 - psi0])
