"""Generalizability analyses for partially nested randomized trials.

Estimates ``E[Y^a | P = 0]`` and the average treatment effect in the
population underlying the part of a study where the trial is nested in a
cohort of trial-eligible individuals, using trial data from both parts.
"""

from .analysis import analyze
from .data import Observation, PartialNestDataset, design_matrix, parse_csv, write_csv
from .estimators import (
    EstimateReport,
    ModelSpec,
    NuisanceSet,
    WeightDiagnostics,
    compute_weights,
    estimate,
    estimate_augmented,
    estimate_g_formula,
    estimate_trial_only,
    estimate_weighting,
    fit_nuisances,
    part_exchangeability_test,
    weight_diagnostic,
)
from .glm import FittedModel, fit_linear, fit_logistic, predict
from .inference import IntervalEstimate, StackedSystem, bootstrap, build_stack, sandwich_se

__version__ = "0.1.0"
