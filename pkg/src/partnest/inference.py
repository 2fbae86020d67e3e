"""Standard errors: stacked estimating equations (sandwich) and the bootstrap."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit

from . import estimators as est
from . import glm
from .errors import SingularBread, StackInconsistent, TooManyFailedReplicates

Z95 = 1.959963984540054
STACK_TOL = 1e-6
MAX_FAILED_FRACTION = 0.05

SANDWICH = "sandwich"
BOOTSTRAP_NORMAL = "bootstrap_normal"
BOOTSTRAP_PERCENTILE = "bootstrap_percentile"


@dataclass(frozen=True)
class IntervalEstimate:
    point: float
    se: float
    lower: float
    upper: float
    method: str

    @classmethod
    def normal(cls, point, se, method):
        return cls(float(point), float(se), float(point - Z95 * se), float(point + Z95 * se),
                   method)

    def covers(self, value) -> bool:
        return self.lower <= value <= self.upper


@dataclass
class StackedSystem:
    """Stacked estimating equations evaluated at a parameter vector.

    ``estimating_function(theta)`` returns the ``(n, len(theta))`` matrix of
    per-observation contributions.  ``blocks`` maps block names to slices of
    ``theta``; ``targets`` names the scalar parameters reported by the
    sandwich (by default every length-one block).
    """

    theta: np.ndarray
    estimating_function: Callable[[np.ndarray], np.ndarray]
    blocks: dict
    targets: tuple = ()

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if not self.targets:
            self.targets = tuple(k for k, sl in self.blocks.items() if sl.stop - sl.start == 1)

    @property
    def dim(self):
        return self.theta.size

    def contributions(self, theta=None):
        return self.estimating_function(self.theta if theta is None else theta)

    def residual_mean(self, theta=None):
        return self.contributions(theta).mean(axis=0)


# -- stack construction ------------------------------------------------------------------

@dataclass
class _ModelBlock:
    name: str
    link: str
    Z: np.ndarray
    response: np.ndarray
    mask: np.ndarray

    def mean(self, beta):
        eta = self.Z @ beta
        return expit(eta) if self.link == glm.LOGISTIC else eta

    def score(self, beta):
        return ((self.mask * (self.response - self.mean(beta)))[:, None]) * self.Z


def _blocks_for(kind, nuisances):
    names = []
    if kind in (est.TRIAL_ONLY, est.G_FORMULA, est.AUGMENTED):
        names += ["outcome0", "outcome1"]
    if kind in (est.WEIGHTING, est.AUGMENTED):
        names.append("participation")
        if nuisances.part_model is not None:
            names.append("part")
        if nuisances.treatment_model is not None:
            names.append("treatment")
    return names


def build_stack(data, nuisances, estimator_kind) -> StackedSystem:
    """Stack nuisance score equations with the estimator's defining equations.

    The parameter vector is laid out as the coefficients of each nuisance
    model the estimator uses, then (for normalized weights) the weight-mass
    ratios ``kappa0``, ``kappa1``, then ``psi0``, ``psi1`` and ``ate``.  The
    plug-in estimates solve the empirical system; if they do not (to
    ``1e-6`` in max-norm) or any nuisance fit did not converge,
    :class:`StackInconsistent` is raised.
    """
    kind = estimator_kind
    spec = nuisances.spec
    unconverged = [name for name, m in nuisances.models.items() if not m.converged]
    if unconverged:
        raise StackInconsistent(f"nuisance models did not converge: {', '.join(unconverged)}")

    n = data.n
    s = data.s.astype(float)
    a = np.nan_to_num(data.a, nan=-1)
    y = np.nan_to_num(data.y)
    target = (data.p == 0).astype(float)
    trial = data.s == 1
    normalized = spec.normalized_weights and kind in (est.WEIGHTING, est.AUGMENTED)

    models = nuisances.models
    block_defs = {
        "outcome0": lambda: _ModelBlock("outcome0", est.outcome_link(data),
                                        est.model_features(data, spec.outcome), y,
                                        (trial & (a == 0)).astype(float)),
        "outcome1": lambda: _ModelBlock("outcome1", est.outcome_link(data),
                                        est.model_features(data, spec.outcome), y,
                                        (trial & (a == 1)).astype(float)),
        "participation": lambda: _ModelBlock("participation", glm.LOGISTIC,
                                             est.model_features(data, spec.participation), s,
                                             np.ones(n)),
        "part": lambda: _ModelBlock("part", glm.LOGISTIC, est.model_features(data, spec.part),
                                    target, np.ones(n)),
        "treatment": lambda: _ModelBlock("treatment", glm.LOGISTIC,
                                         est.model_features(data, spec.treatment),
                                         np.where(trial, a, 0.0), s),
    }

    layout = {}
    model_blocks = []
    theta_parts = []
    pos = 0
    for name in _blocks_for(kind, nuisances):
        blk = block_defs[name]()
        k = blk.Z.shape[1]
        layout[name] = slice(pos, pos + k)
        theta_parts.append(models[name].coefficients)
        model_blocks.append(blk)
        pos += k

    pred = est.predict_nuisances(data, nuisances)
    if normalized:
        for arm in est.ARMS:
            layout[f"kappa{arm}"] = slice(pos, pos + 1)
            w = est.compute_weights(data, nuisances, arm, pred)
            theta_parts.append([w.sum() / target.sum()])
            pos += 1
    psi0, psi1, ate = est.estimate(data, nuisances, kind, pred)
    for name, value in (("psi0", psi0), ("psi1", psi1), ("ate", ate)):
        layout[name] = slice(pos, pos + 1)
        theta_parts.append([value])
        pos += 1
    theta_hat = np.concatenate([np.asarray(t, dtype=float) for t in theta_parts])

    known_e1 = spec.known_treatment_prob
    has_part = "part" in layout

    def m(theta):
        cols = []
        fitted = {}
        for blk in model_blocks:
            beta = theta[layout[blk.name]]
            cols.append(blk.score(beta))
            fitted[blk.name] = blk.mean(beta)

        if kind in (est.WEIGHTING, est.AUGMENTED):
            p_hat = fitted["participation"]
            q_hat = fitted["part"] if has_part else np.ones(n)
            e1 = fitted["treatment"] if known_e1 is None else np.full(n, known_e1)
            w = {arm: est.weights_from(arm, data.s, a, p_hat, q_hat, e1 if arm == 1 else 1 - e1)
                 for arm in est.ARMS}
        if normalized:
            kappa = {arm: theta[layout[f"kappa{arm}"]][0] for arm in est.ARMS}
            for arm in est.ARMS:
                cols.append((w[arm] - target * kappa[arm])[:, None])

        for arm in est.ARMS:
            psi = theta[layout[f"psi{arm}"]][0]
            if kind == est.TRIAL_ONLY:
                col = s * (fitted[f"outcome{arm}"] - psi)
            elif kind == est.G_FORMULA:
                col = target * (fitted[f"outcome{arm}"] - psi)
            elif kind == est.WEIGHTING:
                scale = kappa[arm] if normalized else 1.0
                col = w[arm] * y / scale - target * psi
            else:
                g = fitted[f"outcome{arm}"]
                scale = kappa[arm] if normalized else 1.0
                col = w[arm] * (y - g) / scale + target * (g - psi)
            cols.append(col[:, None])
        psi0_, psi1_, ate_ = (theta[layout[t]][0] for t in est.TARGETS)
        cols.append(np.full((n, 1), psi1_ - psi0_ - ate_))
        return np.hstack(cols)

    system = StackedSystem(theta_hat, m, layout, est.TARGETS)
    resid = np.max(np.abs(system.residual_mean()))
    if not resid <= STACK_TOL:
        raise StackInconsistent(
            f"plug-in estimates leave an empirical estimating-equation mean of {resid:.3g}"
        )
    return system


# -- sandwich ---------------------------------------------------------------------------

def numerical_jacobian(system: StackedSystem, theta=None):
    """Mean derivative of the stack, ``d mean(m) / d theta``, by central differences.

    The step for coordinate ``j`` is ``1e-6 * max(1, |theta_j|)``.
    """
    theta = system.theta if theta is None else np.asarray(theta, dtype=float)
    J = np.empty((theta.size, theta.size))
    for j in range(theta.size):
        h = 1e-6 * max(1.0, abs(theta[j]))
        up = theta.copy()
        dn = theta.copy()
        up[j] += h
        dn[j] -= h
        J[:, j] = (system.residual_mean(up) - system.residual_mean(dn)) / (2 * h)
    return J


def sandwich_covariance(system: StackedSystem):
    """``A^{-1} B A^{-T} / n`` with ``A = -mean dm/dtheta`` and ``B = mean m m'``."""
    M = system.contributions()
    n = M.shape[0]
    A = -numerical_jacobian(system)
    Bm = M.T @ M / n
    try:
        cond = np.linalg.cond(A)
        if not np.isfinite(cond) or cond > 1e14:
            raise np.linalg.LinAlgError(f"condition number {cond:.3g}")
        A_inv = np.linalg.inv(A)
    except np.linalg.LinAlgError as err:
        raise SingularBread(f"bread matrix is not invertible: {err}") from None
    cov = A_inv @ Bm @ A_inv.T / n
    return 0.5 * (cov + cov.T)


def sandwich_se(system: StackedSystem, data=None) -> dict:
    """Sandwich standard errors and normal 95% intervals for each target."""
    cov = sandwich_covariance(system)
    out = {}
    for name in system.targets:
        j = system.blocks[name].start
        se = float(np.sqrt(max(cov[j, j], 0.0)))
        out[name] = IntervalEstimate.normal(system.theta[j], se, SANDWICH)
    return out


# -- bootstrap ----------------------------------------------------------------------------

def _seed_sequence(seed, index):
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=(*seed.spawn_key, index))
    return np.random.SeedSequence(seed, spawn_key=(index,))


def resample_counts(data, replicates, seed, stratified=False):
    """Frequency counts ``(len(replicates), n)`` for the given replicate indices.

    Replicate ``b`` draws from its own generator keyed by ``(seed, b)``, so
    any subset or ordering of replicates reproduces the same counts.
    """
    n = data.n
    parts = [np.flatnonzero(data.p == v) for v in (0, 1)] if stratified else [np.arange(n)]
    out = np.zeros((len(replicates), n))
    for row, b in enumerate(replicates):
        rng = np.random.default_rng(_seed_sequence(seed, int(b)))
        for idx in parts:
            if idx.size:
                draw = idx[rng.integers(0, idx.size, idx.size)]
                out[row] += np.bincount(draw, minlength=n)
    return out


@dataclass
class BootstrapResult:
    points: dict
    replicates: dict
    n_failed: int
    B: int
    intervals: dict = field(default_factory=dict)
    percentile: dict = field(default_factory=dict)


def _bootstrap_chunk(data, spec, kinds, replicates, seed, stratified, start):
    counts = resample_counts(data, replicates, seed, stratified)
    pred, ok = est.fit_predict_batch(data, spec, counts, start)
    values = {}
    with np.errstate(invalid="ignore", divide="ignore"):
        for kind in kinds:
            values[kind] = est.estimate_batch(data, spec, pred, counts, kind)
    for kind in kinds:
        ok &= np.all(np.isfinite(values[kind]), axis=1)
    return values, ok


def bootstrap(data, estimator_kinds=est.PROPOSED, B=1000, seed=0, spec=None, *,
              stratified=False, threads=1, chunk_size=250, nuisances=None) -> BootstrapResult:
    """Nonparametric bootstrap over rows of the pooled data.

    Each replicate resamples ``n`` rows with replacement (or ``n0`` and
    ``n1`` rows within parts when ``stratified``), refits every nuisance
    model and recomputes the targets of each estimator in
    ``estimator_kinds``.  Replicates with a failed fit are dropped; more than
    5% failures raises :class:`TooManyFailedReplicates`.

    The normal interval (``point +/- 1.96 * replicate SD``) is in
    ``result.intervals``; the percentile interval in ``result.percentile``.
    ``nuisances`` may pass the already fitted full-data models.
    """
    if B < 100:
        raise ValueError("bootstrap needs B >= 100")
    spec = spec or est.ModelSpec()
    if isinstance(estimator_kinds, str):
        estimator_kinds = (estimator_kinds,)
    kinds = tuple(estimator_kinds)
    nuis = nuisances if nuisances is not None else est.fit_nuisances(data, spec)
    pred = est.predict_nuisances(data, nuis)
    points = {k: est.estimate(data, nuis, k, pred) for k in kinds}

    chunks = [np.arange(lo, min(lo + chunk_size, B)) for lo in range(0, B, chunk_size)]
    work = lambda reps: _bootstrap_chunk(data, spec, kinds, reps, seed, stratified, nuis)  # noqa: E731
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, chunks))
    else:
        results = [work(c) for c in chunks]

    ok = np.concatenate([r[1] for r in results])
    n_failed = int((~ok).sum())
    if n_failed > MAX_FAILED_FRACTION * B:
        raise TooManyFailedReplicates(n_failed, B)

    reps = {k: np.vstack([r[0][k] for r in results])[ok] for k in kinds}
    res = BootstrapResult(points, reps, n_failed, B)
    for k in kinds:
        res.intervals[k] = {}
        res.percentile[k] = {}
        sd = reps[k].std(axis=0, ddof=1)
        lo, hi = np.percentile(reps[k], [2.5, 97.5], axis=0)
        for j, t in enumerate(est.TARGETS):
            res.intervals[k][t] = IntervalEstimate.normal(points[k][j], sd[j], BOOTSTRAP_NORMAL)
            res.percentile[k][t] = IntervalEstimate(float(points[k][j]), float(sd[j]),
                                                    float(lo[j]), float(hi[j]),
                                                    BOOTSTRAP_PERCENTILE)
    return res
