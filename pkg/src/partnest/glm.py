"""Nuisance regressions: Bernoulli-logit by IRLS and Gaussian-identity by OLS.

Besides the single-fit API (:func:`fit_logistic`, :func:`fit_linear`) the
module has batched, count-weighted fitters used by the bootstrap.  A
bootstrap replicate that draws row ``i`` ``c_i`` times has exactly the same
likelihood as a fit weighted by ``c_i``, so a whole set of replicates can be
fit at once as a ``(B, n)`` count matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import (
    DimensionMismatch,
    OneClassResponse,
    RankDeficient,
    SeparationDetected,
    SingularInformation,
)

LOGISTIC = "logistic"
LINEAR = "linear"

GRADIENT_TOL = 1e-8
MAX_ITER = 50
MAX_HALVINGS = 10
COEF_LIMIT = 30.0
# relative singular-value cutoff for the rank-revealing solves
RCOND = 1e-12
# round-off allowance when comparing log-likelihoods near the optimum
LL_SLACK = 1e-13


@dataclass(frozen=True)
class FittedModel:
    kind: str
    coefficients: np.ndarray
    converged: bool
    iterations: int
    final_gradient_norm: float
    subset_description: str = ""
    loglik_path: tuple = field(default=(), repr=False)
    dispersion: float = 1.0

    def predict(self, features):
        return predict(self, features)

    def mean(self, eta):
        return expit(eta) if self.kind == LOGISTIC else eta

    def scores(self, features, response):
        """Per-row score contributions ``x_i (y_i - mu_i)``, shape (m, k)."""
        features = _check_features(self, features)
        resid = np.asarray(response, dtype=float) - self.mean(features @ self.coefficients)
        return features * resid[:, None]

    def information(self, features):
        """Observed information ``X' W X`` summed over rows."""
        features = _check_features(self, features)
        if self.kind == LOGISTIC:
            mu = expit(features @ self.coefficients)
            w = mu * (1.0 - mu)
        else:
            w = np.ones(features.shape[0])
        return features.T @ (features * w[:, None])


def _check_features(model, features):
    features = np.asarray(features, dtype=float)
    if features.ndim == 1:
        features = features[None, :]
    if features.shape[1] != model.coefficients.shape[0]:
        raise DimensionMismatch(
            f"features have {features.shape[1]} columns, model has "
            f"{model.coefficients.shape[0]} coefficients"
        )
    return features


def predict(model: FittedModel, features) -> np.ndarray:
    """Fitted mean at ``features`` (probabilities for logistic models)."""
    features = _check_features(model, features)
    return model.mean(features @ model.coefficients)


def loglik_logistic(features, response, beta, weights=None):
    eta = features @ beta
    ll = response * eta - np.logaddexp(0.0, eta)
    if weights is not None:
        ll = ll * weights
    return float(ll.sum())


def _solve_rank_revealing(H, g, exc):
    """Solve ``H x = g`` via SVD, raising ``exc`` on numerical rank loss."""
    x, _, rank, sv = np.linalg.lstsq(H, g, rcond=RCOND)
    if rank < H.shape[0]:
        raise exc(f"information matrix is rank deficient (rank {rank} < {H.shape[0]}); "
                  f"smallest singular value {sv[-1]:.3g}")
    return x


def _validate_xy(features, response):
    X = np.asarray(features, dtype=float)
    y = np.asarray(response, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != y.shape[0]:
        raise DimensionMismatch(f"{X.shape[0]} feature rows but {y.shape[0]} responses")
    return X, y


def fit_logistic(features, response, *, weights=None, tol=GRADIENT_TOL, max_iter=MAX_ITER,
                 max_halvings=MAX_HALVINGS, coef_limit=COEF_LIMIT,
                 subset_description="") -> FittedModel:
    """Maximum likelihood logistic regression by iteratively reweighted least squares.

    Newton steps are halved (at most ``max_halvings`` times) whenever the full
    step lowers the log-likelihood.  Convergence means the score
    ``X'(y - mu)`` has max-norm at most ``tol``; a fit that does not get there
    within ``max_iter`` iterations is returned with ``converged=False``.

    ``weights`` are frequency weights; the package only uses them to check
    the batched bootstrap fitter.

    Raises
    ------
    OneClassResponse
        The response does not contain both 0 and 1.
    SeparationDetected
        Some coefficient exceeded ``coef_limit`` in absolute value.
    SingularInformation
        The weighted information matrix lost rank.
    """
    X, y = _validate_xy(features, response)
    if X.shape[0] < 2:
        raise OneClassResponse("logistic fit needs at least two rows")
    if not np.all(np.isin(y, (0.0, 1.0))):
        raise ValueError("logistic response must be 0/1")
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)
    ones, zeros = np.sum(w * y), np.sum(w * (1 - y))
    if ones == 0 or zeros == 0:
        level = 1 if zeros == 0 else 0
        raise OneClassResponse(f"response has a single class (all {level})", level=level)

    beta = np.zeros(X.shape[1])
    ll = loglik_logistic(X, y, beta, w)
    path = [ll]
    converged = False
    it = 0
    grad_norm = np.inf
    while True:
        mu = expit(X @ beta)
        grad = X.T @ (w * (y - mu))
        grad_norm = float(np.max(np.abs(grad)))
        if grad_norm <= tol:
            converged = True
            beta, ll, grad_norm = _polish(X, y, w, beta, ll, mu, grad, grad_norm)
            break
        if it >= max_iter:
            break
        it += 1
        H = X.T @ (X * (w * mu * (1 - mu))[:, None])
        step = _solve_rank_revealing(H, grad, SingularInformation)
        t = 1.0
        for _ in range(max_halvings + 1):
            cand = beta + t * step
            ll_cand = loglik_logistic(X, y, cand, w)
            if ll_cand >= ll - LL_SLACK * abs(ll):
                break
            t *= 0.5
        else:
            # every halving lowered the likelihood: nothing left to gain
            break
        beta, ll = cand, ll_cand
        path.append(ll)
        if np.max(np.abs(beta)) > coef_limit:
            raise SeparationDetected(
                f"coefficient magnitude {np.max(np.abs(beta)):.1f} exceeds {coef_limit} "
                f"after {it} iterations; the response is (quasi-)separated"
            )

    if ll != path[-1]:
        path.append(ll)
    return FittedModel(LOGISTIC, beta, converged, it, grad_norm, subset_description,
                       tuple(path))


def _polish(X, y, w, beta, ll, mu, grad, grad_norm):
    """One extra Newton step once converged, kept only if it shrinks the score.

    Newton convergence is quadratic, so this takes a fit at the ``1e-8``
    tolerance down to round-off and makes fitted saturated-model means exact
    cell means.
    """
    H = X.T @ (X * (w * mu * (1 - mu))[:, None])
    try:
        cand = beta + _solve_rank_revealing(H, grad, SingularInformation)
    except SingularInformation:
        return beta, ll, grad_norm
    cand_norm = float(np.max(np.abs(X.T @ (w * (y - expit(X @ cand))))))
    ll_cand = loglik_logistic(X, y, cand, w)
    if cand_norm < grad_norm and ll_cand >= ll - LL_SLACK * abs(ll):
        return cand, ll_cand, cand_norm
    return beta, ll, grad_norm


def fit_linear(features, response, *, weights=None, subset_description="") -> FittedModel:
    """Ordinary least squares via a rank-revealing (SVD) solve."""
    X, y = _validate_xy(features, response)
    n, k = X.shape
    if n < k:
        raise RankDeficient(f"{n} rows for {k} coefficients")
    if weights is None:
        beta, _, rank, _ = np.linalg.lstsq(X, y, rcond=RCOND)
        resid = y - X @ beta
        dof = n - k
        rss = float(resid @ resid)
        grad = X.T @ resid
    else:
        w = np.asarray(weights, dtype=float)
        sw = np.sqrt(w)
        beta, _, rank, _ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=RCOND)
        resid = y - X @ beta
        dof = w.sum() - k
        rss = float(np.sum(w * resid**2))
        grad = X.T @ (w * resid)
    if rank < k:
        raise RankDeficient(f"design has rank {rank} < {k} columns")
    dispersion = rss / dof if dof > 0 else float("nan")
    return FittedModel(LINEAR, beta, True, 1, float(np.max(np.abs(grad))), subset_description,
                       (), dispersion)


# -- batched, count-weighted fits ----------------------------------------------------------


def _outer_rows(X):
    """Row-wise outer products flattened to (n, k*k)."""
    n, k = X.shape
    return (X[:, :, None] * X[:, None, :]).reshape(n, k * k)


def _batched_solve(H, g):
    """Solve each ``H[b] x = g[b]``; rows that are singular come back NaN."""
    B, k = g.shape
    out = np.full((B, k), np.nan)
    try:
        return np.linalg.solve(H, g[:, :, None])[:, :, 0]
    except np.linalg.LinAlgError:
        pass
    for b in range(B):
        x, _, rank, _ = np.linalg.lstsq(H[b], g[b], rcond=RCOND)
        if rank == k:
            out[b] = x
    return out


def _softplus(eta):
    # same value as np.logaddexp(0, eta), about three times faster
    return np.maximum(eta, 0.0) + np.log1p(np.exp(-np.abs(eta)))


def _batched_loglik(eta, y, counts):
    return np.sum(counts * (y * eta - _softplus(eta)), axis=1)


def fit_logistic_batch(features, response, counts, *, start=None, tol=GRADIENT_TOL,
                       max_iter=MAX_ITER, max_halvings=MAX_HALVINGS, coef_limit=COEF_LIMIT):
    """Fit one logistic regression per row of ``counts``.

    Parameters
    ----------
    features : (n, k) array
    response : (n,) 0/1 array
    counts : (B, n) array of non-negative frequency weights
    start : (k,) array, optional
        Common starting value, typically the full-data estimate.

    Returns
    -------
    coef : (B, k) array
        NaN rows for failed fits.
    ok : (B,) bool array
        False where the replicate had a one-class response, separated,
        lost rank or did not converge.
    """
    X, y = _validate_xy(features, response)
    C = np.asarray(counts, dtype=float)
    B = C.shape[0]
    k = X.shape[1]
    XX = _outer_rows(X)

    n_one = C @ y
    n_zero = C @ (1.0 - y)
    failed = (n_one == 0) | (n_zero == 0)
    converged = np.zeros(B, dtype=bool)
    beta = np.zeros((B, k)) if start is None else np.tile(np.asarray(start, float), (B, 1))
    eta = beta @ X.T
    ll = _batched_loglik(eta, y, C)

    for it in range(max_iter + 1):
        mu = expit(eta)
        grad = (C * (y - mu)) @ X
        converged |= ~failed & (np.max(np.abs(grad), axis=1) <= tol)
        active = ~(failed | converged)
        if not active.any() or it == max_iter:
            break
        idx = np.flatnonzero(active)
        Ca = C[idx]
        H = ((Ca * (mu[idx] * (1.0 - mu[idx]))) @ XX).reshape(-1, k, k)
        step = _batched_solve(H, grad[idx])
        bad = ~np.all(np.isfinite(step), axis=1)
        failed[idx[bad]] = True
        idx, step, Ca = idx[~bad], step[~bad], Ca[~bad]

        t = np.ones(idx.size)
        cand = beta[idx] + step
        eta_c = cand @ X.T
        ll_c = _batched_loglik(eta_c, y, Ca)
        worse = ll_c < ll[idx] - LL_SLACK * np.abs(ll[idx])
        for _ in range(max_halvings):
            if not worse.any():
                break
            t[worse] *= 0.5
            cand[worse] = beta[idx[worse]] + t[worse, None] * step[worse]
            eta_c[worse] = cand[worse] @ X.T
            ll_c[worse] = _batched_loglik(eta_c[worse], y, Ca[worse])
            worse = ll_c < ll[idx] - LL_SLACK * np.abs(ll[idx])
        keep = ~worse
        upd = idx[keep]
        beta[upd] = cand[keep]
        eta[upd] = eta_c[keep]
        ll[upd] = ll_c[keep]
        # a replicate whose halvings all failed is at its numerical optimum
        stuck = idx[worse]
        failed[stuck] = True
        failed |= np.max(np.abs(beta), axis=1) > coef_limit

    ok = converged & ~failed
    beta[~ok] = np.nan
    return beta, ok


def fit_linear_batch(features, response, counts):
    """Weighted least squares for each row of ``counts``; returns ``(coef, ok)``."""
    X, y = _validate_xy(features, response)
    C = np.asarray(counts, dtype=float)
    k = X.shape[1]
    H = (C @ _outer_rows(X)).reshape(-1, k, k)
    g = (C * y) @ X
    ok = np.ones(C.shape[0], dtype=bool)
    # reject near-singular Gram matrices before solving
    cond = np.linalg.cond(H)
    ok &= np.isfinite(cond) & (cond < 1.0 / RCOND)
    beta = np.full((C.shape[0], k), np.nan)
    if ok.any():
        beta[ok] = np.linalg.solve(H[ok], g[ok][:, :, None])[:, :, 0]
    return beta, ok
