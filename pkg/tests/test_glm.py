import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from partnest import glm
from partnest.errors import (
    DimensionMismatch,
    OneClassResponse,
    RankDeficient,
    SeparationDetected,
    SingularInformation,
)

BETA = np.array([-0.471, 0.5, 0.5, 0.5])


def newton_oracle(X, y, iters=100):
    """Plain Newton-Raphson on the Bernoulli log-likelihood, written from scratch."""
    b = np.zeros(X.shape[1])
    for _ in range(iters):
        mu = 1.0 / (1.0 + np.exp(-X @ b))
        grad = X.T @ (y - mu)
        hess = -(X.T * (mu * (1 - mu))) @ X
        b = b - np.linalg.solve(hess, grad)
    return b


def logistic_sample(n=200, seed=0, beta=BETA):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.standard_normal((n, len(beta) - 1))])
    y = (rng.random(n) < 1 / (1 + np.exp(-X @ beta))).astype(float)
    return X, y


def test_intercept_only_logit_of_mean():
    y = np.array([1, 0, 0, 0] * 5, dtype=float)
    m = glm.fit_logistic(np.ones((20, 1)), y)
    assert m.coefficients[0] == pytest.approx(math.log(0.25 / 0.75), abs=1e-10)
    assert m.coefficients[0] == pytest.approx(-1.0986122886681098, abs=1e-10)
    m = glm.fit_logistic(np.ones((6, 1)), np.array([1, 0, 1, 0, 1, 0.0]))
    assert abs(m.coefficients[0]) < 1e-12


def test_matches_newton_oracle():
    X, y = logistic_sample()
    m = glm.fit_logistic(X, y)
    assert m.converged and m.final_gradient_norm <= glm.GRADIENT_TOL
    np.testing.assert_allclose(m.coefficients, newton_oracle(X, y), atol=1e-6)


def test_score_and_mean_prediction_at_convergence():
    X, y = logistic_sample(seed=1)
    m = glm.fit_logistic(X, y)
    assert np.abs(m.scores(X, y).sum(axis=0)).max() <= 1e-8
    assert abs(m.predict(X).mean() - y.mean()) <= 1e-8


def test_loglik_non_decreasing():
    X, y = logistic_sample(seed=2)
    path = np.array(glm.fit_logistic(X, y).loglik_path)
    assert len(path) >= 2
    assert np.all(np.diff(path) >= -1e-12 * np.abs(path[:-1]))


@settings(max_examples=25, deadline=None)
# ranges keep the rescaled coefficients inside the separation guard
@given(scale=st.floats(0.2, 20), shift=st.floats(-3, 3), col=st.integers(1, 3))
def test_affine_rescaling_invariance(scale, shift, col):
    X, y = logistic_sample(seed=4)
    base = glm.fit_logistic(X, y)
    X2 = X.copy()
    X2[:, col] = X[:, col] * scale + shift
    moved = glm.fit_logistic(X2, y)
    # b_col' = b_col / scale, intercept' = b0 - b_col' * shift
    expect = base.coefficients.copy()
    expect[col] = base.coefficients[col] / scale
    expect[0] = base.coefficients[0] - expect[col] * shift
    np.testing.assert_allclose(moved.coefficients, expect, atol=1e-6)
    np.testing.assert_allclose(moved.predict(X2), base.predict(X), atol=1e-8)


def test_separation_detected():
    x = np.linspace(-1, 1, 20)
    X = np.column_stack([np.ones(20), x])
    with pytest.raises(SeparationDetected):
        glm.fit_logistic(X, (x > 0).astype(float))


def test_one_class_response():
    with pytest.raises(OneClassResponse):
        glm.fit_logistic(np.ones((5, 1)), np.ones(5))


def test_singular_information():
    X, y = logistic_sample(seed=5)
    X = np.column_stack([X, X[:, 1]])
    with pytest.raises(SingularInformation):
        glm.fit_logistic(X, y)


def test_predict_examples():
    zero = glm.FittedModel(glm.LOGISTIC, np.zeros(1), True, 0, 0.0)
    assert zero.predict(np.ones((1, 1)))[0] == 0.5
    m = glm.FittedModel(glm.LOGISTIC, BETA, True, 0, 0.0)
    assert m.predict([1, 0, 0, 0])[0] == pytest.approx(1 / (1 + math.exp(0.471)), abs=1e-15)
    assert m.predict([1, 0, 0, 0])[0] == pytest.approx(0.38438, abs=1e-5)
    lin = glm.FittedModel(glm.LINEAR, np.array([2.0]), True, 0, 0.0)
    assert lin.predict(np.ones((1, 1)))[0] == 2.0
    with pytest.raises(DimensionMismatch):
        m.predict(np.ones((2, 3)))


def test_linear_examples():
    m = glm.fit_linear(np.ones((3, 1)), np.array([1.0, 2.0, 3.0]))
    assert m.coefficients[0] == pytest.approx(2.0, abs=1e-14)
    assert m.converged
    x = np.arange(10.0)
    X = np.column_stack([np.ones(10), x])
    m = glm.fit_linear(X, X @ np.array([1.0, 0.5]))
    np.testing.assert_allclose(m.coefficients, [1.0, 0.5], atol=1e-13)


def test_linear_against_normal_equations():
    rng = np.random.default_rng(6)
    n, zeta = 2000, np.array([0.5, 0.5, 0.5, 0.5])
    X = np.column_stack([np.ones(n), rng.standard_normal((n, 3))])
    y = X @ zeta + rng.standard_normal(n)
    m = glm.fit_linear(X, y)
    gram_inv = np.linalg.inv(X.T @ X)
    oracle = gram_inv @ X.T @ y
    np.testing.assert_allclose(m.coefficients, oracle, atol=1e-10)
    se = np.sqrt(np.diag(gram_inv) * m.dispersion)
    assert np.all(np.abs(m.coefficients - zeta) < 3 * se)


def test_linear_rank_deficient():
    X = np.column_stack([np.ones(5), np.arange(5.0), 2 * np.arange(5.0)])
    with pytest.raises(RankDeficient):
        glm.fit_linear(X, np.arange(5.0))


def test_batch_logistic_equals_weighted_single():
    X, y = logistic_sample(n=300, seed=7)
    rng = np.random.default_rng(8)
    counts = rng.multinomial(300, np.full(300, 1 / 300), size=6).astype(float)
    coef, ok = glm.fit_logistic_batch(X, y, counts)
    assert ok.all()
    for b in range(6):
        single = glm.fit_logistic(X, y, weights=counts[b])
        np.testing.assert_allclose(coef[b], single.coefficients, atol=1e-9)
        # frequency weights are the same as literally repeating rows
        rows = np.repeat(np.arange(300), counts[b].astype(int))
        literal = glm.fit_logistic(X[rows], y[rows])
        np.testing.assert_allclose(coef[b], literal.coefficients, atol=1e-9)


def test_batch_flags_separated_replicate():
    x = np.linspace(-1, 1, 20)
    X = np.column_stack([np.ones(20), x])
    y = (x > 0).astype(float)
    y[0], y[-1] = 1.0, 0.0
    counts = np.ones((2, 20))
    counts[1, [0, -1]] = 0.0  # dropping the two crossing rows separates the data
    coef, ok = glm.fit_logistic_batch(X, y, counts)
    assert ok[0] and not ok[1]
    assert np.all(np.isnan(coef[1]))


def test_batch_linear_equals_single():
    rng = np.random.default_rng(9)
    X = np.column_stack([np.ones(50), rng.standard_normal((50, 2))])
    y = rng.standard_normal(50)
    counts = rng.integers(0, 3, size=(4, 50)).astype(float)
    coef, ok = glm.fit_linear_batch(X, y, counts)
    assert ok.all()
    for b in range(4):
        np.testing.assert_allclose(coef[b], glm.fit_linear(X, y, weights=counts[b]).coefficients,
                                   atol=1e-10)
