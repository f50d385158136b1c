# test_glm.py
import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.special import expit, logsumexp

from errors import EmptyStratumError, RankDeficiencyError, SeparationError
from glm import (
    LogisticFit,
    fit_logistic,
    fit_multinomial,
    principal_scores_from_ice_models,
    scores_from_probabilities,
)
from trial_data import StratumLabel, design_matrix

S00, S01, S11 = StratumLabel.S00, StratumLabel.S01, StratumLabel.S11


def _logistic_data(rng, n=600):
    X = rng.normal(size=(n, 2))
    y = rng.binomial(1, expit(-0.3 + 0.8 * X[:, 0] - 0.5 * X[:, 1]))
    return X, y


def test_logistic_matches_direct_likelihood_maximisation(rng):
    X, y = _logistic_data(rng)
    fit = fit_logistic(y, X)
    A = design_matrix(X)

    def negll(beta):
        lp = A @ beta
        return -np.sum(y * lp - np.logaddexp(0.0, lp))

    ref = minimize(negll, np.zeros(3), method="BFGS", options={"gtol": 1e-9})
    assert fit.converged
    np.testing.assert_allclose(fit.coefficients, ref.x, atol=1e-4)
    assert fit.log_likelihood == pytest.approx(-ref.fun, abs=1e-6)


def test_logistic_predict_and_covariance(rng):
    X, y = _logistic_data(rng)
    fit = fit_logistic(y, X)
    p = fit.predict(X)
    assert p.shape == (X.shape[0],)
    assert np.all((p > 0) & (p < 1))
    assert fit.covariance.shape == (3, 3)
    assert np.all(np.diag(fit.covariance) > 0)


def test_all_equal_responses_raise_separation():
    X = np.linspace(-1, 1, 20).reshape(-1, 1)
    with pytest.raises(SeparationError) as info:
        fit_logistic(np.ones(20), X)
    assert info.value.direction[0] == 1.0


def test_perfect_separation_detected():
    x = np.linspace(-1, 1, 40)
    y = (x > 0).astype(float)
    with pytest.raises(SeparationError):
        fit_logistic(y, x.reshape(-1, 1))


def test_ridge_rescues_separation():
    x = np.linspace(-1, 1, 40)
    y = (x > 0).astype(float)
    fit = fit_logistic(y, x.reshape(-1, 1), ridge=1.0)
    assert fit.converged
    assert fit.coefficients[1] > 0


def test_small_scale_covariates_are_not_separation(rng):
    # slopes near 1000 on a milli-scaled covariate are an ordinary fit
    X, y = _logistic_data(rng)
    fit = fit_logistic(y, X)
    small = fit_logistic(y, X * 1e-3)
    assert np.max(np.abs(small.coefficients)) > 100
    np.testing.assert_allclose(small.predict(X * 1e-3), fit.predict(X), atol=1e-6)


def test_rank_deficient_design():
    x = np.linspace(-1, 1, 30)
    X = np.column_stack([x, 2 * x])
    y = (np.arange(30) % 2).astype(float)
    with pytest.raises(RankDeficiencyError):
        fit_logistic(y, X)


def test_constant_model_probability():
    fit = LogisticFit.constant(0.3, p=2)
    np.testing.assert_allclose(fit.predict(np.zeros((4, 2))), 0.3)


def _multinomial_nll(beta, A, draws):
    eta = np.column_stack([np.zeros(A.shape[0]), A @ beta.reshape(2, -1).T])
    return -(eta[np.arange(A.shape[0]), draws] - logsumexp(eta, axis=1)).sum()


def test_multinomial_matches_direct_likelihood_maximisation(rng):
    n = 6000
    X = rng.normal(size=(n, 1))
    logits = np.column_stack([np.zeros(n), -0.5 + 1.0 * X[:, 0], 0.3 - 0.7 * X[:, 0]])
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    draws = (rng.random(n)[:, None] > np.cumsum(probs, axis=1)).sum(axis=1)
    strata = (S00, S01, S11)
    fit = fit_multinomial([strata[k] for k in draws], X, strata)
    assert fit.reference is S00
    direct = minimize(_multinomial_nll, np.zeros(4), args=(design_matrix(X), draws), method="BFGS",
                      options={"gtol": 1e-8})
    np.testing.assert_allclose(fit.coefficients, direct.x.reshape(2, 2), atol=1e-3)
    # sampling error at this n is about 0.05 per coefficient
    np.testing.assert_allclose(fit.coefficients, [[-0.5, 1.0], [0.3, -0.7]], atol=0.2)
    np.testing.assert_allclose(fit.scores(X).sum(axis=1), 1.0)


def test_multinomial_soft_labels_match_hard_labels(rng):
    X = rng.normal(size=(300, 1))
    draws = rng.integers(0, 3, size=300)
    strata = (S00, S01, S11)
    hard = fit_multinomial([strata[k] for k in draws], X, strata)
    soft = fit_multinomial(np.eye(3)[draws], X, strata)
    np.testing.assert_allclose(hard.coefficients, soft.coefficients, atol=1e-8)


def test_multinomial_small_scale_covariate(rng):
    n = 1500
    X = rng.normal(size=(n, 1))
    logits = np.column_stack([np.zeros(n), 0.8 * X[:, 0], -0.6 * X[:, 0]])
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    draws = (rng.random(n)[:, None] > np.cumsum(probs, axis=1)).sum(axis=1)
    strata = (S00, S01, S11)
    labels = [strata[k] for k in draws]
    fit = fit_multinomial(labels, X, strata)
    small = fit_multinomial(labels, X * 1e-4, strata)
    np.testing.assert_allclose(small.scores(X * 1e-4), fit.scores(X), atol=1e-6)


def test_multinomial_separation_detected():
    x = np.linspace(-1, 1, 60)
    labels = [S11 if v > 0.5 else S01 if v < -0.5 else S00 for v in x]
    with pytest.raises(SeparationError):
        fit_multinomial(labels, x.reshape(-1, 1), (S00, S01, S11))


def test_multinomial_empty_stratum(rng):
    X = rng.normal(size=(50, 1))
    labels = [S00] * 25 + [S11] * 25
    with pytest.raises(EmptyStratumError):
        fit_multinomial(labels, X, (S00, S01, S11))


def test_principal_scores_sum_to_one(rng):
    p0 = rng.uniform(0.05, 0.5, size=100)
    p1 = p0 + rng.uniform(0.0, 0.4, size=100)
    scores = scores_from_probabilities(p0, p1)
    np.testing.assert_allclose(scores.total, 1.0)
    assert scores.negative_count == 0
    assert set(scores.as_dict()) == {S00, S01, S11}


def test_negative_switcher_scores_are_counted():
    scores = scores_from_probabilities(np.array([0.5, 0.2]), np.array([0.4, 0.6]))
    assert scores.negative_count == 1


def test_scores_from_ice_models(rng):
    X, y = _logistic_data(rng)
    fit0 = fit_logistic(y, X)
    fit1 = LogisticFit.constant(0.9, p=2)
    scores = principal_scores_from_ice_models(fit0, fit1, X)
    np.testing.assert_allclose(scores.pi00, 0.1)
