# glm.py
import json
import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np
from scipy.special import expit, logsumexp, softmax

from config import NEWTON_MAX_ITER, NEWTON_TOL
from errors import ConvergenceError, EmptyStratumError, RankDeficiencyError, SeparationError
from trial_data import StratumLabel, design_matrix

logger = logging.getLogger(__name__)

# a fitted logit past this in magnitude means the MLE is running off to infinity
DIVERGENCE_BOUND = 50.0


@dataclass(frozen=True)
class LogisticFit:
    coefficients: np.ndarray
    converged: bool
    log_likelihood: float
    iterations: int
    covariance: Optional[np.ndarray] = None
    condition_number: float = float("nan")
    name: str = "logistic"

    @property
    def p(self) -> int:
        return self.coefficients.shape[0] - 1

    def linear_predictor(self, X) -> np.ndarray:
        A = design_matrix(X)
        if A.shape[1] != self.coefficients.shape[0]:
            raise ValueError(f"{self.name}: expected {self.p} covariates, got {A.shape[1] - 1}")
        return A @ self.coefficients

    def predict(self, X) -> np.ndarray:
        return expit(self.linear_predictor(X))

    def to_json(self) -> str:
        return json.dumps({
            "model": self.name,
            "coefficients": self.coefficients.tolist(),
            "converged": self.converged,
            "log_likelihood": self.log_likelihood,
            "iterations": self.iterations,
            "condition_number": self.condition_number,
        }, indent=2)

    @classmethod
    def constant(cls, prob: float, p: int, name: str = "logistic") -> "LogisticFit":
        """Intercept-only model with a fixed probability (for oracle or saturated use)."""
        coef = np.zeros(p + 1)
        coef[0] = np.log(prob / (1.0 - prob))
        return cls(coef, True, float("nan"), 0, name=name)


def predict_prob(fit: LogisticFit, X) -> np.ndarray:
    return fit.predict(X)


def _check_rank(A: np.ndarray, what: str):
    if A.shape[0] < A.shape[1] or np.linalg.matrix_rank(A) < A.shape[1]:
        raise RankDeficiencyError(f"{what}: design matrix is rank deficient ({A.shape[0]} x {A.shape[1]})")


def _logistic_loglik(beta, A, y, w, ridge):
    lp = A @ beta
    return float(np.sum(w * (y * lp - np.logaddexp(0.0, lp))) - 0.5 * ridge * np.sum(beta[1:] ** 2))


def fit_logistic(
    y,
    X,
    weights=None,
    ridge: float = 0.0,
    init: Optional[np.ndarray] = None,
    tol: float = NEWTON_TOL,
    max_iter: int = NEWTON_MAX_ITER,
    name: str = "logistic",
) -> LogisticFit:
    """Damped Newton-Raphson MLE for logit P(y=1|X) = [1, X]'alpha.

    Converges when the score max-norm is at most tol * n. ridge > 0 adds an
    L2 penalty on the slopes (separation rescue, off by default).
    """
    y = np.asarray(y, dtype=float)
    A = design_matrix(X)
    n, k = A.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)

    mass_one = float(np.sum(w * y))
    mass_zero = float(np.sum(w * (1.0 - y)))
    if ridge == 0.0 and (mass_one <= 0.0 or mass_zero <= 0.0):
        direction = np.zeros(k)
        direction[0] = 1.0 if mass_zero <= 0.0 else -1.0
        raise SeparationError(f"{name}: all responses equal, intercept diverges", direction=direction)
    _check_rank(A, name)

    beta = np.zeros(k) if init is None else np.array(init, dtype=float)
    penalty = np.full(k, ridge)
    penalty[0] = 0.0
    ll = _logistic_loglik(beta, A, y, w, ridge)
    threshold = tol * max(float(np.sum(w)), 1.0)
    converged = False
    iteration = 0

    for iteration in range(1, max_iter + 1):
        prob = expit(A @ beta)
        grad = A.T @ (w * (y - prob)) - penalty * beta
        if np.max(np.abs(grad)) <= threshold:
            converged = True
            iteration -= 1
            break
        info = (A * (w * prob * (1.0 - prob))[:, None]).T @ A + np.diag(penalty)
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(info, grad, rcond=None)[0]

        # step halving until the log-likelihood does not drop
        scale = 1.0
        while True:
            candidate = beta + scale * step
            ll_new = _logistic_loglik(candidate, A, y, w, ridge)
            if ll_new >= ll - 1e-12 * max(1.0, abs(ll)) or scale < 1e-10:
                break
            scale *= 0.5
        beta, ll = candidate, ll_new

        if np.max(np.abs(A @ beta)) > DIVERGENCE_BOUND:
            direction = beta / np.linalg.norm(beta)
            logger.error(f"{name}: coefficients diverging after {iteration} iterations")
            raise SeparationError(f"{name}: perfect separation, MLE does not exist", direction=direction)

    if not converged:
        prob = expit(A @ beta)
        grad = A.T @ (w * (y - prob)) - penalty * beta
        if np.max(np.abs(grad)) <= threshold:
            converged = True
        else:
            raise ConvergenceError(f"{name}: Newton did not converge in {max_iter} iterations "
                                   f"(score max-norm {np.max(np.abs(grad)):.3g})")

    prob = expit(A @ beta)
    info = (A * (w * prob * (1.0 - prob))[:, None]).T @ A + np.diag(penalty)
    cond = float(np.linalg.cond(info))
    covariance = np.linalg.pinv(info)
    if cond > 1e10:
        logger.warning(f"{name}: information matrix is ill-conditioned (condition number {cond:.3g})")
    return LogisticFit(beta, converged, ll, iteration, covariance, cond, name)


@dataclass(frozen=True)
class MultinomialFit:
    """Multinomial logit over strata; row k of coefficients belongs to strata[k + 1]."""
    strata: tuple
    coefficients: np.ndarray
    converged: bool
    log_likelihood: float
    iterations: int
    covariance: Optional[np.ndarray] = None
    condition_number: float = float("nan")

    @property
    def reference(self) -> StratumLabel:
        return self.strata[0]

    def linear_predictors(self, X) -> np.ndarray:
        A = design_matrix(X)
        if A.shape[1] != self.coefficients.shape[1]:
            raise ValueError(f"expected {self.coefficients.shape[1] - 1} covariates, got {A.shape[1] - 1}")
        return np.column_stack([np.zeros(A.shape[0]), A @ self.coefficients.T])

    def scores(self, X) -> np.ndarray:
        """n x K principal scores in the order of self.strata."""
        return softmax(self.linear_predictors(X), axis=1)

    def scores_by_label(self, X) -> Dict[StratumLabel, np.ndarray]:
        probs = self.scores(X)
        return {s: probs[:, k] for k, s in enumerate(self.strata)}

    def to_json(self) -> str:
        return json.dumps({
            "model": "multinomial",
            "reference": self.reference.value,
            "coefficients": {s.value: row.tolist() for s, row in zip(self.strata[1:], self.coefficients)},
            "converged": self.converged,
            "log_likelihood": self.log_likelihood,
            "iterations": self.iterations,
        }, indent=2)


def _responsibility_matrix(labels, strata: Sequence[StratumLabel]) -> np.ndarray:
    arr = np.asarray(labels, dtype=object) if not isinstance(labels, np.ndarray) else labels
    if arr.ndim == 2:
        R = np.asarray(arr, dtype=float)
        if R.shape[1] != len(strata):
            raise ValueError(f"soft labels have {R.shape[1]} columns for {len(strata)} strata")
        if not np.allclose(R.sum(axis=1), 1.0):
            raise ValueError("soft labels must be row-stochastic")
        return R
    parsed = [StratumLabel.parse(v) for v in arr]
    index = {s: k for k, s in enumerate(strata)}
    R = np.zeros((len(parsed), len(strata)))
    for i, s in enumerate(parsed):
        if s not in index:
            raise ValueError(f"label {s.value} is not among the modelled strata")
        R[i, index[s]] = 1.0
    return R


def _multinomial_loglik(B, A, R, w, ridge):
    lp = np.column_stack([np.zeros(A.shape[0]), A @ B.T])
    ll = np.sum(w[:, None] * R * (lp - logsumexp(lp, axis=1, keepdims=True)))
    return float(ll - 0.5 * ridge * np.sum(B[:, 1:] ** 2))


def fit_multinomial(
    labels,
    X,
    strata: Sequence[StratumLabel],
    reference: StratumLabel = StratumLabel.S00,
    weights=None,
    init: Optional[np.ndarray] = None,
    ridge: float = 0.0,
    tol: float = NEWTON_TOL,
    max_iter: int = NEWTON_MAX_ITER,
) -> MultinomialFit:
    """Newton MLE for the strata model log P(U=u|X)/P(U=ref|X) = [1, X]'beta_u.

    labels is either a sequence of stratum labels or an n x K responsibility
    matrix (columns in the order of strata) for EM M-steps.
    """
    strata = list(strata)
    if reference not in strata:
        raise ValueError(f"reference stratum {reference.value} not in strata")
    R = _responsibility_matrix(labels, strata)
    order = [strata.index(reference)] + [k for k, s in enumerate(strata) if s is not reference]
    strata = tuple(strata[k] for k in order)
    R = R[:, order]

    A = design_matrix(X)
    n, q = A.shape
    K = len(strata)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)

    mass = (w[:, None] * R).sum(axis=0)
    empty = [s.value for s, m in zip(strata, mass) if m <= 0.0]
    if empty:
        raise EmptyStratumError(f"no observations in strata {empty}; drop them via AssumptionConfig "
                                f"(monotonicity=True removes S10)")
    _check_rank(A, "multinomial")

    B = np.zeros((K - 1, q)) if init is None else np.array(init, dtype=float).reshape(K - 1, q)
    penalty = np.tile(np.r_[0.0, np.full(q - 1, ridge)], K - 1)
    ll = _multinomial_loglik(B, A, R, w, ridge)
    threshold = tol * max(float(np.sum(w)), 1.0)
    converged = False
    iteration = 0

    def score_and_info(Bc):
        probs = softmax(np.column_stack([np.zeros(n), A @ Bc.T]), axis=1)[:, 1:]
        resid = (R[:, 1:] - probs) * w[:, None]
        grad = (A.T @ resid).T.ravel() - penalty * Bc.ravel()
        info = np.empty(((K - 1) * q, (K - 1) * q))
        for j in range(K - 1):
            for k in range(K - 1):
                c = w * probs[:, j] * ((j == k) - probs[:, k])
                info[j * q:(j + 1) * q, k * q:(k + 1) * q] = (A * c[:, None]).T @ A
        return grad, info + np.diag(penalty)

    for iteration in range(1, max_iter + 1):
        grad, info = score_and_info(B)
        if np.max(np.abs(grad)) <= threshold:
            converged = True
            iteration -= 1
            break
        try:
            step = np.linalg.solve(info, grad).reshape(K - 1, q)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(info, grad, rcond=None)[0].reshape(K - 1, q)
        scale = 1.0
        while True:
            candidate = B + scale * step
            ll_new = _multinomial_loglik(candidate, A, R, w, ridge)
            if ll_new >= ll - 1e-12 * max(1.0, abs(ll)) or scale < 1e-10:
                break
            scale *= 0.5
        B, ll = candidate, ll_new
        if np.max(np.abs(A @ B.T)) > DIVERGENCE_BOUND:
            direction = B.ravel() / np.linalg.norm(B)
            raise SeparationError("multinomial: coefficients diverging (separated strata)", direction=direction)

    grad, info = score_and_info(B)
    if not converged:
        if np.max(np.abs(grad)) <= threshold:
            converged = True
        else:
            raise ConvergenceError(f"multinomial: Newton did not converge in {max_iter} iterations")
    cond = float(np.linalg.cond(info))
    return MultinomialFit(strata, B, converged, ll, iteration, np.linalg.pinv(info), cond)


@dataclass(frozen=True)
class PrincipalScores:
    """Principal scores implied by the arm-specific ICE probabilities."""
    pi11: np.ndarray
    pi00: np.ndarray
    pi01: np.ndarray
    negative_count: int = 0

    def as_dict(self) -> Dict[StratumLabel, np.ndarray]:
        return {StratumLabel.S00: self.pi00, StratumLabel.S01: self.pi01, StratumLabel.S11: self.pi11}

    @property
    def total(self) -> np.ndarray:
        return self.pi11 + self.pi00 + self.pi01


def scores_from_probabilities(p0: np.ndarray, p1: np.ndarray) -> PrincipalScores:
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    pi01 = p1 - p0
    negative = int(np.sum(pi01 < 0))
    if negative:
        logger.warning(f"{negative} of {pi01.size} records have negative switchable-stratum score (p1 < p0)")
    return PrincipalScores(pi11=p0, pi00=1.0 - p1, pi01=pi01, negative_count=negative)


def principal_scores_from_ice_models(fit0: LogisticFit, fit1: LogisticFit, X) -> PrincipalScores:
    if not (fit0.converged and fit1.converged):
        raise ConvergenceError("ICE models must be converged before mapping to principal scores")
    return scores_from_probabilities(fit0.predict(X), fit1.predict(X))
