# survival_models.py
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol, Tuple, runtime_checkable

import numpy as np
import pandas as pd
from scipy.optimize import minimize

from config import COX_MAX_ITER, NEWTON_TOL
from errors import ConvergenceError, NoEventsError

logger = logging.getLogger(__name__)

# spread of the fitted log relative risks past which the partial likelihood is taken as monotone
DIVERGENCE_BOUND = 50.0


@runtime_checkable
class SurvivalModel(Protocol):
    """What the weighting engine needs from an event or censoring model.

    Time arguments may be scalar (result shape (n,)) or a 1-d grid (result shape (n, m)).
    """

    def survival_at(self, t, X) -> np.ndarray: ...

    def left_survival_at(self, t, X) -> np.ndarray: ...

    @property
    def jump_times(self) -> np.ndarray: ...

    def hazard_increments(self, X) -> np.ndarray: ...


def _as_matrix(X, p: int) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, p) if p else X.reshape(-1, 0)
    if X.shape[1] != p:
        raise ValueError(f"expected {p} covariates, got {X.shape[1]}")
    return X


def _covariates(X, n: Optional[int], p: Optional[int] = None) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 2:
        return X
    if p == 0 or X.size == 0:
        return np.zeros((n if n is not None else 1, 0))
    return X.reshape(-1, p) if p is not None else X.reshape(n, -1)


def _step_values(times: np.ndarray, cumulative: np.ndarray, t, side: str) -> np.ndarray:
    """Evaluate a step function with jumps at `times` (right-continuous for side='right')."""
    idx = np.searchsorted(times, np.asarray(t, dtype=float), side=side)
    padded = np.r_[0.0, cumulative]
    return padded[idx]


@dataclass(frozen=True)
class CoxFit:
    coefficients: np.ndarray
    event_times: np.ndarray
    increments: np.ndarray
    cell: Optional[Tuple[int, int]] = None
    log_partial_likelihood: float = float("nan")
    converged: bool = True
    iterations: int = 0
    covariance: Optional[np.ndarray] = None
    name: str = "cox"

    @property
    def p(self) -> int:
        return self.coefficients.shape[0]

    @property
    def jump_times(self) -> np.ndarray:
        return self.event_times

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.increments)

    def baseline_cumhaz(self, t) -> np.ndarray:
        return _step_values(self.event_times, self.cumulative, t, "right")

    def left_baseline_cumhaz(self, t) -> np.ndarray:
        return _step_values(self.event_times, self.cumulative, t, "left")

    def relative_risk(self, X) -> np.ndarray:
        return np.exp(_as_matrix(X, self.p) @ self.coefficients)

    def _survival(self, base, X) -> np.ndarray:
        rr = self.relative_risk(X)
        if np.ndim(base) == 0:
            return np.exp(-base * rr)
        return np.exp(-np.outer(rr, base))

    def survival_at(self, t, X) -> np.ndarray:
        return self._survival(self.baseline_cumhaz(t), X)

    def left_survival_at(self, t, X) -> np.ndarray:
        return self._survival(self.left_baseline_cumhaz(t), X)

    def hazard_increments(self, X) -> np.ndarray:
        """n x J matrix of conditional hazard jumps at the baseline jump times."""
        return np.outer(self.relative_risk(X), self.increments)

    @classmethod
    def null(cls, cell: Optional[Tuple[int, int]], p: int, name: str = "cox") -> "CoxFit":
        """Model with no hazard at all: S(t|X) = 1 everywhere."""
        return cls(np.zeros(p), np.zeros(0), np.zeros(0), cell, 0.0, True, 0, None, name)


def survival_at(fit: SurvivalModel, t, X) -> np.ndarray:
    return fit.survival_at(t, X)


def flip_indicator(event) -> np.ndarray:
    return 1 - np.asarray(event, dtype=np.int64)


def _risk_set_sums(time_sorted, lp_sorted, X_sorted, unique_times):
    shift = lp_sorted.max() if lp_sorted.size else 0.0
    r = np.exp(lp_sorted - shift)
    first = np.searchsorted(time_sorted, unique_times, side="left")
    S0 = np.cumsum(r[::-1])[::-1][first]
    S1 = np.cumsum((X_sorted * r[:, None])[::-1], axis=0)[::-1][first]
    outer = X_sorted[:, :, None] * X_sorted[:, None, :] * r[:, None, None]
    S2 = np.cumsum(outer[::-1], axis=0)[::-1][first]
    return S0, S1, S2, shift


def _event_summaries(time, event, X):
    order = np.argsort(time, kind="stable")
    t_s, e_s, X_s = time[order], event[order], X[order]
    unique_times, inverse = np.unique(t_s[e_s == 1], return_inverse=True)
    d = np.bincount(inverse, minlength=unique_times.size).astype(float)
    s = np.zeros((unique_times.size, X.shape[1]))
    np.add.at(s, inverse, X_s[e_s == 1])
    return t_s, X_s, unique_times, d, s


def cox_partial_loglik(beta, time, event, X) -> float:
    """Breslow-tie log partial likelihood."""
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=np.int64)
    X = _covariates(X, time.size)
    t_s, X_s, unique_times, d, s = _event_summaries(time, event, X)
    S0, _, _, shift = _risk_set_sums(t_s, X_s @ beta, X_s, unique_times)
    return float(np.sum(s @ beta) - np.sum(d * (np.log(S0) + shift)))


def breslow_baseline(time, event, X, beta) -> Tuple[np.ndarray, np.ndarray]:
    """Jump times and Breslow increments d_j / sum_{risk set} exp(X'beta)."""
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=np.int64)
    X = _covariates(X, time.size)
    beta = np.asarray(beta, dtype=float)
    t_s, X_s, unique_times, d, _ = _event_summaries(time, event, X)
    S0, _, _, shift = _risk_set_sums(t_s, X_s @ beta, X_s, unique_times)
    return unique_times, d / (S0 * np.exp(shift))


def nelson_aalen(time, event) -> Tuple[np.ndarray, np.ndarray]:
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=np.int64)
    unique_times, d = np.unique(time[event == 1], return_counts=True)
    at_risk = np.array([np.sum(time >= t) for t in unique_times], dtype=float)
    return unique_times, d / at_risk


def fit_cox(
    time,
    event,
    X,
    cell: Optional[Tuple[int, int]] = None,
    tol: float = NEWTON_TOL,
    max_iter: int = COX_MAX_ITER,
    name: str = "cox",
) -> CoxFit:
    """Newton-Raphson on the Breslow partial likelihood, then the Breslow baseline at the MLE."""
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=np.int64)
    X = _covariates(X, time.size)
    n, p = X.shape
    if int(event.sum()) == 0:
        raise NoEventsError(f"{name}: no events in cell {cell}")

    t_s, X_s, unique_times, d, s = _event_summaries(time, event, X)

    def loglik_grad_info(beta):
        S0, S1, S2, shift = _risk_set_sums(t_s, X_s @ beta, X_s, unique_times)
        xbar = S1 / S0[:, None]
        ll = float(np.sum(s @ beta) - np.sum(d * (np.log(S0) + shift)))
        grad = np.sum(s - d[:, None] * xbar, axis=0)
        info = np.einsum("j,jab->ab", d, S2 / S0[:, None, None] - xbar[:, :, None] * xbar[:, None, :])
        return ll, grad, info

    beta = np.zeros(p)
    converged = p == 0
    iteration = 0
    ll = cox_partial_loglik(beta, time, event, X) if p else float("nan")
    threshold = tol * max(n, 1)

    while not converged and iteration < max_iter:
        ll, grad, info = loglik_grad_info(beta)
        if np.max(np.abs(grad)) <= threshold:
            converged = True
            break
        iteration += 1
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(info, grad, rcond=None)[0]
        scale = 1.0
        while True:
            candidate = beta + scale * step
            ll_new = loglik_grad_info(candidate)[0]
            if ll_new >= ll - 1e-12 * max(1.0, abs(ll)) or scale < 1e-10:
                break
            scale *= 0.5
        beta = candidate
        if np.ptp(X_s @ beta) > DIVERGENCE_BOUND:
            logger.error(f"{name}: coefficients diverging in cell {cell}")
            raise ConvergenceError(f"{name}: monotone partial likelihood in cell {cell}, MLE does not exist")

    covariance = None
    if p:
        ll, grad, info = loglik_grad_info(beta)
        if not converged:
            if np.max(np.abs(grad)) > threshold:
                raise ConvergenceError(f"{name}: Newton did not converge in {max_iter} iterations in cell {cell}")
            converged = True
        covariance = np.linalg.pinv(info)

    jump_times, increments = breslow_baseline(time, event, X, beta)
    return CoxFit(beta, jump_times, increments, cell, ll, converged, iteration, covariance, name)


def fit_censoring(time, event, X, cell: Optional[Tuple[int, int]] = None, **kwargs) -> CoxFit:
    """Cox model for censoring: censored records are the events."""
    kwargs.setdefault("name", "censoring")
    return fit_cox(time, flip_indicator(event), X, cell=cell, **kwargs)


def baseline_to_csv(fit: CoxFit, path) -> Path:
    path = Path(path)
    pd.DataFrame({"time": fit.event_times, "cumulative_hazard": fit.cumulative}).to_csv(path, index=False)
    return path


# --- Weibull proportional hazards: h(t|X) = t^(shape-1) exp(psi + X'gamma) ---

def _weibull_parts(params, X):
    params = np.asarray(params, dtype=float)
    shape = np.exp(params[0])
    eta = params[1] + _covariates(X, None, params.size - 2) @ params[2:]
    return shape, eta


def weibull_cumhaz(t, params, X) -> np.ndarray:
    shape, eta = _weibull_parts(params, X)
    t = np.asarray(t, dtype=float)
    if t.ndim == 0:
        return t ** shape * np.exp(eta) / shape
    return np.outer(np.exp(eta), t ** shape) / shape


def weibull_hazard(t, params, X) -> np.ndarray:
    shape, eta = _weibull_parts(params, X)
    t = np.asarray(t, dtype=float)
    if t.ndim == 0:
        return t ** (shape - 1.0) * np.exp(eta)
    return np.outer(np.exp(eta), t ** (shape - 1.0))


def weibull_survival(t, params, X) -> np.ndarray:
    return np.exp(-weibull_cumhaz(t, params, X))


def weibull_loglik_and_grad(params, time, event, X, weights=None) -> Tuple[float, np.ndarray]:
    """Right-censored log-likelihood over params = (log shape, psi, gamma) and its gradient."""
    time = np.asarray(time, dtype=float)
    if np.any(time <= 0):
        raise ValueError("Weibull likelihood needs strictly positive times")
    event = np.asarray(event, dtype=float)
    X = _covariates(X, time.size)
    w = np.ones(time.size) if weights is None else np.asarray(weights, dtype=float)
    shape, eta = _weibull_parts(params, X)
    log_t = np.log(time)
    H = np.exp(shape * log_t + eta) / shape
    ll = float(np.sum(w * (event * ((shape - 1.0) * log_t + eta) - H)))
    resid = w * (event - H)
    grad = np.empty(np.asarray(params).size)
    grad[0] = np.sum(w * (event * shape * log_t - H * (shape * log_t - 1.0)))
    grad[1] = np.sum(resid)
    grad[2:] = X.T @ resid
    return ll, grad


@dataclass(frozen=True)
class WeibullPhFit:
    params: np.ndarray
    converged: bool = True
    log_likelihood: float = float("nan")
    covariance: Optional[np.ndarray] = None

    @property
    def shape(self) -> float:
        return float(np.exp(self.params[0]))

    @property
    def log_scale(self) -> float:
        return float(self.params[1])

    @property
    def slopes(self) -> np.ndarray:
        return self.params[2:]

    @classmethod
    def from_natural(cls, shape: float, psi: float, gamma) -> "WeibullPhFit":
        return cls(np.r_[np.log(shape), psi, np.asarray(gamma, dtype=float)])

    def survival_at(self, t, X) -> np.ndarray:
        return weibull_survival(t, self.params, X)

    def left_survival_at(self, t, X) -> np.ndarray:
        return weibull_survival(t, self.params, X)

    def hazard(self, t, X) -> np.ndarray:
        return weibull_hazard(t, self.params, X)


def fit_weibull(time, event, X, weights=None, init: Optional[np.ndarray] = None, name: str = "weibull") -> WeibullPhFit:
    """Weighted MLE over (log shape, psi, gamma) by BFGS with the analytic gradient."""
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=float)
    X = _covariates(X, time.size)
    w = np.ones(time.size) if weights is None else np.asarray(weights, dtype=float)
    if np.sum(w * event) <= 0:
        raise NoEventsError(f"{name}: no (weighted) events to fit")
    if init is None:
        rate = np.sum(w * event) / np.sum(w * time)
        init = np.r_[0.0, np.log(rate), np.zeros(X.shape[1])]

    def objective(theta):
        ll, grad = weibull_loglik_and_grad(theta, time, event, X, w)
        return -ll, -grad

    result = minimize(objective, np.asarray(init, dtype=float), jac=True, method="BFGS",
                      options={"gtol": 1e-6 * max(1.0, float(np.sum(w))), "maxiter": 1000})
    if not np.all(np.isfinite(result.x)):
        raise ConvergenceError(f"{name}: non-finite parameters")
    if not result.success:
        logger.debug(f"{name}: BFGS stopped early ({result.message})")
    return WeibullPhFit(result.x, bool(result.success), float(-result.fun), np.asarray(result.hess_inv))
