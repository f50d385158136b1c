# mixture_engine.py
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import logsumexp, softmax

from config import (
    DEFAULT_PRIOR,
    DEFAULT_SEED,
    EM_MAX_ITER,
    EM_TOL,
    INTERVAL_LEVELS,
    MIN_STRATUM_OCCUPANCY,
    MONOTONE,
    RHAT_THRESHOLD,
    AssumptionConfig,
    PriorSpec,
)
from errors import (
    DataParseError,
    EmMonotonicityError,
    NoEventsError,
    NonFiniteLikelihoodError,
    SeparationError,
    EmptyStratumError,
    ConvergenceError,
)
from glm import fit_multinomial
from survival_models import fit_weibull, weibull_survival
from trial_data import Dataset, StratumLabel, TimeGrid, admissibility_mask, design_matrix, standardize, strata_for

logger = logging.getLogger(__name__)

ADAPT_WINDOW = 50


@dataclass(frozen=True)
class MixtureModel:
    """Parameter layout of the strata + Weibull outcome mixture for one assumption set.

    theta = [strata coefficients (K-1 rows of [intercept, slopes]),
             one (log shape, psi, gamma) row per outcome group].
    Under exclusion restriction the two arm-specific stratum-11 outcome models are one group.
    Covariates are standardized with (center, scale) before entering any linear predictor.
    """
    config: AssumptionConfig
    covariate_names: Tuple[str, ...]
    center: np.ndarray
    scale: np.ndarray

    @classmethod
    def for_dataset(cls, dataset: Dataset, config: AssumptionConfig) -> "MixtureModel":
        _, center, scale = standardize(dataset.X)
        return cls(config, tuple(dataset.covariate_names), center, scale)

    @property
    def strata(self) -> Tuple[StratumLabel, ...]:
        return strata_for(self.config)

    @property
    def K(self) -> int:
        return len(self.strata)

    @property
    def p(self) -> int:
        return len(self.covariate_names)

    @property
    def groups(self) -> List[Tuple]:
        keys = []
        for z in (0, 1):
            for u in self.strata:
                key = ("er", u) if self.config.exclusion_restriction and u is StratumLabel.S11 else (z, u)
                if key not in keys:
                    keys.append(key)
        return keys

    def group_of(self, z: int, k: int) -> int:
        u = self.strata[k]
        key = ("er", u) if self.config.exclusion_restriction and u is StratumLabel.S11 else (z, u)
        return self.groups.index(key)

    @property
    def n_strata_params(self) -> int:
        return (self.K - 1) * (self.p + 1)

    @property
    def n_params(self) -> int:
        return self.n_strata_params + len(self.groups) * (self.p + 2)

    def strata_slice(self) -> slice:
        return slice(0, self.n_strata_params)

    def group_slice(self, g: int) -> slice:
        start = self.n_strata_params + g * (self.p + 2)
        return slice(start, start + self.p + 2)

    def unpack(self, theta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        B = theta[self.strata_slice()].reshape(self.K - 1, self.p + 1)
        W = theta[self.n_strata_params:].reshape(len(self.groups), self.p + 2)
        return B, W

    def outcome_params(self, theta: np.ndarray, z: int, k: int) -> np.ndarray:
        return theta[self.group_slice(self.group_of(z, k))]

    def parameter_names(self) -> List[str]:
        cov = ["intercept", *self.covariate_names]
        names = [f"beta[{u.value}][{c}]" for u in self.strata[1:] for c in cov]
        for key in self.groups:
            tag = f"{key[0]},{key[1].value}" if key[0] == "er" else f"z{key[0]},{key[1].value}"
            names += [f"log_shape[{tag}]", f"psi[{tag}]"] + [f"gamma[{tag}][{c}]" for c in self.covariate_names]
        return names

    def standardize(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.center) / self.scale

    def log_scores(self, B: np.ndarray, Xs: np.ndarray) -> np.ndarray:
        lp = np.column_stack([np.zeros(Xs.shape[0]), design_matrix(Xs) @ B.T])
        return lp - logsumexp(lp, axis=1, keepdims=True)

    def scores(self, theta: np.ndarray, Xs: np.ndarray) -> np.ndarray:
        B, _ = self.unpack(theta)
        return np.exp(self.log_scores(B, Xs))


def _outcome_loglik(W: np.ndarray, log_t, event, Xs) -> np.ndarray:
    shape = np.exp(W[0])
    eta = W[1] + Xs @ W[2:]
    return event * ((shape - 1.0) * log_t + eta) - np.exp(shape * log_t + eta) / shape


def outcome_loglik_matrix(model: MixtureModel, theta, arm, time, event, Xs) -> np.ndarray:
    """n x K matrix of log f(time, event | Z, U = k, X)."""
    _, W = model.unpack(theta)
    log_t = np.log(time)
    out = np.empty((time.size, model.K))
    for z in (0, 1):
        rows = arm == z
        for k in range(model.K):
            out[rows, k] = _outcome_loglik(W[model.group_of(z, k)], log_t[rows], event[rows], Xs[rows])
    return out


def observed_loglik(model: MixtureModel, theta, arm, time, event, Xs, mask) -> float:
    B, _ = model.unpack(theta)
    joint = model.log_scores(B, Xs) + outcome_loglik_matrix(model, theta, arm, time, event, Xs)
    joint = np.where(mask, joint, -np.inf)
    return float(np.sum(logsumexp(joint, axis=1)))


def _sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cum = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0])[:, None] * cum[:, -1:]
    return np.minimum((u > cum).sum(axis=1), probs.shape[1] - 1)


def draw_curves(model: MixtureModel, theta, Xs, grid: TimeGrid) -> Tuple[np.ndarray, np.ndarray]:
    """Per-draw stratum curves (2, K, m) and stratum proportions (K,).

    S_{z,u}(t) = sum_i pi_u(X_i) S_{z,u}(t|X_i) / sum_i pi_u(X_i) over all records.
    """
    pi = model.scores(theta, Xs)
    _, W = model.unpack(theta)
    curves = np.empty((2, model.K, len(grid)))
    cache = {}
    for z in (0, 1):
        for k in range(model.K):
            g = model.group_of(z, k)
            if g not in cache:
                cache[g] = weibull_survival(grid.points, W[g], Xs)
            curves[z, k] = pi[:, k] @ cache[g] / pi[:, k].sum()
    return curves, pi.mean(axis=0)


def prior_predictive(
    X: np.ndarray,
    arm: np.ndarray,
    config: AssumptionConfig,
    prior: PriorSpec,
    rng: np.random.Generator,
    covariate_names: Sequence[str] = (),
) -> Tuple[np.ndarray, Dataset, np.ndarray]:
    """Draw theta from the prior, then strata and uncensored Weibull times given (X, arm).

    Needs proper intercept and log-shape priors. Returns (theta, dataset, labels).
    """
    if not (prior.sigma_intercept and prior.sigma_log_shape):
        raise ValueError("prior predictive draws need sigma_intercept and sigma_log_shape")
    X = np.asarray(X, dtype=float)
    arm = np.asarray(arm)
    Xs, center, scale = standardize(X)
    names = tuple(covariate_names) or tuple(f"x{j + 1}" for j in range(X.shape[1]))
    model = MixtureModel(config, names, center, scale)

    B = rng.normal(scale=prior.sigma_beta, size=(model.K - 1, model.p + 1))
    B[:, 0] = rng.normal(scale=prior.sigma_intercept, size=model.K - 1)
    W = rng.normal(scale=prior.sigma_gamma, size=(len(model.groups), model.p + 2))
    W[:, 0] = rng.normal(scale=prior.sigma_log_shape, size=len(model.groups))
    W[:, 1] = rng.normal(scale=prior.sigma_intercept, size=len(model.groups))
    theta = np.concatenate([B.ravel(), W.ravel()])

    labels = _sample_categorical(np.exp(model.log_scores(B, Xs)), rng)
    group = np.array([model.group_of(int(z), int(k)) for z, k in zip(arm, labels)])
    shape = np.exp(W[group, 0])
    eta = W[group, 1] + np.sum(Xs * W[group, 2:], axis=1)
    time = (shape * rng.exponential(size=arm.size) * np.exp(-eta)) ** (1.0 / shape)
    ice = np.array([model.strata[k].ice_under(int(z)) for z, k in zip(arm, labels)])
    dataset = Dataset(arm, ice, np.maximum(time, np.finfo(float).tiny), np.ones(arm.size, dtype=int), X, names)
    return theta, dataset, labels


def _initial_labels(model: MixtureModel, arm, ice, mask, rng) -> np.ndarray:
    p0 = ice[arm == 0].mean() if np.any(arm == 0) else 0.5
    p1 = ice[arm == 1].mean() if np.any(arm == 1) else 0.5
    guess = {
        StratumLabel.S11: max(p0, 0.01),
        StratumLabel.S00: max(1.0 - p1, 0.01),
        StratumLabel.S01: max(p1 - p0, 0.01),
        StratumLabel.S10: 0.05,
    }
    weights = mask * np.array([guess[s] for s in model.strata])
    return _sample_categorical(weights / weights.sum(axis=1, keepdims=True), rng)


def _safe_cov(cov: Optional[np.ndarray], dim: int, fallback: float) -> np.ndarray:
    if cov is None or cov.shape != (dim, dim) or not np.all(np.isfinite(cov)):
        return np.eye(dim) * fallback
    cov = 0.5 * (cov + cov.T) + 1e-10 * np.eye(dim)
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        return np.diag(np.maximum(np.abs(np.diag(cov)), fallback))
    return cov


def complete_data_fit(model: MixtureModel, responsibilities, arm, time, event, Xs, theta_init=None):
    """Weighted MLE of every block given (soft) stratum memberships.

    Returns theta and one proposal covariance per block (strata first, then groups).
    Blocks that cannot be fitted keep their initial value.
    """
    R = np.asarray(responsibilities, dtype=float)
    if theta_init is None:
        theta = np.zeros(model.n_params)
        rate = event.sum() / time.sum()
        for g in range(len(model.groups)):
            sl = model.group_slice(g)
            theta[sl.start + 1] = np.log(max(rate, 1e-12))
    else:
        theta = np.array(theta_init, dtype=float)
    B, _ = model.unpack(theta)

    covs = []
    try:
        mfit = fit_multinomial(R, Xs, model.strata, reference=model.strata[0], init=B)
        theta[model.strata_slice()] = mfit.coefficients.ravel()
        covs.append(_safe_cov(mfit.covariance, model.n_strata_params, 0.01))
    except (EmptyStratumError, SeparationError, ConvergenceError) as e:
        logger.warning(f"Strata model not refitted: {e}")
        covs.append(np.eye(model.n_strata_params) * 0.01)

    for g, key in enumerate(model.groups):
        arms = (0, 1) if key[0] == "er" else (key[0],)
        k = model.strata.index(key[1])
        rows = np.isin(arm, arms)
        w = R[rows, k]
        sl = model.group_slice(g)
        try:
            fit = fit_weibull(time[rows], event[rows], Xs[rows], weights=w, init=theta[sl],
                              name=f"weibull[{key[0]},{key[1].value}]")
            theta[sl] = fit.params
            covs.append(_safe_cov(fit.covariance, model.p + 2, 0.01))
        except (NoEventsError, ConvergenceError) as e:
            logger.warning(f"Outcome group {key} not refitted: {e}")
            covs.append(np.eye(model.p + 2) * 0.01)
    return theta, covs


def _one_hot(labels: np.ndarray, K: int) -> np.ndarray:
    R = np.zeros((labels.size, K))
    R[np.arange(labels.size), labels] = 1.0
    return R


class _Block:
    """Random-walk Metropolis block with adaptive covariance during burn-in."""

    def __init__(self, name: str, index: slice, cov: np.ndarray):
        self.name = name
        self.index = index
        self.dim = cov.shape[0]
        self.cov = cov
        self.chol = np.linalg.cholesky(cov)
        self.log_scale = 0.0
        self.history: List[np.ndarray] = []
        self.accepted = 0
        self.proposed = 0
        self.window_accepted = 0
        self.window_proposed = 0

    def propose(self, current: np.ndarray, rng) -> np.ndarray:
        step = np.exp(self.log_scale) * 2.38 / np.sqrt(self.dim)
        return current + step * (self.chol @ rng.standard_normal(self.dim))

    def record(self, accepted: bool):
        self.proposed += 1
        self.window_proposed += 1
        if accepted:
            self.accepted += 1
            self.window_accepted += 1

    def adapt(self):
        rate = self.window_accepted / max(self.window_proposed, 1)
        if rate < 0.20:
            self.log_scale -= 0.25
        elif rate > 0.40:
            self.log_scale += 0.25
        self.window_accepted = self.window_proposed = 0
        if len(self.history) >= max(2 * self.dim, ADAPT_WINDOW):
            emp = np.cov(np.asarray(self.history).T).reshape(self.dim, self.dim) + 1e-8 * np.eye(self.dim)
            try:
                self.chol = np.linalg.cholesky(emp)
                self.cov = emp
            except np.linalg.LinAlgError:
                pass

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / max(self.proposed, 1)


@dataclass
class PosteriorDraws:
    """Retained draws pooled across chains in (chain, iteration) order."""
    model: MixtureModel
    grid: TimeGrid
    params: np.ndarray
    labels: np.ndarray
    curves: np.ndarray
    proportions: np.ndarray
    loglik: np.ndarray
    chain: np.ndarray
    iteration: np.ndarray
    X_std: np.ndarray
    acceptance: Dict[str, List[float]] = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return int(self.params.shape[0])

    @property
    def n_chains(self) -> int:
        return int(np.unique(self.chain).size)

    def by_chain(self, values: np.ndarray) -> np.ndarray:
        return np.stack([values[self.chain == c] for c in np.unique(self.chain)])

    @property
    def spce(self) -> np.ndarray:
        return self.curves[:, 1] - self.curves[:, 0]


def split_rhat(chains: np.ndarray) -> float:
    """Split-chain potential scale reduction for one scalar; chains is (C, N)."""
    chains = np.asarray(chains, dtype=float)
    half = chains.shape[1] // 2
    if half < 2:
        return float("nan")
    parts = np.concatenate([chains[:, :half], chains[:, half:2 * half]])
    n = parts.shape[1]
    within = parts.var(axis=1, ddof=1).mean()
    between = n * parts.mean(axis=1).var(ddof=1)
    if within <= 0:
        return 1.0 if between <= 0 else float("inf")
    var_hat = (n - 1) / n * within + between / n
    return float(np.sqrt(var_hat / within))


def rhat_by_parameter(draws: PosteriorDraws) -> Dict[str, float]:
    names = draws.model.parameter_names()
    stacked = draws.by_chain(draws.params)
    return {name: split_rhat(stacked[:, :, j]) for j, name in enumerate(names)}


def itt_from_draw(draws: PosteriorDraws, index: int) -> np.ndarray:
    """S_1(t) - S_0(t) from the draw's mixed (stratum-marginal) survival curves."""
    model, theta, Xs = draws.model, draws.params[index], draws.X_std
    pi = model.scores(theta, Xs)
    mixed = np.zeros((2, len(draws.grid)))
    for z in (0, 1):
        for k in range(model.K):
            S = weibull_survival(draws.grid.points, model.outcome_params(theta, z, k), Xs)
            mixed[z] += pi[:, k] @ S
    mixed /= Xs.shape[0]
    return mixed[1] - mixed[0]


class MixtureSampler:
    """Data-augmented Metropolis-within-Gibbs sampler for the latent strata mixture."""

    def __init__(self, dataset: Dataset, config: AssumptionConfig, prior: PriorSpec, grid: TimeGrid,
                 iters: int, burnin: int, thin: int = 1):
        if iters <= burnin:
            raise ValueError(f"iters ({iters}) must exceed burnin ({burnin})")
        nonpositive = np.flatnonzero(dataset.time <= 0)
        if nonpositive.size:
            raise DataParseError("Weibull outcome model needs strictly positive times", int(nonpositive[0]) + 1)
        self.model = MixtureModel.for_dataset(dataset, config)
        self.prior = prior
        self.grid = grid
        self.iters = iters
        self.burnin = burnin
        self.thin = max(int(thin), 1)
        self.arm = np.asarray(dataset.arm)
        self.ice = np.asarray(dataset.ice)
        self.time = np.asarray(dataset.time)
        self.event = np.asarray(dataset.event, dtype=float)
        self.Xs = self.model.standardize(dataset.X)
        self.mask = admissibility_mask(self.arm, self.ice, self.model.strata)
        self.log_t = np.log(self.time)

    def _log_prior_strata(self, B: np.ndarray) -> float:
        lp = -0.5 * np.sum(B[:, 1:] ** 2) / self.prior.sigma_beta ** 2
        if self.prior.sigma_intercept:
            lp -= 0.5 * np.sum(B[:, 0] ** 2) / self.prior.sigma_intercept ** 2
        return float(lp)

    def _log_prior_group(self, w: np.ndarray) -> float:
        lp = -0.5 * np.sum(w[2:] ** 2) / self.prior.sigma_gamma ** 2
        if self.prior.sigma_intercept:
            lp -= 0.5 * w[1] ** 2 / self.prior.sigma_intercept ** 2
        if self.prior.sigma_log_shape:
            lp -= 0.5 * w[0] ** 2 / self.prior.sigma_log_shape ** 2
        return float(lp)

    def _strata_logpost(self, theta, labels) -> float:
        B, _ = self.model.unpack(theta)
        ls = self.model.log_scores(B, self.Xs)
        return float(np.sum(ls[np.arange(labels.size), labels])) + self._log_prior_strata(B)

    def _group_logpost(self, w, rows) -> float:
        ll = np.sum(_outcome_loglik(w, self.log_t[rows], self.event[rows], self.Xs[rows]))
        return float(ll) + self._log_prior_group(w)

    def _group_rows(self, labels) -> List[np.ndarray]:
        group = np.empty(labels.size, dtype=np.int64)
        for z in (0, 1):
            rows = self.arm == z
            lookup = np.array([self.model.group_of(z, k) for k in range(self.model.K)])
            group[rows] = lookup[labels[rows]]
        return [group == g for g in range(len(self.model.groups))]

    def _sample_labels(self, theta, rng, iteration: int) -> np.ndarray:
        B, _ = self.model.unpack(theta)
        joint = self.model.log_scores(B, self.Xs) + outcome_loglik_matrix(
            self.model, theta, self.arm, self.time, self.event, self.Xs)
        joint = np.where(self.mask, joint, -np.inf)
        if np.any(np.isnan(joint)) or np.any(np.all(np.isneginf(joint), axis=1)):
            raise NonFiniteLikelihoodError("label full conditional is not finite", iteration)
        return _sample_categorical(softmax(joint, axis=1), rng)

    def _mh_step(self, block: _Block, theta, current_lp, logpost, rng, iteration: int):
        proposal = theta.copy()
        proposal[block.index] = block.propose(theta[block.index], rng)
        new_lp = logpost(proposal)
        if np.isnan(new_lp) or new_lp == np.inf:
            raise NonFiniteLikelihoodError(f"block {block.name} log posterior is {new_lp}", iteration)
        accept = np.log(rng.random()) < new_lp - current_lp
        block.record(bool(accept))
        return (proposal, new_lp) if accept else (theta, current_lp)

    def run_chain(self, chain_id: int, seed) -> Dict:
        rng = np.random.default_rng(seed)
        model = self.model
        logger.info(f"Running chain {chain_id} ({self.iters} iterations, {self.burnin} burn-in)")

        labels = _initial_labels(model, self.arm, self.ice, self.mask, rng)
        theta, covs = complete_data_fit(model, _one_hot(labels, model.K), self.arm, self.time, self.event, self.Xs)
        blocks = [_Block("strata", model.strata_slice(), covs[0])]
        blocks += [_Block(f"outcome{key}", model.group_slice(g), covs[g + 1]) for g, key in enumerate(model.groups)]
        # overdispersed start around the complete-data fit
        for block in blocks:
            theta[block.index] = theta[block.index] + block.chol @ rng.standard_normal(block.dim)

        kept = range(self.burnin, self.iters, self.thin)
        R = len(kept)
        out = {
            "params": np.empty((R, model.n_params)),
            "labels": np.empty((R, self.time.size), dtype=np.int8),
            "curves": np.empty((R, 2, model.K, len(self.grid))),
            "proportions": np.empty((R, model.K)),
            "loglik": np.empty(R),
            "iteration": np.array(list(kept)),
        }
        r = 0
        for it in range(self.iters):
            adapting = it < self.burnin
            labels = self._sample_labels(theta, rng, it)

            lp = self._strata_logpost(theta, labels)
            theta, lp = self._mh_step(blocks[0], theta, lp, lambda th: self._strata_logpost(th, labels),
                                      rng, it)
            for g, rows in enumerate(self._group_rows(labels)):
                block = blocks[g + 1]
                if not rows.any():
                    continue
                current = self._group_logpost(theta[block.index], rows)
                theta, _ = self._mh_step(block, theta, current,
                                         lambda th, rows=rows, sl=block.index: self._group_logpost(th[sl], rows),
                                         rng, it)

            if adapting:
                for block in blocks:
                    block.history.append(theta[block.index].copy())
                    if (it + 1) % ADAPT_WINDOW == 0:
                        block.adapt()
            elif (it - self.burnin) % self.thin == 0:
                curves, props = draw_curves(model, theta, self.Xs, self.grid)
                out["params"][r] = theta
                out["labels"][r] = labels
                out["curves"][r] = curves
                out["proportions"][r] = props
                out["loglik"][r] = observed_loglik(model, theta, self.arm, self.time, self.event, self.Xs, self.mask)
                if not np.isfinite(out["loglik"][r]):
                    raise NonFiniteLikelihoodError("observed-data log-likelihood is not finite", it)
                r += 1

        out["acceptance"] = {b.name: b.acceptance_rate for b in blocks}
        logger.info(f"Chain {chain_id} complete; acceptance "
                    + ", ".join(f"{k}={v:.2f}" for k, v in out["acceptance"].items()))
        return out

    def run(self, chains: int, seed, threads: int = 1) -> PosteriorDraws:
        seeds = np.random.SeedSequence(seed).spawn(chains)
        if threads > 1 and chains > 1:
            with ProcessPoolExecutor(max_workers=min(threads, chains)) as pool:
                results = list(pool.map(self.run_chain, range(chains), seeds))
        else:
            results = [self.run_chain(c, s) for c, s in zip(range(chains), seeds)]

        acceptance: Dict[str, List[float]] = {}
        for res in results:
            for name, rate in res["acceptance"].items():
                acceptance.setdefault(name, []).append(rate)
        return PosteriorDraws(
            model=self.model,
            grid=self.grid,
            params=np.concatenate([r["params"] for r in results]),
            labels=np.concatenate([r["labels"] for r in results]),
            curves=np.concatenate([r["curves"] for r in results]),
            proportions=np.concatenate([r["proportions"] for r in results]),
            loglik=np.concatenate([r["loglik"] for r in results]),
            chain=np.concatenate([np.full(r["params"].shape[0], c) for c, r in enumerate(results)]),
            iteration=np.concatenate([r["iteration"] for r in results]),
            X_std=self.Xs,
            acceptance=acceptance,
        )


@dataclass(frozen=True)
class Band:
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def to_dict(self) -> Dict:
        return {"mean": np.asarray(self.mean).tolist(), "lower": np.asarray(self.lower).tolist(),
                "upper": np.asarray(self.upper).tolist()}


def band(samples: np.ndarray, axis: int = 0) -> Band:
    """Posterior mean with an equal-tailed interval."""
    mean = np.mean(samples, axis=axis)
    lo, hi = np.percentile(samples, INTERVAL_LEVELS, axis=axis)
    return Band(mean, np.minimum(lo, mean), np.maximum(hi, mean))


@dataclass
class PosteriorSummary:
    config: AssumptionConfig
    grid: TimeGrid
    strata: Tuple[StratumLabel, ...]
    survival: Dict[Tuple[int, StratumLabel], Band]
    spce: Dict[StratumLabel, Band]
    proportions: Dict[StratumLabel, Band]
    profiles: Dict[StratumLabel, Band]
    covariate_names: Tuple[str, ...]
    rhat: Dict[str, float]
    n_draws: int
    warnings: Dict[str, object] = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        finite = [v for v in self.rhat.values() if np.isfinite(v)]
        return bool(finite) and max(finite) < RHAT_THRESHOLD

    def to_dict(self) -> Dict:
        return {
            "engine": "mixture",
            "assumptions": self.config.model_dump(),
            "grid": self.grid.points.tolist(),
            "strata": [s.value for s in self.strata],
            "proportions": {s.value: b.to_dict() for s, b in self.proportions.items()},
            "survival": {f"z{z}_{s.value}": b.to_dict() for (z, s), b in self.survival.items()},
            "spce": {s.value: b.to_dict() for s, b in self.spce.items()},
            "profiles": {s.value: {"covariates": list(self.covariate_names), **b.to_dict()}
                         for s, b in self.profiles.items()},
            "rhat": self.rhat,
            "converged": self.converged,
            "n_draws": self.n_draws,
            "warnings": self.warnings,
        }


def spce_from_draws(draws: PosteriorDraws) -> Dict[StratumLabel, Band]:
    tau = draws.spce
    return {s: band(tau[:, k]) for k, s in enumerate(draws.model.strata)}


def strata_covariate_profile(draws: PosteriorDraws, dataset: Dataset) -> Dict[StratumLabel, Band]:
    """Per-draw weighted covariate means sum_i pi_u(X_i) X_i / sum_i pi_u(X_i), summarized."""
    X = np.asarray(dataset.X, dtype=float)
    per_draw = np.empty((draws.n_draws, draws.model.K, X.shape[1]))
    for r in range(draws.n_draws):
        pi = draws.model.scores(draws.params[r], draws.X_std)
        per_draw[r] = (pi.T @ X) / pi.sum(axis=0)[:, None]
    return {s: band(per_draw[:, k]) for k, s in enumerate(draws.model.strata)}


def summarize(draws: PosteriorDraws, dataset: Dataset) -> PosteriorSummary:
    model = draws.model
    warnings: Dict[str, object] = {}
    occupancy = np.stack([(draws.labels == k).sum(axis=1).mean() for k in range(model.K)])
    low = [s.value for s, occ in zip(model.strata, occupancy) if occ < MIN_STRATUM_OCCUPANCY]
    if low:
        logger.warning(f"Strata {low} have expected occupancy below {MIN_STRATUM_OCCUPANCY} records")
        warnings["low_occupancy"] = low

    rhat = rhat_by_parameter(draws)
    summary = PosteriorSummary(
        config=model.config,
        grid=draws.grid,
        strata=model.strata,
        survival={(z, s): band(draws.curves[:, z, k]) for z in (0, 1) for k, s in enumerate(model.strata)},
        spce=spce_from_draws(draws),
        proportions={s: band(draws.proportions[:, k]) for k, s in enumerate(model.strata)},
        profiles=strata_covariate_profile(draws, dataset),
        covariate_names=model.covariate_names,
        rhat=rhat,
        n_draws=draws.n_draws,
        warnings=warnings,
    )
    if not summary.converged:
        worst = max(rhat, key=lambda k: rhat[k] if np.isfinite(rhat[k]) else -1)
        logger.warning(f"Split R-hat above {RHAT_THRESHOLD} (worst {worst} = {rhat[worst]:.3f}); chains not converged")
        warnings["not_converged"] = True
    return summary


def run_sampler(
    dataset: Dataset,
    config: AssumptionConfig = MONOTONE,
    prior: PriorSpec = DEFAULT_PRIOR,
    grid: Optional[TimeGrid] = None,
    chains: int = 4,
    iters: int = 2000,
    burnin: int = 1000,
    seed: int = DEFAULT_SEED,
    thin: int = 1,
    threads: int = 1,
) -> Tuple[PosteriorSummary, PosteriorDraws]:
    grid = grid or TimeGrid.default_for(dataset)
    logger.info(f"Mixture sampler: {config.label}, {chains} chains x {iters} iterations, n={dataset.n}")
    sampler = MixtureSampler(dataset, config, prior, grid, iters, burnin, thin)
    draws = sampler.run(chains, seed, threads)
    return summarize(draws, dataset), draws


@dataclass
class EmResult:
    model: MixtureModel
    grid: TimeGrid
    theta: np.ndarray
    proportions: np.ndarray
    curves: np.ndarray
    loglik_trace: List[float]
    iterations: int
    converged: bool

    @property
    def spce(self) -> np.ndarray:
        return self.curves[1] - self.curves[0]

    def to_dict(self) -> Dict:
        strata = self.model.strata
        return {
            "engine": "mixture-em",
            "assumptions": self.model.config.model_dump(),
            "grid": self.grid.points.tolist(),
            "proportions": {s.value: float(self.proportions[k]) for k, s in enumerate(strata)},
            "survival": {f"z{z}_{s.value}": self.curves[z, k].tolist() for z in (0, 1) for k, s in enumerate(strata)},
            "spce": {s.value: self.spce[k].tolist() for k, s in enumerate(strata)},
            "parameters": dict(zip(self.model.parameter_names(), self.theta.tolist())),
            "loglik_trace": self.loglik_trace,
            "iterations": self.iterations,
            "converged": self.converged,
        }


def run_em(
    dataset: Dataset,
    config: AssumptionConfig = MONOTONE,
    grid: Optional[TimeGrid] = None,
    seed: int = DEFAULT_SEED,
    max_iter: int = EM_MAX_ITER,
    tol: float = EM_TOL,
    known_strata: Optional[Sequence] = None,
) -> EmResult:
    """EM over the latent strata: soft memberships, then weighted MLE of every block.

    With known_strata every record is pinned to its revealed stratum.
    """
    grid = grid or TimeGrid.default_for(dataset)
    sampler = MixtureSampler(dataset, config, DEFAULT_PRIOR, grid, 1, 0)
    model = sampler.model
    arm, time, event, Xs = sampler.arm, sampler.time, sampler.event, sampler.Xs

    if known_strata is not None:
        index = {s: k for k, s in enumerate(model.strata)}
        labels = np.array([index[StratumLabel.parse(v)] for v in known_strata])
        mask = _one_hot(labels, model.K).astype(bool)
        if np.any(~sampler.mask[np.arange(labels.size), labels]):
            raise ValueError("known strata conflict with the observed (Z, D) cells")
    else:
        mask = sampler.mask
        labels = _initial_labels(model, arm, sampler.ice, mask, np.random.default_rng(seed))

    theta, _ = complete_data_fit(model, _one_hot(labels, model.K), arm, time, event, Xs)
    trace: List[float] = []
    converged = False
    iterations = max_iter
    for k in range(1, max_iter + 1):
        B, _ = model.unpack(theta)
        joint = model.log_scores(B, Xs) + outcome_loglik_matrix(model, theta, arm, time, event, Xs)
        joint = np.where(mask, joint, -np.inf)
        ll = float(np.sum(logsumexp(joint, axis=1)))
        if not np.isfinite(ll):
            raise NonFiniteLikelihoodError("observed-data log-likelihood is not finite", k)
        if trace:
            if ll < trace[-1] - 1e-10 * max(1.0, abs(trace[-1])):
                logger.error(f"EM log-likelihood decreased at iteration {k}: {trace[-1]:.10f} -> {ll:.10f}")
                raise EmMonotonicityError(f"log-likelihood decreased at iteration {k} ({trace[-1]} -> {ll})")
            if ll - trace[-1] < tol:
                trace.append(ll)
                converged = True
                iterations = k - 1
                break
        trace.append(ll)
        responsibilities = softmax(joint, axis=1)
        theta, _ = complete_data_fit(model, responsibilities, arm, time, event, Xs, theta_init=theta)

    if not converged:
        logger.warning(f"EM stopped after {max_iter} iterations without meeting tol={tol}")
    curves, props = draw_curves(model, theta, Xs, grid)
    logger.info(f"EM finished after {iterations} iterations, log-likelihood {trace[-1]:.4f}")
    return EmResult(model, grid, theta, props, curves, trace, iterations, converged)


def draws_to_csv(draws: PosteriorDraws, path) -> Path:
    """Long format: one row per draw, stratum and grid point."""
    D, m = draws.n_draws, len(draws.grid)
    frames = []
    for k, s in enumerate(draws.model.strata):
        frames.append(pd.DataFrame({
            "chain": np.repeat(draws.chain, m),
            "iteration": np.repeat(draws.iteration, m),
            "stratum": s.value,
            "t": np.tile(draws.grid.points, D),
            "surv_z0": draws.curves[:, 0, k].ravel(),
            "surv_z1": draws.curves[:, 1, k].ravel(),
            "spce": draws.spce[:, k].ravel(),
            "proportion": np.repeat(draws.proportions[:, k], m),
        }))
    path = Path(path)
    pd.concat(frames, ignore_index=True).to_csv(path, index=False)
    return path


def curves_to_csv(summary: PosteriorSummary, path) -> Path:
    """Posterior-mean survival curves with credible bands, same columns as the weighting output."""
    rows = []
    for (z, s), b in summary.survival.items():
        rows.append(pd.DataFrame({"arm": z, "stratum": s.value, "t": summary.grid.points,
                                  "survival": b.mean, "lower": b.lower, "upper": b.upper}))
    path = Path(path)
    pd.concat(rows, ignore_index=True).to_csv(path, index=False)
    return path


def summary_to_json(summary: PosteriorSummary, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(summary.to_dict(), indent=2))
    return path
