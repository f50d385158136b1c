# trial_simulator.py
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
from numpy.polynomial.legendre import leggauss
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.optimize import brentq
from scipy.stats import truncnorm

from config import DEFAULT_SEED
from glm import LogisticFit
from survival_models import WeibullPhFit
from trial_data import ALL_STRATA, Dataset, StratumLabel, TimeGrid, write_csv

logger = logging.getLogger(__name__)

# Linear predictors use this covariate order everywhere in the simulator.
COVARIATE_NAMES: Tuple[str, ...] = ("age", "male", "nephrectomy", "risk")
LATENT_COLUMNS = ("U", "T0", "T1", "C")

AGE_NODES = 48
EVENT_NODES = 128
MC_CHUNK = 50_000
CENSORING_BRACKET = (-25.0, 10.0)


class CovariateSpec(BaseModel):
    """Baseline covariate law; age is reported standardized, the rest as 0/1."""
    model_config = ConfigDict(frozen=True)

    age_mean: float = 62.0
    age_sd: float = Field(10.0, gt=0)
    age_min: float = 18.0
    age_max: float = 90.0
    p_male: float = Field(0.65, ge=0, le=1)
    p_nephrectomy: float = Field(0.15, ge=0, le=1)
    p_risk: float = Field(0.10, ge=0, le=1)

    @property
    def age_bounds(self) -> Tuple[float, float]:
        """Truncation bounds on the standardized scale."""
        return ((self.age_min - self.age_mean) / self.age_sd, (self.age_max - self.age_mean) / self.age_sd)

    @property
    def binary_probabilities(self) -> Tuple[float, float, float]:
        return (self.p_male, self.p_nephrectomy, self.p_risk)


class OutcomeParams(BaseModel):
    """Weibull PH outcome: h(t|X) = t^(shape-1) exp(psi + X'gamma)."""
    model_config = ConfigDict(frozen=True)

    shape: float = Field(gt=0)
    psi: float
    gamma: Tuple[float, float, float, float]

    def as_fit(self) -> WeibullPhFit:
        return WeibullPhFit.from_natural(self.shape, self.psi, self.gamma)


def _outcome(shape, psi, gamma) -> OutcomeParams:
    return OutcomeParams(shape=shape, psi=psi, gamma=gamma)


# Stratum model rows listed for the switchable stratum "10" in the source DGP drive S01 here
# (and vice versa), so that S01 = (D(0)=0, D(1)=1) is the stratum monotonicity keeps.
DEFAULT_STRATA_COEFFICIENTS: Dict[str, Tuple[float, ...]] = {
    "01": (-1.4, 0.0, 0.1, 0.2, 0.5),
    "11": (0.0, -0.1, -0.1, -0.1, 0.0),
    "10": (-2.3, -0.1, -0.1, -0.1, 0.5),
}

DEFAULT_OUTCOMES: Dict[str, Dict[int, OutcomeParams]] = {
    "11": {0: _outcome(2.0, -5.0, (-0.3, 0.3, 1.0, 1.0)), 1: _outcome(2.0, -5.2, (-0.3, 0.3, 1.0, 1.0))},
    "10": {0: _outcome(2.0, -4.8, (-0.3, 0.3, 1.0, 1.0)), 1: _outcome(1.6, -5.5, (-0.5, 0.6, 1.5, 1.5))},
    "01": {0: _outcome(2.5, -4.0, (-0.5, 0.6, 0.5, 1.0)), 1: _outcome(2.5, -4.5, (-0.5, 0.6, 0.5, 0.5))},
    "00": {0: _outcome(2.2, -4.5, (-0.6, 0.5, 0.9, 0.5)), 1: _outcome(1.6, -5.5, (-0.5, 0.6, 1.4, 1.5))},
}


class DgpSpec(BaseModel):
    """Data-generating process for a two-arm trial with an intercurrent event.

    Strata follow a multinomial logit with reference 00; outcomes are Weibull PH per
    (arm, stratum); censoring is exponential with rate exp(intercept + X'slopes).
    With monotone=True the 10 stratum is removed.
    """
    model_config = ConfigDict(frozen=True)

    n_treated: int = Field(363, gt=0)
    n_control: int = Field(369, gt=0)
    covariates: CovariateSpec = CovariateSpec()
    strata_coefficients: Dict[str, Tuple[float, float, float, float, float]] = DEFAULT_STRATA_COEFFICIENTS
    outcomes: Dict[str, Dict[int, OutcomeParams]] = DEFAULT_OUTCOMES
    # calibrated so that about 10% of the reference trial is censored
    censoring_intercept: float = -4.45
    censoring_slopes: Tuple[float, float, float, float] = (-1.0, -1.0, -1.0, -1.0)
    monotone: bool = False

    @model_validator(mode="after")
    def _check_tables(self):
        for key in self.strata_coefficients:
            if key not in ("01", "10", "11"):
                raise ValueError(f"strata coefficients keyed by non-reference strata, got '{key}'")
        for stratum in ("00", "01", "10", "11"):
            arms = self.outcomes.get(stratum, {})
            if set(arms) != {0, 1}:
                raise ValueError(f"outcome parameters for stratum {stratum} need both arms")
        return self

    @property
    def n(self) -> int:
        return self.n_treated + self.n_control

    @property
    def treated_fraction(self) -> float:
        return self.n_treated / self.n

    def with_size(self, n: int) -> "DgpSpec":
        """Same DGP with n subjects, keeping the treated/control ratio."""
        if n < 2:
            raise ValueError("need at least one subject per arm")
        n_treated = min(max(int(round(n * self.treated_fraction)), 1), n - 1)
        return self.model_copy(update={"n_treated": n_treated, "n_control": n - n_treated})

    def outcome_fit(self, arm: int, stratum: StratumLabel) -> WeibullPhFit:
        return self.outcomes[stratum.value][arm].as_fit()

    def censoring_rate(self, X: np.ndarray) -> np.ndarray:
        return np.exp(self.censoring_intercept + np.asarray(X) @ np.asarray(self.censoring_slopes))


REFERENCE_TRIAL = DgpSpec()

# Monotonicity and principal ignorability hold exactly: no 10 stratum and the switchable
# stratum shares the outcome law of the stratum it is pooled with in each arm.
IGNORABLE_TRIAL = DgpSpec(
    monotone=True,
    outcomes={**DEFAULT_OUTCOMES, "01": {0: DEFAULT_OUTCOMES["00"][0], 1: DEFAULT_OUTCOMES["11"][1]}},
)


def load_spec(path) -> DgpSpec:
    return DgpSpec.model_validate_json(Path(path).read_text())


def strata_probabilities(spec: DgpSpec, X: np.ndarray) -> np.ndarray:
    """n x 4 matrix of P(U = u | X), columns in ALL_STRATA order."""
    X = np.asarray(X, dtype=float)
    logits = np.zeros((X.shape[0], len(ALL_STRATA)))
    for k, u in enumerate(ALL_STRATA):
        if u is StratumLabel.S00:
            continue
        if u is StratumLabel.S10 and spec.monotone:
            logits[:, k] = -np.inf
            continue
        beta = np.asarray(spec.strata_coefficients[u.value])
        logits[:, k] = beta[0] + X @ beta[1:]
    logits -= logits.max(axis=1, keepdims=True)
    expl = np.exp(logits)
    return expl / expl.sum(axis=1, keepdims=True)


def draw_covariates(cov: CovariateSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    lo, hi = cov.age_bounds
    age = truncnorm.rvs(lo, hi, size=n, random_state=rng)
    binaries = [rng.binomial(1, p, size=n) for p in cov.binary_probabilities]
    return np.column_stack([age, *binaries]).astype(float)


def weibull_inverse(fit: WeibullPhFit, X: np.ndarray, V: np.ndarray) -> np.ndarray:
    """T with S(T|X) = V."""
    eta = fit.log_scale + X @ fit.slopes
    return (-fit.shape * np.log(V) / np.exp(eta)) ** (1.0 / fit.shape)


@dataclass(frozen=True)
class SimulatedTrial:
    """Observed dataset plus the latent truth it was derived from."""
    dataset: Dataset
    strata: np.ndarray
    t0: np.ndarray
    t1: np.ndarray
    censor: np.ndarray
    spec: DgpSpec
    seed: object = None

    @property
    def labels(self) -> np.ndarray:
        return np.array([ALL_STRATA[k].value for k in self.strata])

    def check_consistency(self) -> bool:
        d = self.dataset
        t_arm = np.where(d.arm == 1, self.t1, self.t0)
        expected_ice = np.array([ALL_STRATA[k].ice_under(z) for k, z in zip(self.strata, d.arm)])
        return bool(
            np.array_equal(d.time, np.minimum(t_arm, self.censor))
            and np.array_equal(d.event, (t_arm <= self.censor).astype(np.int64))
            and np.array_equal(d.ice, expected_ice)
        )


def simulate(spec: DgpSpec = REFERENCE_TRIAL, seed=DEFAULT_SEED) -> SimulatedTrial:
    """One trial from the DGP; deterministic given (spec, seed)."""
    rng = np.random.default_rng(seed)
    n = spec.n
    X = draw_covariates(spec.covariates, n, rng)
    arm = np.zeros(n, dtype=np.int64)
    arm[rng.permutation(n)[:spec.n_treated]] = 1

    probs = strata_probabilities(spec, X)
    cumulative = np.cumsum(probs, axis=1)
    strata = np.minimum((rng.random(n)[:, None] > cumulative).sum(axis=1), len(ALL_STRATA) - 1)

    potential = {}
    for z in (0, 1):
        V = rng.random(n)
        times = np.empty(n)
        for k, u in enumerate(ALL_STRATA):
            rows = strata == k
            if rows.any():
                times[rows] = weibull_inverse(spec.outcome_fit(z, u), X[rows], V[rows])
        potential[z] = times
    censor = rng.exponential(1.0 / spec.censoring_rate(X))

    t_arm = np.where(arm == 1, potential[1], potential[0])
    ice = np.array([ALL_STRATA[k].ice_under(z) for k, z in zip(strata, arm)], dtype=np.int64)
    dataset = Dataset(arm, ice, np.minimum(t_arm, censor), (t_arm <= censor).astype(np.int64), X, COVARIATE_NAMES)
    logger.info(f"Simulated {n} subjects: censoring {1 - dataset.event.mean():.3f}, "
                f"strata {np.bincount(strata, minlength=4) / n}")
    return SimulatedTrial(dataset, strata.astype(np.int8), potential[0], potential[1], censor, spec, seed)


def write_truth(trial: SimulatedTrial, path) -> Path:
    """Observed columns plus U, T0, T1 and C; loaders ignore the latent columns."""
    extra = {"U": trial.labels, "T0": trial.t0, "T1": trial.t1, "C": trial.censor}
    return write_csv(trial.dataset, path, extra=extra)


# --- deterministic integration over the covariate law ---

def covariate_quadrature(cov: CovariateSpec, nodes: int = AGE_NODES) -> Tuple[np.ndarray, np.ndarray]:
    """Nodes (Q x 4) and probability weights (sum 1) for the covariate distribution."""
    lo, hi = cov.age_bounds
    x, w = leggauss(nodes)
    age = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
    age_w = 0.5 * (hi - lo) * w * truncnorm.pdf(age, lo, hi)
    age_w /= age_w.sum()

    points, weights = [], []
    for pattern in range(8):
        bits = [(pattern >> j) & 1 for j in range(3)]
        mass = np.prod([p if b else 1 - p for b, p in zip(bits, cov.binary_probabilities)])
        if mass == 0:
            continue
        points.append(np.column_stack([age, np.tile(bits, (nodes, 1))]))
        weights.append(age_w * mass)
    return np.vstack(points).astype(float), np.concatenate(weights)


def expected_strata_proportions(spec: DgpSpec) -> Dict[StratumLabel, float]:
    X, w = covariate_quadrature(spec.covariates)
    probs = w @ strata_probabilities(spec, X)
    return {u: float(probs[k]) for k, u in enumerate(ALL_STRATA)}


def _censoring_before_event(spec: DgpSpec, X: np.ndarray) -> np.ndarray:
    """P(C < T(z) | U=u, X) for every node, arm and stratum: shape (Q, 2, 4).

    P(C < T) = 1 - E[exp(-rate T)], integrated over v = S_T(T) ~ U(0, 1) with T = S_T^{-1}(v).
    Every node term falls as the rate grows, so the result is monotone in the censoring intercept.
    """
    x, wx = leggauss(EVENT_NODES)
    v = 0.5 * (x + 1.0)
    rate = spec.censoring_rate(X)
    out = np.empty((X.shape[0], 2, len(ALL_STRATA)))
    for z in (0, 1):
        for k, u in enumerate(ALL_STRATA):
            fit = spec.outcome_fit(z, u)
            kappa = np.exp(fit.log_scale + X @ fit.slopes)
            t = (-fit.shape * np.log(v)[None, :] / kappa[:, None]) ** (1.0 / fit.shape)
            out[:, z, k] = 1.0 - 0.5 * (np.exp(-rate[:, None] * t) @ wx)
    return np.clip(out, 0.0, 1.0)


def expected_censoring_fraction(spec: DgpSpec) -> float:
    X, w = covariate_quadrature(spec.covariates)
    probs = strata_probabilities(spec, X)
    p_cens = _censoring_before_event(spec, X)
    by_arm = [float(w @ np.sum(probs * p_cens[:, z, :], axis=1)) for z in (0, 1)]
    return spec.treated_fraction * by_arm[1] + (1 - spec.treated_fraction) * by_arm[0]


def calibrate_censoring(spec: DgpSpec, target: float = 0.10) -> DgpSpec:
    """Shift the censoring intercept so the expected censoring fraction hits target."""
    if not 0 < target < 1:
        raise ValueError("target censoring fraction must be in (0, 1)")

    def gap(intercept):
        return expected_censoring_fraction(spec.model_copy(update={"censoring_intercept": intercept})) - target

    lo, hi = CENSORING_BRACKET
    if gap(lo) > 0 or gap(hi) < 0:
        raise ValueError(f"target {target} is outside the censoring fractions reachable on {CENSORING_BRACKET}")
    intercept = brentq(gap, lo, hi, xtol=1e-10)
    logger.info(f"Censoring intercept {spec.censoring_intercept} -> {intercept:.4f} for target {target}")
    return spec.model_copy(update={"censoring_intercept": float(intercept)})


# --- true stratum survival curves ---

@dataclass
class TrueCurves:
    grid: TimeGrid
    survival: Dict[Tuple[int, StratumLabel], np.ndarray]
    proportions: Dict[StratumLabel, float]
    method: str
    mc_se: Optional[Dict[Tuple[int, StratumLabel], np.ndarray]] = None

    @property
    def spce(self) -> Dict[StratumLabel, np.ndarray]:
        return {u: self.survival[(1, u)] - self.survival[(0, u)] for u in self.proportions}

    def to_frame_rows(self):
        for (z, u), curve in self.survival.items():
            for j, t in enumerate(self.grid.points):
                yield {"arm": z, "stratum": u.value, "t": float(t), "survival": float(curve[j])}


def _present_strata(spec: DgpSpec):
    return tuple(u for u in ALL_STRATA if not (spec.monotone and u is StratumLabel.S10))


def true_spce(spec: DgpSpec, grid: TimeGrid, method: str = "quadrature",
              mc_size: int = 1_000_000, seed=DEFAULT_SEED) -> TrueCurves:
    """Stratum survival S_{z,u}(t) averaged over the covariate law with P(U=u|X) as weights."""
    strata = _present_strata(spec)
    t = grid.points
    if method == "quadrature":
        X, w = covariate_quadrature(spec.covariates)
        probs = strata_probabilities(spec, X)
        survival, proportions = {}, {}
        for k, u in enumerate(ALL_STRATA):
            if u not in strata:
                continue
            mass = w * probs[:, k]
            proportions[u] = float(mass.sum())
            for z in (0, 1):
                survival[(z, u)] = mass @ spec.outcome_fit(z, u).survival_at(t, X) / mass.sum()
        return TrueCurves(grid, survival, proportions, method)

    if method != "mc":
        raise ValueError(f"unknown method '{method}'")
    rng = np.random.default_rng(seed)
    K = len(ALL_STRATA)
    mass = np.zeros(K)
    first = {(z, k): np.zeros(t.size) for z in (0, 1) for k in range(K)}
    second = {(z, k): np.zeros(t.size) for z in (0, 1) for k in range(K)}
    cross = {(z, k): np.zeros(t.size) for z in (0, 1) for k in range(K)}
    mass_sq = np.zeros(K)
    done = 0
    while done < mc_size:
        size = min(MC_CHUNK, mc_size - done)
        X = draw_covariates(spec.covariates, size, rng)
        probs = strata_probabilities(spec, X)
        mass += probs.sum(axis=0)
        mass_sq += (probs ** 2).sum(axis=0)
        for k, u in enumerate(ALL_STRATA):
            if u not in strata:
                continue
            for z in (0, 1):
                weighted = probs[:, k][:, None] * spec.outcome_fit(z, u).survival_at(t, X)
                first[(z, k)] += weighted.sum(axis=0)
                second[(z, k)] += (weighted ** 2).sum(axis=0)
                cross[(z, k)] += (probs[:, k][:, None] * weighted).sum(axis=0)
        done += size

    survival, se, proportions = {}, {}, {}
    for k, u in enumerate(ALL_STRATA):
        if u not in strata:
            continue
        proportions[u] = float(mass[k] / mc_size)
        for z in (0, 1):
            ratio = first[(z, k)] / mass[k]
            # ratio estimator: residual pi*(S - ratio) has mean zero
            resid_sq = second[(z, k)] - 2 * ratio * cross[(z, k)] + ratio ** 2 * mass_sq[k]
            survival[(z, u)] = ratio
            se[(z, u)] = np.sqrt(np.maximum(resid_sq, 0.0) / mc_size) / (mass[k] / mc_size) / np.sqrt(mc_size)
    return TrueCurves(grid, survival, proportions, method, se)


def true_survival(spec: DgpSpec, grid: TimeGrid) -> Dict[Tuple[int, StratumLabel], np.ndarray]:
    return true_spce(spec, grid).survival


def truth_to_json(curves: TrueCurves, path) -> Path:
    payload = {
        "method": curves.method,
        "grid": curves.grid.points.tolist(),
        "proportions": {u.value: p for u, p in curves.proportions.items()},
        "survival": {f"z{z}_{u.value}": s.tolist() for (z, u), s in curves.survival.items()},
        "spce": {u.value: tau.tolist() for u, tau in curves.spce.items()},
    }
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2))
    return path


# --- true nuisance functions, same interface as fitted models ---

@dataclass(frozen=True)
class TrueIceProbability:
    """P(D(z) = 1 | X) implied by the stratum model."""
    spec: DgpSpec
    arm: int

    def predict(self, X) -> np.ndarray:
        probs = strata_probabilities(self.spec, X)
        cols = [k for k, u in enumerate(ALL_STRATA) if u.ice_under(self.arm) == 1]
        return probs[:, cols].sum(axis=1)


@dataclass(frozen=True)
class TrueCellSurvival:
    """Survival of T(z) given X among subjects in cell (z, d): a mixture over the cell's strata."""
    spec: DgpSpec
    arm: int
    ice: int

    def survival_at(self, t, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        probs = strata_probabilities(self.spec, X)
        total, mixture = 0.0, 0.0
        for k, u in enumerate(ALL_STRATA):
            if u.ice_under(self.arm) != self.ice:
                continue
            weight = probs[:, k] if np.ndim(t) == 0 else probs[:, k][:, None]
            mixture = mixture + weight * self.spec.outcome_fit(self.arm, u).survival_at(t, X)
            total = total + weight
        return mixture / np.where(total > 0, total, 1.0)

    def left_survival_at(self, t, X) -> np.ndarray:
        return self.survival_at(t, X)

    @property
    def jump_times(self) -> np.ndarray:
        return np.zeros(0)

    def hazard_increments(self, X) -> np.ndarray:
        return np.zeros((np.asarray(X).shape[0], 0))


@dataclass(frozen=True)
class TrueCensoringSurvival:
    """Exponential censoring; the compensator is discretized on an even grid up to t_max."""
    spec: DgpSpec
    t_max: float
    n_grid: int = 2000

    def survival_at(self, t, X) -> np.ndarray:
        rate = self.spec.censoring_rate(np.asarray(X, dtype=float))
        if np.ndim(t) == 0:
            return np.exp(-rate * float(t))
        return np.exp(-np.outer(rate, np.asarray(t, dtype=float)))

    def left_survival_at(self, t, X) -> np.ndarray:
        return self.survival_at(t, X)

    @property
    def jump_times(self) -> np.ndarray:
        return np.linspace(self.t_max / self.n_grid, self.t_max, self.n_grid)

    def hazard_increments(self, X) -> np.ndarray:
        rate = self.spec.censoring_rate(np.asarray(X, dtype=float))
        return np.outer(rate, np.full(self.n_grid, self.t_max / self.n_grid))


def oracle_bundle(spec: DgpSpec, t_max: float, n_grid: int = 2000):
    """NuisanceBundle of the true propensity, ICE, cell-survival and censoring functions."""
    from weighting_engine import NuisanceBundle

    p = len(COVARIATE_NAMES)
    propensity = LogisticFit.constant(spec.treated_fraction, p, name="propensity_true")
    event = {(z, d): TrueCellSurvival(spec, z, d) for z in (0, 1) for d in (0, 1)}
    censoring = {(z, d): TrueCensoringSurvival(spec, t_max, n_grid) for z in (0, 1) for d in (0, 1)}
    return NuisanceBundle(propensity, TrueIceProbability(spec, 0), TrueIceProbability(spec, 1),
                          event, censoring, {kind: None for kind in ("propensity", "ice", "event", "censoring")})
