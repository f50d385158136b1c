# weighting_engine.py
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from config import (
    BOOTSTRAP_FAILURE_WARN,
    DEFAULT_SEED,
    INTERVAL_LEVELS,
    MONOTONE,
    POSITIVITY_EPS,
    TILT_WARN_FRACTION,
    AssumptionConfig,
)
from errors import ModelFitError, NoEventsError, SpceError, ZetaOutOfRangeError
from glm import LogisticFit, fit_logistic
from survival_models import CoxFit, SurvivalModel, fit_censoring, fit_cox
from trial_data import CELLS, Dataset, StratumLabel, TimeGrid

logger = logging.getLogger(__name__)

MODEL_KINDS = ("propensity", "ice", "event", "censoring")


@dataclass(frozen=True)
class NuisanceBundle:
    """Propensity, ICE, event-survival and censoring-survival models for one dataset.

    columns[kind] holds the covariate column indices each model family was fitted on;
    None means every covariate.
    """
    propensity: object
    ice0: object
    ice1: object
    event: Dict[Tuple[int, int], SurvivalModel]
    censoring: Dict[Tuple[int, int], SurvivalModel]
    columns: Dict[str, Optional[Tuple[int, ...]]] = field(default_factory=dict)

    def design(self, kind: str, X: np.ndarray) -> np.ndarray:
        idx = self.columns.get(kind)
        return X if idx is None else X[:, list(idx)]

    def ice(self, z: int):
        return self.ice1 if z == 1 else self.ice0


def _column_indices(dataset: Dataset, names: Optional[Sequence[str]]) -> Optional[Tuple[int, ...]]:
    if names is None:
        return None
    index = {name: j for j, name in enumerate(dataset.covariate_names)}
    missing = [n for n in names if n not in index]
    if missing:
        raise ValueError(f"unknown covariates {missing}")
    return tuple(index[n] for n in names)


def fit_nuisances(
    dataset: Dataset,
    propensity_covariates: Optional[Sequence[str]] = None,
    ice_covariates: Optional[Sequence[str]] = None,
    event_covariates: Optional[Sequence[str]] = None,
    censoring_covariates: Optional[Sequence[str]] = None,
) -> NuisanceBundle:
    """Fit the four nuisance model families; covariate subsets may differ per family."""
    columns = {
        "propensity": _column_indices(dataset, propensity_covariates),
        "ice": _column_indices(dataset, ice_covariates),
        "event": _column_indices(dataset, event_covariates),
        "censoring": _column_indices(dataset, censoring_covariates),
    }

    def X_for(kind, rows=slice(None)):
        X = dataset.X[rows]
        idx = columns[kind]
        return X if idx is None else X[:, list(idx)]

    try:
        propensity = fit_logistic(dataset.arm, X_for("propensity"), name="propensity")
    except SpceError as e:
        raise ModelFitError("propensity", e) from e

    ice = {}
    for z in (0, 1):
        rows = dataset.arm == z
        try:
            ice[z] = fit_logistic(dataset.ice[rows], X_for("ice", rows), name=f"ice_model[z={z}]")
        except SpceError as e:
            raise ModelFitError(f"ice_model[z={z}]", e) from e

    event, censoring = {}, {}
    for cell in CELLS:
        rows = dataset.cell_mask(*cell)
        try:
            event[cell] = fit_cox(dataset.time[rows], dataset.event[rows], X_for("event", rows),
                                  cell=cell, name=f"event_model{cell}")
        except SpceError as e:
            raise ModelFitError(f"event_model{cell}", e) from e
        Xc = X_for("censoring", rows)
        try:
            censoring[cell] = fit_censoring(dataset.time[rows], dataset.event[rows], Xc,
                                            cell=cell, name=f"censoring_model{cell}")
        except NoEventsError:
            logger.info(f"No censoring in cell {cell}; censoring survival fixed at 1")
            censoring[cell] = CoxFit.null(cell, Xc.shape[1], name=f"censoring_model{cell}")
        except SpceError as e:
            raise ModelFitError(f"censoring_model{cell}", e) from e

    return NuisanceBundle(propensity, ice[0], ice[1], event, censoring, columns)


# --- linear principal-score maps: pi_u(X) = a + b0 * p0(X) + b1 * p1(X) ---

def score_map(zeta: float = 0.0) -> Dict[StratumLabel, Tuple[float, float, float]]:
    """(a, b0, b1) per stratum for the tilted monotonicity relaxation pi_10 = zeta * pi_01."""
    c = 1.0 / (1.0 - zeta)
    coefficients = {
        StratumLabel.S00: (1.0, c - 1.0, -c),
        StratumLabel.S01: (0.0, -c, c),
        StratumLabel.S11: (0.0, c, 1.0 - c),
    }
    if zeta > 0:
        coefficients[StratumLabel.S10] = (0.0, -zeta * c, zeta * c)
    return coefficients


def zeta_bound(P0: float, P1: float) -> float:
    """Largest zeta keeping every tilted proportion nonnegative."""
    return 1.0 - (P1 - P0) / min(P1, 1.0 - P0)


def _cell_probability(z: int, d: int, e: np.ndarray, p: np.ndarray) -> np.ndarray:
    ez = e if z == 1 else 1.0 - e
    pd_ = p if d == 1 else 1.0 - p
    return ez * pd_


def _left_at_own_time(model: SurvivalModel, times: np.ndarray, X: np.ndarray) -> np.ndarray:
    """S(T_i- | X_i) for each record at its own time."""
    if isinstance(model, CoxFit):
        return np.exp(-model.left_baseline_cumhaz(times) * model.relative_risk(X))
    uniq, inverse = np.unique(times, return_inverse=True)
    return model.left_survival_at(uniq, X)[np.arange(times.size), inverse]


def augmented_ipcw_terms(event_model, censoring_model, time, event, X_event, X_cens, grid_points):
    """IPCW indicator term and censoring-martingale integral for the records of one cell.

    Returns (S, ipcw, mart), each n_c x m, such that the augmented term is ipcw + S * mart:
      ipcw = I(time >= t) / S^C(t- | X)
      mart = sum over r < t of dM^C(r) / (S(r- | X) S^C(r- | X)),
    with dM^C the subject's censoring jump minus the compensator over the censoring model's jump times.
    """
    S = event_model.survival_at(grid_points, X_event)
    ipcw = (time[:, None] >= grid_points[None, :]) / censoring_model.left_survival_at(grid_points, X_cens)
    mart = np.zeros_like(S)

    jumps = np.asarray(censoring_model.jump_times, dtype=float)
    if jumps.size:
        dL = censoring_model.hazard_increments(X_cens)
        denom = event_model.left_survival_at(jumps, X_event) * censoring_model.left_survival_at(jumps, X_cens)
        compensator = dL * (time[:, None] >= jumps[None, :]) / denom
        cumulative = np.concatenate([np.zeros((time.size, 1)), np.cumsum(compensator, axis=1)], axis=1)
        mart -= cumulative[:, np.searchsorted(jumps, grid_points, side="left")]

    censored = np.flatnonzero(event == 0)
    if censored.size:
        r = time[censored]
        denom = (_left_at_own_time(event_model, r, X_event[censored])
                 * _left_at_own_time(censoring_model, r, X_cens[censored]))
        mart[censored] += (r[:, None] < grid_points[None, :]) / denom[:, None]
    return S, ipcw, mart


@dataclass
class CellTerms:
    """Per-cell ingredients evaluated on every record (zeros outside the cell for ipcw/mart)."""
    S: np.ndarray
    ipcw: np.ndarray
    mart: np.ndarray
    indicator: np.ndarray


@dataclass
class MrEstimate:
    grid: TimeGrid
    strata: Tuple[StratumLabel, ...]
    survival_raw: Dict[Tuple[int, StratumLabel], np.ndarray]
    proportions: Dict[StratumLabel, float]
    p0: float
    p1: float
    form: str = "corrected"
    zeta: float = 0.0
    xi0: float = 0.0
    xi1: float = 0.0
    warnings: Dict[str, int] = field(default_factory=dict)
    intervals: Dict[str, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    @property
    def survival(self) -> Dict[Tuple[int, StratumLabel], np.ndarray]:
        return {key: np.clip(curve, 0.0, 1.0) for key, curve in self.survival_raw.items()}

    @property
    def spce(self) -> Dict[StratumLabel, np.ndarray]:
        surv = self.survival
        return {u: surv[(1, u)] - surv[(0, u)] for u in self.strata}

    def flat(self) -> Dict[str, np.ndarray]:
        """Every reported quantity keyed by name (curves, contrasts, proportions)."""
        out = {f"surv_z{z}_{u.value}": s for (z, u), s in self.survival.items()}
        out.update({f"spce_{u.value}": tau for u, tau in self.spce.items()})
        out.update({f"prop_{u.value}": np.array([v]) for u, v in self.proportions.items()})
        return out

    def to_dict(self) -> Dict:
        out = {
            "engine": "weighting",
            "form": self.form,
            "zeta": self.zeta,
            "xi0": self.xi0,
            "xi1": self.xi1,
            "grid": self.grid.points.tolist(),
            "strata": [u.value for u in self.strata],
            "p0": self.p0,
            "p1": self.p1,
            "proportions": {u.value: v for u, v in self.proportions.items()},
            "survival": {f"z{z}_{u.value}": s.tolist() for (z, u), s in self.survival.items()},
            "survival_raw": {f"z{z}_{u.value}": s.tolist() for (z, u), s in self.survival_raw.items()},
            "spce": {u.value: tau.tolist() for u, tau in self.spce.items()},
            "warnings": self.warnings,
        }
        if self.intervals:
            out["intervals"] = {k: {"lower": lo.tolist(), "upper": hi.tolist()} for k, (lo, hi) in self.intervals.items()}
        return out


def _truncate(values: np.ndarray, eps: float, name: str, counter: Dict[str, int]) -> np.ndarray:
    outside = int(np.sum((values < eps) | (values > 1.0 - eps)))
    if outside:
        logger.warning(f"Positivity guard: {outside} {name} values truncated to [{eps}, {1 - eps}]")
        counter["positivity_truncated"] = counter.get("positivity_truncated", 0) + outside
    return np.clip(values, eps, 1.0 - eps)


def _pi_tilt(eps_t: np.ndarray, partner: np.ndarray, switcher: np.ndarray):
    """Within-cell tilt weights (switchable, partner) for a cell mixing two strata."""
    total = partner + switcher
    denom = partner[:, None] + eps_t[None, :] * switcher[:, None]
    safe = denom > 0
    w_switch = np.where(safe, eps_t[None, :] * total[:, None] / np.where(safe, denom, 1.0), 1.0)
    w_partner = np.where(safe, total[:, None] / np.where(safe, denom, 1.0), 1.0)
    return w_switch, w_partner


def _ice_terms(bundle: NuisanceBundle, dataset: Dataset, eps: float, warnings: Dict[str, int]):
    """Truncated propensity and ICE probabilities plus the per-record doubly robust corrections."""
    X = dataset.X
    Z = dataset.arm.astype(float)
    D = dataset.ice.astype(float)
    e = _truncate(np.asarray(bundle.propensity.predict(bundle.design("propensity", X))), eps, "propensity", warnings)
    p = {z: _truncate(np.asarray(bundle.ice(z).predict(bundle.design("ice", X))), eps, f"p{z}", warnings)
         for z in (0, 1)}
    corr0 = (1.0 - Z) / (1.0 - e) * (D - p[0])
    corr1 = Z / e * (D - p[1])
    return e, p, corr0, corr1


def ice_rates(bundle: NuisanceBundle, dataset: Dataset, eps: float = POSITIVITY_EPS) -> Tuple[float, float]:
    """Doubly robust P(D(0)=1) and P(D(1)=1)."""
    _, p, corr0, corr1 = _ice_terms(bundle, dataset, eps, {})
    return float(np.mean(corr0 + p[0])), float(np.mean(corr1 + p[1]))


def mr_survival(
    bundle: NuisanceBundle,
    dataset: Dataset,
    grid: TimeGrid,
    config: AssumptionConfig = MONOTONE,
    form: str = "corrected",
    eps: float = POSITIVITY_EPS,
) -> MrEstimate:
    """Multiply robust stratum survival curves, SPCEs and doubly robust stratum proportions.

    form="corrected" is the internally consistent estimator; form="printed" evaluates the
    closed-form expressions literally as published (monotonicity, no tilts) for cross-checks.
    """
    if form not in ("corrected", "printed"):
        raise ValueError(f"unknown form '{form}'")
    zeta, xi0, xi1 = config.zeta, config.xi0, config.xi1
    if form == "printed" and (zeta or xi0 or xi1):
        raise ValueError("the printed form supports only the monotonicity + PI benchmark")
    if zeta > 0 and (xi0 or xi1):
        raise ValueError("zeta and xi tilts cannot be combined")

    X = dataset.X
    Z = dataset.arm.astype(float)
    D = dataset.ice.astype(float)
    t = grid.points
    warnings: Dict[str, int] = {}

    e, p, corr0, corr1 = _ice_terms(bundle, dataset, eps, warnings)
    P0 = float(np.mean(corr0 + p[0]))
    P1 = float(np.mean(corr1 + p[1]))

    if zeta > 0:
        bound = zeta_bound(P0, P1)
        if zeta >= bound:
            logger.error(f"zeta={zeta} outside the admissible range [0, {bound:.4f})")
            raise ZetaOutOfRangeError(zeta, bound)
    coefficients = score_map(zeta)
    strata = tuple(u for u in (StratumLabel.S00, StratumLabel.S01, StratumLabel.S10, StratumLabel.S11)
                   if u in coefficients)

    scores = {u: a + b0 * p[0] + b1 * p[1] for u, (a, b0, b1) in coefficients.items()}
    corrections = {u: b0 * corr0 + b1 * corr1 for u, (a, b0, b1) in coefficients.items()}
    proportions = {u: float(np.mean(scores[u] + corrections[u])) for u in strata}
    negative = sum(int(np.sum(scores[u] < 0)) for u in strata)
    if negative:
        logger.warning(f"{negative} negative principal-score values clipped to 0 in the weights")
        warnings["negative_scores"] = negative
    clipped = {u: np.maximum(scores[u], 0.0) for u in strata}

    terms: Dict[Tuple[int, int], CellTerms] = {}
    for z, d in CELLS:
        rows = dataset.cell_mask(z, d)
        S_all = bundle.event[(z, d)].survival_at(t, bundle.design("event", X))
        ipcw = np.zeros_like(S_all)
        mart = np.zeros_like(S_all)
        if rows.any():
            _, ipcw_c, mart_c = augmented_ipcw_terms(
                bundle.event[(z, d)], bundle.censoring[(z, d)], dataset.time[rows], dataset.event[rows],
                bundle.design("event", X[rows]), bundle.design("censoring", X[rows]), t)
            ipcw[rows] = ipcw_c
            mart[rows] = mart_c
        terms[(z, d)] = CellTerms(S_all, ipcw, mart, rows.astype(float))

    if form == "printed":
        survival_raw = _printed_estimates(terms, e, p, Z, D, clipped, proportions)
        return MrEstimate(grid, strata, survival_raw, proportions, P0, P1, form, zeta, xi0, xi1, warnings)

    # principal ignorability tilts inside the two mixed cells
    tilt: Dict[Tuple[int, StratumLabel], np.ndarray] = {}
    if zeta == 0 and (xi0 or xi1):
        eps1 = np.exp(xi1 * t / grid.t_max)
        eps0 = np.exp(xi0 * t / grid.t_max)
        tilt[(1, StratumLabel.S01)], tilt[(1, StratumLabel.S11)] = _pi_tilt(
            eps1, clipped[StratumLabel.S11], clipped[StratumLabel.S01])
        tilt[(0, StratumLabel.S01)], tilt[(0, StratumLabel.S00)] = _pi_tilt(
            eps0, clipped[StratumLabel.S00], clipped[StratumLabel.S01])

    survival_raw = {}
    clipped_tilt = 0
    evaluations = 0
    for z in (0, 1):
        for u in strata:
            d = u.ice_under(z)
            cell = terms[(z, d)]
            w = cell.indicator / _cell_probability(z, d, e, p[z])
            omega = tilt.get((z, u))
            if omega is None:
                S_t, A_t = cell.S, cell.ipcw + cell.S * cell.mart
            else:
                raw = omega * cell.S
                S_t = np.minimum(raw, 1.0)
                clipped_tilt += int(np.sum(raw > 1.0))
                evaluations += raw.size
                # the censoring martingale keeps the untilted cell survival
                A_t = omega * cell.ipcw + cell.S * cell.mart
            contribution = (clipped[u][:, None] * (w[:, None] * (A_t - S_t) + S_t)
                            + S_t * corrections[u][:, None])
            survival_raw[(z, u)] = contribution.mean(axis=0) / proportions[u]

    if clipped_tilt:
        warnings["tilt_clipped"] = clipped_tilt
        share = clipped_tilt / max(evaluations, 1)
        if share > TILT_WARN_FRACTION:
            logger.warning(f"PI tilt (xi0={xi0}, xi1={xi1}) pushes {share:.0%} of survival values above 1; "
                           f"the tilt is implausible for these data")
        else:
            logger.info(f"PI tilt clipped {clipped_tilt} survival values to 1")

    return MrEstimate(grid, strata, survival_raw, proportions, P0, P1, form, zeta, xi0, xi1, warnings)


def _printed_estimates(terms, e, p, Z, D, pi, proportions):
    """Published closed-form expressions evaluated exactly as printed."""
    S00, S01, S11 = StratumLabel.S00, StratumLabel.S01, StratumLabel.S11
    p0, p1 = p[0], p[1]
    ctrl = (1.0 - Z) / (1.0 - e)
    trt = Z / e

    def A(cell):
        c = terms[cell]
        return c.ipcw + c.S * c.mart

    def mean(values):
        return values.mean(axis=0)

    out = {}
    c00, c11, c10, c01 = terms[(0, 0)], terms[(1, 1)], terms[(1, 0)], terms[(0, 1)]
    P01, P00, P11 = proportions[S01], proportions[S00], proportions[S11]

    out[(0, S01)] = mean(
        (pi[S01] / P01 * (1 - D) / (1 - p0) * ctrl)[:, None] * A((0, 0))
        + c00.S / P01 * (trt * (D - p0) + (1 - p0) / (1 - p1) * ctrl * (p1 - D))[:, None]
        + (pi[S01] / P01 * (1 - ctrl))[:, None] * c00.S)
    out[(1, S01)] = mean(
        (pi[S01] / P01 * D / p1 * trt)[:, None] * A((1, 1))
        + c11.S / P01 * (ctrl * (D - p0) + p0 / p1 * trt * (p1 - D))[:, None]
        + (pi[S01] / P01 * (1 - trt))[:, None] * c11.S)
    out[(0, S00)] = mean(
        (pi[S00] / P00 * (1 - D) / (1 - p0) * ctrl)[:, None] * A((0, 0))
        + c00.S / P00 * (trt * (p1 - D) + (1 - p0) / (1 - p1) * ctrl * (D - p0))[:, None]
        + (pi[S01] / P00 * (1 - ctrl))[:, None] * c00.S)
    out[(1, S00)] = mean(
        ((1 - D) / (1 - p1) * trt)[:, None] * A((1, 0))
        + ((1 - p1) / P00 * (1 - trt))[:, None] * c10.S)
    out[(0, S11)] = mean(
        (D / p1 * ctrl)[:, None] * A((0, 1))
        + (p0 / P11 * (1 - ctrl))[:, None] * c01.S)
    out[(1, S11)] = mean(
        (pi[S11] / P11 * D / p1 * trt)[:, None] * A((1, 1))
        + c11.S / P11 * (ctrl * (D - p0) + p0 / p1 * trt * (p1 - D))[:, None]
        + (pi[S11] / P11 * (1 - trt))[:, None] * c11.S)
    return out


# --- balance diagnostics ---

SMD_CONTRASTS = {
    # stratum: ((treated cell, weight), (control cell, weight))
    "01": ((1, 1), "pi01/p1", (0, 0), "pi01/(1-p0)"),
    "00": ((1, 0), "1", (0, 0), "pi00/(1-p0)"),
    "11": ((1, 1), "pi11/p1", (0, 1), "1"),
}


def _hajek_mean(X: np.ndarray, w: np.ndarray) -> np.ndarray:
    return (w[:, None] * X).sum(axis=0) / w.sum()


def weighted_smd(bundle: NuisanceBundle, dataset: Dataset, eps: float = POSITIVITY_EPS) -> pd.DataFrame:
    """Unweighted and principal-score weighted SMDs between the two cells each stratum is seen in."""
    X = dataset.X
    p0 = np.clip(bundle.ice0.predict(bundle.design("ice", X)), eps, 1 - eps)
    p1 = np.clip(bundle.ice1.predict(bundle.design("ice", X)), eps, 1 - eps)
    weights = {
        "1": np.ones(dataset.n),
        "pi01/p1": np.maximum(p1 - p0, 0.0) / p1,
        "pi01/(1-p0)": np.maximum(p1 - p0, 0.0) / (1 - p0),
        "pi00/(1-p0)": (1 - p1) / (1 - p0),
        "pi11/p1": p0 / p1,
    }
    rows = []
    for stratum, (cell_a, w_a, cell_b, w_b) in SMD_CONTRASTS.items():
        mask_a, mask_b = dataset.cell_mask(*cell_a), dataset.cell_mask(*cell_b)
        Xa, Xb = X[mask_a], X[mask_b]
        var_a = Xa.var(axis=0, ddof=1) if Xa.shape[0] > 1 else np.zeros(dataset.p)
        var_b = Xb.var(axis=0, ddof=1) if Xb.shape[0] > 1 else np.zeros(dataset.p)
        sigma = np.sqrt((var_a + var_b) / 2.0)
        unweighted = Xa.mean(axis=0) - Xb.mean(axis=0)
        weighted = _hajek_mean(Xa, weights[w_a][mask_a]) - _hajek_mean(Xb, weights[w_b][mask_b])
        degenerate = sigma <= 0
        safe = np.where(degenerate, 1.0, sigma)
        for j, name in enumerate(dataset.covariate_names):
            rows.append({
                "stratum": stratum,
                "covariate": name,
                "unweighted": 0.0 if degenerate[j] else float(unweighted[j] / safe[j]),
                "weighted": 0.0 if degenerate[j] else float(weighted[j] / safe[j]),
                "degenerate": bool(degenerate[j]),
            })
    table = pd.DataFrame(rows)
    if table["degenerate"].any():
        logger.warning(f"{int(table['degenerate'].sum())} SMDs have zero pooled variance and are reported as 0")
    return table


def strata_covariate_profile_weighting(bundle: NuisanceBundle, dataset: Dataset,
                                       eps: float = POSITIVITY_EPS) -> Dict[StratumLabel, Optional[Dict[str, np.ndarray]]]:
    """Principal-score weighted covariate mean and SD per stratum (monotonicity map)."""
    X = dataset.X
    p0 = np.clip(bundle.ice0.predict(bundle.design("ice", X)), eps, 1 - eps)
    p1 = np.clip(bundle.ice1.predict(bundle.design("ice", X)), eps, 1 - eps)
    scores = {
        StratumLabel.S00: 1.0 - p1,
        StratumLabel.S01: np.maximum(p1 - p0, 0.0),
        StratumLabel.S11: p0,
    }
    out = {}
    for u, pi in scores.items():
        share = pi.mean()
        if share < 1e-6:
            logger.warning(f"Stratum {u.value} has estimated proportion ~0; profile suppressed")
            out[u] = None
            continue
        mean = (pi[:, None] * X).mean(axis=0) / share
        var = (pi[:, None] * (X - mean) ** 2).mean(axis=0) / share
        out[u] = {"mean": mean, "sd": np.sqrt(var)}
    return out


def profile_frame(bundle: NuisanceBundle, dataset: Dataset, eps: float = POSITIVITY_EPS) -> pd.DataFrame:
    """Long table of the weighted stratum profiles; suppressed strata are left out."""
    rows = []
    for u, profile in strata_covariate_profile_weighting(bundle, dataset, eps).items():
        if profile is None:
            continue
        for j, name in enumerate(dataset.covariate_names):
            rows.append({"stratum": u.value, "covariate": name,
                         "mean": float(profile["mean"][j]), "sd": float(profile["sd"][j])})
    return pd.DataFrame(rows, columns=["stratum", "covariate", "mean", "sd"])


# --- bootstrap ---

@dataclass
class BootstrapResult:
    replicates: Dict[str, np.ndarray]
    lower: Dict[str, np.ndarray]
    upper: Dict[str, np.ndarray]
    failures: int
    B: int
    fast: bool = False

    @property
    def failure_rate(self) -> float:
        return self.failures / max(self.B, 1)


def stratified_resample(arm: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Case resampling within each arm."""
    parts = []
    for z in (0, 1):
        idx = np.flatnonzero(arm == z)
        if idx.size:
            parts.append(rng.choice(idx, size=idx.size, replace=True))
    return np.sort(np.concatenate(parts))


def _bootstrap_replicate(seed, dataset: Dataset, grid: TimeGrid, config: AssumptionConfig, form: str,
                         covariates: Dict[str, Optional[Sequence[str]]], bundle: Optional[NuisanceBundle]):
    rng = np.random.default_rng(seed)
    sample = dataset.take(stratified_resample(dataset.arm, rng))
    try:
        fitted = bundle if bundle is not None else fit_nuisances(sample, **covariates)
        return mr_survival(fitted, sample, grid, config, form).flat()
    except (SpceError, np.linalg.LinAlgError, ValueError, FloatingPointError) as e:
        logger.debug(f"Bootstrap replicate failed: {e}")
        return None


def bootstrap_ci(
    dataset: Dataset,
    B: int,
    grid: TimeGrid,
    seed: int = DEFAULT_SEED,
    config: AssumptionConfig = MONOTONE,
    form: str = "corrected",
    covariates: Optional[Dict[str, Optional[Sequence[str]]]] = None,
    point: Optional[MrEstimate] = None,
    threads: int = 1,
    fast_bundle: Optional[NuisanceBundle] = None,
    progress: bool = True,
) -> BootstrapResult:
    """Arm-stratified case bootstrap with a full nuisance refit per replicate.

    fast_bundle reuses fixed nuisance models (approximation, flagged as fast).
    Percentile intervals are widened to include the point estimate when one is given.
    """
    if B < 2:
        raise ValueError("bootstrap needs B >= 2")
    covariates = covariates or {}
    seeds = np.random.SeedSequence(seed).spawn(B)
    worker = partial(_bootstrap_replicate, dataset=dataset, grid=grid, config=config, form=form,
                     covariates=covariates, bundle=fast_bundle)
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(tqdm(pool.map(worker, seeds), total=B, desc="Bootstrap", disable=not progress))
    else:
        results = [worker(s) for s in tqdm(seeds, total=B, desc="Bootstrap", disable=not progress)]

    ok = [r for r in results if r is not None]
    failures = B - len(ok)
    if failures / B > BOOTSTRAP_FAILURE_WARN:
        logger.warning(f"{failures} of {B} bootstrap replicates failed ({failures / B:.1%})")
    if not ok:
        raise SpceError("every bootstrap replicate failed")

    keys = ok[0].keys()
    replicates = {k: np.stack([r[k] for r in ok]) for k in keys}
    lower, upper = {}, {}
    for k, reps in replicates.items():
        lo, hi = np.nanpercentile(reps, INTERVAL_LEVELS, axis=0)
        if point is not None:
            estimate = point.flat()[k]
            lo, hi = np.minimum(lo, estimate), np.maximum(hi, estimate)
        lower[k], upper[k] = lo, hi
    result = BootstrapResult(replicates, lower, upper, failures, B, fast=fast_bundle is not None)
    if point is not None:
        point.intervals = {k: (lower[k], upper[k]) for k in keys}
        point.warnings["bootstrap_failures"] = failures
    return result


def run_weighting(
    dataset: Dataset,
    grid: Optional[TimeGrid] = None,
    config: AssumptionConfig = MONOTONE,
    B: int = 0,
    seed: int = DEFAULT_SEED,
    covariates: Optional[Dict[str, Optional[Sequence[str]]]] = None,
    form: str = "corrected",
    threads: int = 1,
    fast: bool = False,
) -> Tuple[MrEstimate, NuisanceBundle, Optional[BootstrapResult]]:
    """Fit nuisances, estimate, and optionally bootstrap."""
    grid = grid or TimeGrid.default_for(dataset)
    covariates = covariates or {}
    logger.info(f"Weighting engine: n={dataset.n}, zeta={config.zeta}, xi=({config.xi0}, {config.xi1}), B={B}")
    bundle = fit_nuisances(dataset, **covariates)
    estimate = mr_survival(bundle, dataset, grid, config, form)
    boot = None
    if B:
        boot = bootstrap_ci(dataset, B, grid, seed, config, form, covariates, estimate, threads,
                            fast_bundle=bundle if fast else None)
    return estimate, bundle, boot


# --- robustness to misspecification (simulation) ---

ROBUSTNESS_SCENARIOS = (
    "all_correct",
    "outcome_wrong",
    "censoring_wrong",
    "propensity_wrong",
    "principal_score_wrong",
    "principal_score_and_outcome_wrong",
)


def scenario_covariates(scenario: str, names: Sequence[str]) -> Dict[str, Optional[List[str]]]:
    """Covariate sets per model family for a misspecification scenario (columns by position)."""
    names = list(names)
    drop = lambda *idx: [n for j, n in enumerate(names) if j not in idx]  # noqa: E731
    if scenario == "all_correct" or scenario == "propensity_wrong":
        return {}
    if scenario == "outcome_wrong":
        return {"event_covariates": drop(2)}
    if scenario == "censoring_wrong":
        return {"censoring_covariates": []}
    if scenario == "principal_score_wrong":
        return {"ice_covariates": drop(3)}
    if scenario == "principal_score_and_outcome_wrong":
        return {"ice_covariates": drop(3), "event_covariates": drop(2)}
    raise ValueError(f"unknown scenario '{scenario}'")


def _wrong_propensity(bundle: NuisanceBundle, p: int) -> NuisanceBundle:
    """Swap the propensity model for a fixed, covariate-dependent wrong one."""
    coef = np.zeros(p + 1)
    coef[1] = 0.8
    wrong = LogisticFit(coef, True, float("nan"), 0, name="propensity_wrong")
    return NuisanceBundle(wrong, bundle.ice0, bundle.ice1, bundle.event, bundle.censoring,
                          {**bundle.columns, "propensity": None})


def _robustness_replicate(seed, spec, scenario: str, grid: TimeGrid):
    from trial_simulator import simulate

    trial = simulate(spec, seed)
    data = trial.dataset
    try:
        bundle = fit_nuisances(data, **scenario_covariates(scenario, data.covariate_names))
        if scenario == "propensity_wrong":
            bundle = _wrong_propensity(bundle, data.p)
        return mr_survival(bundle, data, grid).survival_raw
    except (SpceError, np.linalg.LinAlgError) as e:
        logger.debug(f"Robustness replicate failed: {e}")
        return None


def multiply_robustness_check(
    scenario: str,
    spec=None,
    n: int = 10000,
    replicates: int = 50,
    grid: Optional[TimeGrid] = None,
    seed: int = DEFAULT_SEED,
    threads: int = 1,
) -> Dict:
    """Max-over-grid absolute bias of each stratum curve, averaged over simulated replicates."""
    from trial_simulator import IGNORABLE_TRIAL, true_survival

    if scenario not in ROBUSTNESS_SCENARIOS:
        raise ValueError(f"unknown scenario '{scenario}'")
    spec = (spec or IGNORABLE_TRIAL).with_size(n)
    grid = grid or TimeGrid.equispaced(30.0, 31)
    truth = true_survival(spec, grid)
    seeds = np.random.SeedSequence(seed).spawn(replicates)
    worker = partial(_robustness_replicate, spec=spec, scenario=scenario, grid=grid)
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(tqdm(pool.map(worker, seeds), total=replicates, desc=scenario))
    else:
        results = [worker(s) for s in tqdm(seeds, total=replicates, desc=scenario)]
    ok = [r for r in results if r is not None]
    if not ok:
        raise SpceError(f"{scenario}: every replicate failed")

    bias = {}
    for key in ok[0]:
        mean_curve = np.mean([r[key] for r in ok], axis=0)
        bias[f"z{key[0]}_{key[1].value}"] = float(np.max(np.abs(mean_curve - truth[key])))
    logger.info(f"{scenario}: max bias {max(bias.values()):.4f} over {len(ok)} replicates")
    return {"scenario": scenario, "n": n, "replicates": len(ok), "failures": replicates - len(ok),
            "bias": bias, "max_bias": max(bias.values())}


def estimate_to_json(estimate: MrEstimate, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(estimate.to_dict(), indent=2))
    return path


def curves_to_csv(estimate: MrEstimate, path) -> Path:
    rows = []
    for (z, u), curve in estimate.survival.items():
        lo, hi = estimate.intervals.get(f"surv_z{z}_{u.value}", (np.full_like(curve, np.nan),) * 2)
        rows.append(pd.DataFrame({"arm": z, "stratum": u.value, "t": estimate.grid.points,
                                  "survival": curve, "lower": lo, "upper": hi}))
    path = Path(path)
    pd.concat(rows, ignore_index=True).to_csv(path, index=False)
    return path
