# sensitivity.py
import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from config import ASSUMPTION_COMBINATIONS, DEFAULT_PRIOR, DEFAULT_SEED, MONOTONE, POSITIVITY_EPS, AssumptionConfig, PriorSpec
from errors import ZetaOutOfRangeError
from mixture_engine import run_em, run_sampler
from trial_data import Dataset, StratumLabel, TimeGrid
from weighting_engine import (
    BootstrapResult,
    MrEstimate,
    NuisanceBundle,
    bootstrap_ci,
    fit_nuisances,
    ice_rates,
    mr_survival,
    score_map,
    zeta_bound,
)

logger = logging.getLogger(__name__)

ZETA_GRID = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)
XI_GRID = (float(np.log(0.9)), float(np.log(1.2)), float(np.log(1.5)))


@dataclass(frozen=True)
class ZetaScores:
    """Principal scores when pi_10(X) = zeta * pi_01(X)."""
    zeta: float
    scores: Dict[StratumLabel, np.ndarray]

    @property
    def total(self) -> np.ndarray:
        return sum(self.scores.values())


def zeta_scores(p0: np.ndarray, p1: np.ndarray, zeta: float) -> ZetaScores:
    if not 0.0 <= zeta < 1.0:
        raise ValueError("zeta must lie in [0, 1)")
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    scores = {u: a + b0 * p0 + b1 * p1 for u, (a, b0, b1) in score_map(zeta).items()}
    if zeta > 0:
        return ZetaScores(zeta, scores)
    return ZetaScores(zeta, {**scores, StratumLabel.S10: np.zeros_like(p0)})


def zeta_max(bundle: NuisanceBundle, dataset: Dataset, eps: float = POSITIVITY_EPS) -> float:
    """Upper end of the admissible zeta range for these data."""
    P0, P1 = ice_rates(bundle, dataset, eps)
    return zeta_bound(P0, P1)


def xi_tilt(xi: float, grid: TimeGrid) -> np.ndarray:
    """exp(xi * t / t_max) on the grid; 1 at t = 0."""
    return np.exp(xi * grid.points / grid.t_max)


@dataclass
class SweepPoint:
    zeta: float
    xi0: float
    xi1: float
    estimate: MrEstimate
    bootstrap: Optional[BootstrapResult] = None


@dataclass
class SweepResult:
    kind: str
    grid: TimeGrid
    points: List[SweepPoint] = field(default_factory=list)
    fast: bool = False
    bound: Optional[float] = None

    def to_frame(self) -> pd.DataFrame:
        """Long format: one row per (sweep point, stratum, t)."""
        frames = []
        for point in self.points:
            for u, tau in point.estimate.spce.items():
                lo, hi = point.estimate.intervals.get(f"spce_{u.value}", (np.full_like(tau, np.nan),) * 2)
                frames.append(pd.DataFrame({
                    "sweep": self.kind,
                    "zeta": point.zeta,
                    "xi0": point.xi0,
                    "xi1": point.xi1,
                    "stratum": u.value,
                    "t": self.grid.points,
                    "estimate": tau,
                    "lo": lo,
                    "hi": hi,
                }))
        return pd.concat(frames, ignore_index=True)

    def max_drift(self, strata: Sequence[StratumLabel] = (StratumLabel.S00, StratumLabel.S11)) -> Dict[str, float]:
        """Largest |tau(point) - tau(first point)| over the sweep, per stratum."""
        reference = self.points[0].estimate.spce
        drift = {}
        for u in strata:
            values = [np.max(np.abs(p.estimate.spce[u] - reference[u])) for p in self.points if u in p.estimate.spce]
            drift[u.value] = float(max(values)) if values else float("nan")
        return drift


def _run_point(dataset, grid, config, bundle, B, seed, covariates, threads, fast, progress):
    estimate = mr_survival(bundle, dataset, grid, config)
    boot = None
    if B:
        boot = bootstrap_ci(dataset, B, grid, seed, config, covariates=covariates, point=estimate,
                            threads=threads, fast_bundle=bundle if fast else None, progress=progress)
    return estimate, boot


def zeta_sweep(
    dataset: Dataset,
    zetas: Sequence[float] = ZETA_GRID,
    grid: Optional[TimeGrid] = None,
    B: int = 0,
    seed: int = DEFAULT_SEED,
    covariates: Optional[Dict] = None,
    threads: int = 1,
    fast: bool = False,
    progress: bool = True,
) -> SweepResult:
    """Weighting estimates under pi_10 = zeta * pi_01 for each zeta; zeta = 0 is the monotone benchmark.

    Every sweep point bootstraps with the same seed.
    """
    grid = grid or TimeGrid.default_for(dataset)
    covariates = covariates or {}
    bundle = fit_nuisances(dataset, **covariates)
    bound = zeta_max(bundle, dataset)
    too_large = [z for z in zetas if z >= bound]
    if too_large:
        logger.error(f"zeta values {too_large} exceed the admissible bound {bound:.4f}")
        raise ZetaOutOfRangeError(max(too_large), bound)
    logger.info(f"Zeta sweep over {list(zetas)} (bound {bound:.4f}), B={B}{' fast' if fast else ''}")

    result = SweepResult("zeta", grid, fast=fast, bound=bound)
    for zeta in tqdm(zetas, desc="zeta sweep", disable=not progress):
        config = MONOTONE if zeta == 0 else AssumptionConfig(monotonicity=False, zeta=zeta)
        estimate, boot = _run_point(dataset, grid, config, bundle, B, seed, covariates, threads, fast, progress)
        result.points.append(SweepPoint(zeta, 0.0, 0.0, estimate, boot))
    return result


def xi_tilted_spce(
    dataset: Dataset,
    xi0: float,
    xi1: float,
    grid: Optional[TimeGrid] = None,
    B: int = 0,
    seed: int = DEFAULT_SEED,
    covariates: Optional[Dict] = None,
    bundle: Optional[NuisanceBundle] = None,
    threads: int = 1,
    fast: bool = False,
) -> MrEstimate:
    """Weighting estimate with the principal-ignorability tilt (xi0, xi1) under monotonicity."""
    if not (np.isfinite(xi0) and np.isfinite(xi1)):
        raise ValueError("xi0 and xi1 must be finite")
    grid = grid or TimeGrid.default_for(dataset)
    covariates = covariates or {}
    bundle = bundle or fit_nuisances(dataset, **covariates)
    config = AssumptionConfig(xi0=xi0, xi1=xi1)
    estimate, _ = _run_point(dataset, grid, config, bundle, B, seed, covariates, threads, fast, progress=False)
    return estimate


def xi_sweep(
    dataset: Dataset,
    xi0_values: Sequence[float] = XI_GRID,
    xi1_values: Sequence[float] = XI_GRID,
    grid: Optional[TimeGrid] = None,
    B: int = 0,
    seed: int = DEFAULT_SEED,
    covariates: Optional[Dict] = None,
    threads: int = 1,
    fast: bool = False,
    progress: bool = True,
    include_benchmark: bool = True,
) -> SweepResult:
    """Product grid over (xi0, xi1); the untilted benchmark is the first point when included."""
    grid = grid or TimeGrid.default_for(dataset)
    covariates = covariates or {}
    bundle = fit_nuisances(dataset, **covariates)
    pairs = list(itertools.product(xi0_values, xi1_values))
    if include_benchmark and (0.0, 0.0) not in pairs:
        pairs.insert(0, (0.0, 0.0))
    logger.info(f"Xi sweep over {len(pairs)} (xi0, xi1) pairs, B={B}")

    result = SweepResult("xi", grid, fast=fast)
    for xi0, xi1 in tqdm(pairs, desc="xi sweep", disable=not progress):
        config = AssumptionConfig(xi0=xi0, xi1=xi1)
        estimate, boot = _run_point(dataset, grid, config, bundle, B, seed, covariates, threads, fast, progress)
        result.points.append(SweepPoint(0.0, xi0, xi1, estimate, boot))
    return result


def assumption_sweep(
    dataset: Dataset,
    grid: Optional[TimeGrid] = None,
    combinations: Optional[Sequence[str]] = None,
    prior: PriorSpec = DEFAULT_PRIOR,
    chains: int = 4,
    iters: int = 2000,
    burnin: int = 1000,
    seed: int = DEFAULT_SEED,
    threads: int = 1,
    em: bool = False,
) -> Dict[str, Dict]:
    """Mixture engine under each monotonicity / ER combination; serialized summaries keyed by name."""
    grid = grid or TimeGrid.default_for(dataset)
    names = list(combinations or ASSUMPTION_COMBINATIONS)
    out = {}
    for name in names:
        config = ASSUMPTION_COMBINATIONS[name]
        logger.info(f"Assumption sweep: {name} ({config.label})")
        if em:
            out[name] = run_em(dataset, config, grid, seed=seed).to_dict()
        else:
            summary, _ = run_sampler(dataset, config, prior, grid, chains, iters, burnin, seed, threads=threads)
            out[name] = summary.to_dict()
    return out


def sweep_to_csv(result: SweepResult, path) -> Path:
    path = Path(path)
    result.to_frame().to_csv(path, index=False)
    return path


def proportions_table(result: SweepResult) -> pd.DataFrame:
    rows = []
    for point in result.points:
        for u, value in point.estimate.proportions.items():
            rows.append({"zeta": point.zeta, "xi0": point.xi0, "xi1": point.xi1, "stratum": u.value,
                         "proportion": value})
    return pd.DataFrame(rows)


def smoothness(result: SweepResult, stratum: StratumLabel) -> Tuple[float, float]:
    """(largest jump between neighbouring sweep points, largest curve value) for one stratum."""
    curves = [p.estimate.spce[stratum] for p in result.points if stratum in p.estimate.spce]
    if len(curves) < 2:
        return 0.0, float(np.max(np.abs(curves[0]))) if curves else 0.0
    steps = [float(np.max(np.abs(b - a))) for a, b in zip(curves, curves[1:])]
    return max(steps), float(max(np.max(np.abs(c)) for c in curves))
