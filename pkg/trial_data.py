# trial_data.py
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import GRID_POINTS, AssumptionConfig
from errors import DataParseError, SchemaError

logger = logging.getLogger(__name__)

Cell = Tuple[int, int]
CELLS: Tuple[Cell, ...] = ((0, 0), (0, 1), (1, 0), (1, 1))


class StratumLabel(Enum):
    """Principal stratum U = (D(0), D(1))."""
    S00 = "00"
    S01 = "01"
    S10 = "10"
    S11 = "11"

    @property
    def d0(self) -> int:
        return int(self.value[0])

    @property
    def d1(self) -> int:
        return int(self.value[1])

    def ice_under(self, arm: int) -> int:
        return self.d1 if arm == 1 else self.d0

    @classmethod
    def parse(cls, value) -> "StratumLabel":
        if isinstance(value, StratumLabel):
            return value
        text = str(value).upper().lstrip("S")
        return cls(text.zfill(2))


ALL_STRATA: Tuple[StratumLabel, ...] = (StratumLabel.S00, StratumLabel.S01, StratumLabel.S10, StratumLabel.S11)


def strata_for(config: AssumptionConfig) -> Tuple[StratumLabel, ...]:
    """Strata allowed by the configuration (S10 dropped under monotonicity)."""
    if config.monotonicity:
        return tuple(s for s in ALL_STRATA if s is not StratumLabel.S10)
    return ALL_STRATA


def admissible_strata(arm: int, ice: int, config: AssumptionConfig) -> Tuple[StratumLabel, ...]:
    """Strata compatible with an observed (Z, D) cell."""
    return tuple(s for s in strata_for(config) if s.ice_under(arm) == ice)


def admissibility_mask(arm: np.ndarray, ice: np.ndarray, strata: Sequence[StratumLabel]) -> np.ndarray:
    """Boolean n x K matrix: record i may belong to strata[k]."""
    arm = np.asarray(arm)
    ice = np.asarray(ice)
    mask = np.zeros((arm.shape[0], len(strata)), dtype=bool)
    for k, s in enumerate(strata):
        mask[:, k] = np.where(arm == 1, s.d1, s.d0) == ice
    return mask


@dataclass(frozen=True)
class TrialRecord:
    arm: int
    ice: int
    time: float
    event: int
    covariates: Tuple[float, ...]


@dataclass(frozen=True)
class TimeGrid:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or pts.size == 0:
            raise ValueError("time grid must be a nonempty 1-d sequence")
        if np.any(pts < 0) or np.any(np.diff(pts) <= 0):
            raise ValueError("time grid must be nonnegative and strictly increasing")
        if pts[-1] <= 0:
            raise ValueError("time grid must end at a positive time")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    @property
    def t_max(self) -> float:
        return float(self.points[-1])

    def __len__(self) -> int:
        return self.points.size

    @classmethod
    def equispaced(cls, t_max: float, m: int) -> "TimeGrid":
        if m < 1:
            raise ValueError("grid needs at least one point")
        if m == 1:
            return cls(np.array([float(t_max)]))
        return cls(np.linspace(0.0, float(t_max), m))

    @classmethod
    def default_for(cls, dataset: "Dataset", m: int = GRID_POINTS) -> "TimeGrid":
        return cls.equispaced(float(np.quantile(dataset.time, 0.99)), m)


def _frozen(a: np.ndarray, dtype) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Dataset:
    """Immutable trial dataset stored column-wise."""
    arm: np.ndarray
    ice: np.ndarray
    time: np.ndarray
    event: np.ndarray
    X: np.ndarray
    covariate_names: Tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        n = np.asarray(self.time).shape[0]
        if X.ndim == 1:
            X = X.reshape(n, -1)
        names = tuple(self.covariate_names) or tuple(f"x{j + 1}" for j in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise SchemaError(f"{len(names)} covariate names for {X.shape[1]} columns")
        for col in (self.arm, self.ice, self.event):
            if np.asarray(col).shape[0] != n:
                raise SchemaError("columns have different lengths")
        object.__setattr__(self, "arm", _frozen(self.arm, np.int64))
        object.__setattr__(self, "ice", _frozen(self.ice, np.int64))
        object.__setattr__(self, "time", _frozen(self.time, float))
        object.__setattr__(self, "event", _frozen(self.event, np.int64))
        object.__setattr__(self, "X", _frozen(X, float))
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return int(self.time.shape[0])

    @property
    def p(self) -> int:
        return int(self.X.shape[1])

    def __len__(self) -> int:
        return self.n

    @property
    def records(self) -> Iterator[TrialRecord]:
        for i in range(self.n):
            yield TrialRecord(int(self.arm[i]), int(self.ice[i]), float(self.time[i]),
                              int(self.event[i]), tuple(float(v) for v in self.X[i]))

    @classmethod
    def from_records(cls, records: Sequence[TrialRecord], covariate_names: Sequence[str] = ()) -> "Dataset":
        if not records:
            p = len(covariate_names)
            return cls(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0), np.zeros((0, p)), tuple(covariate_names))
        dims = {len(r.covariates) for r in records}
        if len(dims) != 1:
            raise SchemaError("covariate dimension differs across records")
        return cls(
            arm=np.array([r.arm for r in records]),
            ice=np.array([r.ice for r in records]),
            time=np.array([r.time for r in records]),
            event=np.array([r.event for r in records]),
            X=np.array([r.covariates for r in records], dtype=float).reshape(len(records), dims.pop()),
            covariate_names=tuple(covariate_names),
        )

    def cell_mask(self, arm: int, ice: int) -> np.ndarray:
        return (self.arm == arm) & (self.ice == ice)

    def subset(self, mask: np.ndarray) -> "Dataset":
        return self.take(np.flatnonzero(mask))

    def take(self, indices: np.ndarray) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.arm[idx], self.ice[idx], self.time[idx], self.event[idx], self.X[idx], self.covariate_names)

    def resample(self, indices: np.ndarray) -> "Dataset":
        """Bootstrap copy; indices may repeat."""
        return self.take(indices)

    def columns(self, names: Optional[Sequence[str]]) -> np.ndarray:
        """Covariate columns by name (None = all)."""
        if names is None:
            return self.X
        index = {name: j for j, name in enumerate(self.covariate_names)}
        missing = [name for name in names if name not in index]
        if missing:
            raise SchemaError(f"unknown covariates: {missing}")
        return self.X[:, [index[name] for name in names]]

    def to_frame(self, column_map: Optional["ColumnMap"] = None) -> pd.DataFrame:
        cm = column_map or ColumnMap(covariates=tuple(self.covariate_names))
        frame = pd.DataFrame({cm.arm: self.arm, cm.ice: self.ice, cm.time: self.time, cm.event: self.event})
        for j, name in enumerate(cm.covariates or self.covariate_names):
            frame[name] = self.X[:, j]
        return frame


@dataclass(frozen=True)
class ColumnMap:
    arm: str = "Z"
    ice: str = "D"
    time: str = "time"
    event: str = "event"
    covariates: Tuple[str, ...] = ()


def _binary_column(frame: pd.DataFrame, name: str) -> np.ndarray:
    values = pd.to_numeric(frame[name], errors="coerce")
    bad = ~values.isin([0, 1])
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0]) + 1
        raise DataParseError(f"column '{name}' must be 0 or 1, got {frame[name].iloc[row - 1]!r}", row)
    return values.to_numpy(dtype=np.int64)


def load_csv(path, column_map: ColumnMap) -> Dataset:
    """Read a trial CSV. Row numbers in errors count data rows from 1."""
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    required = [column_map.arm, column_map.ice, column_map.time, column_map.event, *column_map.covariates]
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise SchemaError(f"missing columns in {path}: {missing}")

    arm = _binary_column(frame, column_map.arm)
    ice = _binary_column(frame, column_map.ice)
    event = _binary_column(frame, column_map.event)

    time = pd.to_numeric(frame[column_map.time], errors="coerce")
    bad = time.isna() | (time < 0)
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0]) + 1
        raise DataParseError(f"time must be a nonnegative number, got {frame[column_map.time].iloc[row - 1]!r}", row)

    X = np.empty((len(frame), len(column_map.covariates)))
    for j, name in enumerate(column_map.covariates):
        col = pd.to_numeric(frame[name], errors="coerce")
        if col.isna().any():
            row = int(np.flatnonzero(col.isna().to_numpy())[0]) + 1
            raise DataParseError(f"covariate '{name}' is missing or not numeric", row)
        X[:, j] = col.to_numpy(dtype=float)

    dataset = Dataset(arm, ice, time.to_numpy(dtype=float), event, X, tuple(column_map.covariates))
    logger.info(f"Loaded {dataset.n} records with {dataset.p} covariates from {path}")
    return dataset


def write_csv(dataset: Dataset, path, column_map: Optional[ColumnMap] = None, extra: Optional[Dict[str, np.ndarray]] = None) -> Path:
    frame = dataset.to_frame(column_map)
    for name, values in (extra or {}).items():
        frame[name] = values
    path = Path(path)
    frame.to_csv(path, index=False, encoding="utf-8")
    return path


def cell_counts(dataset: Dataset) -> Dict[Cell, int]:
    return {cell: int(np.sum(dataset.cell_mask(*cell))) for cell in CELLS}


def dichotomize_ice(times_off_treatment, cutoff: float, missing_policy: str = "treat_as_event") -> np.ndarray:
    """D = 1 when time off treatment is shorter than the cutoff; missing counts as D = 1."""
    if cutoff <= 0:
        raise ValueError("cutoff must be positive")
    if missing_policy != "treat_as_event":
        raise ValueError(f"unknown missing_policy '{missing_policy}'")
    values = pd.to_numeric(pd.Series(list(times_off_treatment), dtype=object), errors="coerce").to_numpy(dtype=float)
    missing = np.isnan(values)
    if np.any(values[~missing] < 0):
        row = int(np.flatnonzero((values < 0) & ~missing)[0]) + 1
        raise DataParseError("time off treatment must be nonnegative", row)
    ice = np.ones(values.shape[0], dtype=np.int64)
    ice[~missing] = (values[~missing] < cutoff).astype(np.int64)
    if missing.any():
        logger.info(f"{int(missing.sum())} missing time-off values coded as D=1")
    return ice


def dataset_summary(dataset: Dataset) -> Dict:
    counts = cell_counts(dataset)
    return {
        "n": dataset.n,
        "p": dataset.p,
        "covariates": list(dataset.covariate_names),
        "cells": {f"Z{z}_D{d}": c for (z, d), c in counts.items()},
        "events": int(dataset.event.sum()),
        "censored": int(dataset.n - dataset.event.sum()),
        "events_by_cell": {f"Z{z}_D{d}": int(dataset.event[dataset.cell_mask(z, d)].sum()) for z, d in CELLS},
    }


def summary_to_json(dataset: Dataset, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(dataset_summary(dataset), indent=2))
    return path


def design_matrix(X: np.ndarray) -> np.ndarray:
    """[1, X]; every regression design in the toolkit goes through here."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    return np.column_stack([np.ones(X.shape[0]), X])


def standardize(X: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Center and scale columns; constant columns keep scale 1."""
    X = np.asarray(X, dtype=float)
    center = X.mean(axis=0) if X.shape[0] else np.zeros(X.shape[1])
    scale = X.std(axis=0) if X.shape[0] else np.ones(X.shape[1])
    scale = np.where(scale > 0, scale, 1.0)
    return (X - center) / scale, center, scale


def stratum_names(strata: Sequence[StratumLabel]) -> List[str]:
    return [s.value for s in strata]
