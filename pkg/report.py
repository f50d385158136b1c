# report.py
import json
import logging
from pathlib import Path
from typing import Dict, List, Sequence

import pandas as pd

from errors import ReportInputError

logger = logging.getLogger(__name__)

REPORT_SECTIONS = ("simulate", "fit-mixture", "fit-weighting", "sensitivity")


def _percent(value: float) -> str:
    return f"{100 * value:.1f}%"


def _load_run(run_dir: Path) -> Dict:
    manifest_path = run_dir / "manifest.json"
    if not run_dir.is_dir():
        raise ReportInputError(f"{run_dir} is not a directory")
    if not manifest_path.exists():
        found = sorted(p.name for p in run_dir.iterdir())
        raise ReportInputError(f"{run_dir} has no manifest.json; found: {found or 'nothing'}")
    manifest = json.loads(manifest_path.read_text())
    missing = [name for name in manifest.get("outputs", {}) if not (run_dir / name).exists()]
    if missing:
        found = sorted(p.name for p in run_dir.iterdir())
        raise ReportInputError(f"{run_dir} is missing {missing}; found: {found}")
    return manifest


def _proportion_rows(payload: Dict) -> List[str]:
    rows = []
    for stratum, value in payload["proportions"].items():
        if isinstance(value, dict):
            rows.append(f"| {stratum} | {_percent(value['mean'])} | "
                        f"{_percent(value['lower'])} – {_percent(value['upper'])} |")
        else:
            rows.append(f"| {stratum} | {_percent(value)} | |")
    return rows


def _profile_table(profiles: Dict[str, Dict[str, str]], covariates: Sequence[str]) -> List[str]:
    """Covariate rows by stratum columns; cells are preformatted."""
    strata = list(profiles)
    lines = ["Covariate profile by stratum:", "",
             "| covariate | " + " | ".join(strata) + " |", "|---|" + "---|" * len(strata)]
    for name in covariates:
        lines.append(f"| {name} | " + " | ".join(profiles[s].get(name, "") for s in strata) + " |")
    return lines + [""]


def _mixture_profiles(payload: Dict) -> List[str]:
    profiles = payload.get("profiles") or {}
    if not profiles:
        return []
    cells, covariates = {}, []
    for stratum, band in profiles.items():
        covariates = covariates or band["covariates"]
        cells[stratum] = {name: f"{m:.2f} ({lo:.2f} – {hi:.2f})"
                          for name, m, lo, hi in zip(band["covariates"], band["mean"], band["lower"], band["upper"])}
    return _profile_table(cells, covariates)


def _weighting_profiles(path: Path) -> List[str]:
    frame = pd.read_csv(path, dtype={"stratum": str})
    if frame.empty:
        return []
    cells = {}
    for stratum, group in frame.groupby("stratum", sort=False):
        cells[str(stratum)] = {row.covariate: f"{row.mean:.2f} (SD {row.sd:.2f})" for row in group.itertuples()}
    return _profile_table(cells, list(dict.fromkeys(frame["covariate"])))


def _mixture_section(run_dir: Path, manifest: Dict) -> List[str]:
    lines = [f"## Mixture model: `{run_dir.name}`", ""]
    for name in sorted(manifest["outputs"]):
        if not (name.startswith("summary") and name.endswith(".json")):
            continue
        payload = json.loads((run_dir / name).read_text())
        assumptions = payload["assumptions"]
        label = (f"monotonicity={'yes' if assumptions['monotonicity'] else 'no'}, "
                 f"ER={'yes' if assumptions['exclusion_restriction'] else 'no'}")
        lines += [f"### {label}", "", "| stratum | proportion | 95% interval |", "|---|---|---|"]
        lines += _proportion_rows(payload)
        if "converged" in payload:
            worst = max((v for v in payload["rhat"].values() if v == v), default=float("nan"))
            lines += ["", f"Largest split R-hat: {worst:.3f} ({'converged' if payload['converged'] else 'NOT converged'})"]
        lines.append("")
        lines += _mixture_profiles(payload)
    lines += _figures(run_dir, manifest)
    return lines


def _weighting_section(run_dir: Path, manifest: Dict) -> List[str]:
    payload = json.loads((run_dir / "estimate.json").read_text())
    lines = [f"## Weighting estimator: `{run_dir.name}`", "",
             "| stratum | proportion | 95% interval |", "|---|---|---|"]
    intervals = payload.get("intervals", {})
    for stratum, value in payload["proportions"].items():
        interval = intervals.get(f"prop_{stratum}")
        ci = f"{_percent(interval['lower'][0])} – {_percent(interval['upper'][0])}" if interval else ""
        lines.append(f"| {stratum} | {_percent(value)} | {ci} |")
    if payload.get("warnings"):
        lines += ["", "Warnings: " + ", ".join(f"{k}={v}" for k, v in sorted(payload["warnings"].items()))]
    if "smd.csv" in manifest["outputs"]:
        smd = pd.read_csv(run_dir / "smd.csv", dtype={"stratum": str})
        worst = smd.assign(abs_w=smd["weighted"].abs()).groupby("stratum")["abs_w"].max()
        lines += ["", "| stratum | max weighted abs SMD |", "|---|---|"]
        lines += [f"| {s} | {v:.3f} |" for s, v in worst.items()]
    if "profiles.csv" in manifest["outputs"]:
        lines += [""] + _weighting_profiles(run_dir / "profiles.csv")
    lines.append("")
    lines += _figures(run_dir, manifest)
    return lines


def _sensitivity_section(run_dir: Path, manifest: Dict) -> List[str]:
    frame = pd.read_csv(run_dir / "sweep.csv", dtype={"stratum": str})
    kind = frame["sweep"].iloc[0]
    keys = ["zeta"] if kind == "zeta" else ["xi0", "xi1"]
    tail = frame.sort_values("t").groupby(keys + ["stratum"])["estimate"].last().unstack("stratum")
    lines = [f"## Sensitivity ({kind}): `{run_dir.name}`", "",
             "SPCE at the last grid time:", "",
             "| " + " | ".join(keys + list(tail.columns)) + " |",
             "|" + "---|" * (len(keys) + len(tail.columns))]
    for index, row in tail.iterrows():
        index = index if isinstance(index, tuple) else (index,)
        lines.append("| " + " | ".join([f"{v:.3f}" for v in index] + [f"{v:.3f}" for v in row]) + " |")
    lines.append("")
    lines += _figures(run_dir, manifest)
    return lines


def _simulate_section(run_dir: Path, manifest: Dict) -> List[str]:
    lines = [f"## Simulated trial: `{run_dir.name}`", ""]
    truth_path = run_dir / "true_curves.json"
    if truth_path.exists():
        truth = json.loads(truth_path.read_text())
        lines += ["| stratum | true proportion |", "|---|---|"]
        lines += [f"| {s} | {_percent(v)} |" for s, v in truth["proportions"].items()]
        lines.append("")
    lines += _figures(run_dir, manifest)
    return lines


def _figures(run_dir: Path, manifest: Dict) -> List[str]:
    return [f"![{name}]({run_dir.name}/{name})" for name in sorted(manifest["outputs"]) if name.endswith(".svg")] + [""]


SECTION_BUILDERS = {
    "simulate": _simulate_section,
    "fit-mixture": _mixture_section,
    "fit-weighting": _weighting_section,
    "sensitivity": _sensitivity_section,
}


def build_report(run_dirs: Sequence, out_path) -> Path:
    """Markdown report over finished run directories, one section per run, in the given order."""
    if not run_dirs:
        raise ReportInputError("no run directories given")
    lines = ["# Survival principal causal effects report", ""]
    for run_dir in map(Path, run_dirs):
        manifest = _load_run(run_dir)
        command = manifest.get("command")
        builder = SECTION_BUILDERS.get(command)
        if builder is None:
            raise ReportInputError(f"{run_dir}: cannot report on command '{command}'")
        lines += builder(run_dir, manifest)
    out_path = Path(out_path)
    out_path.write_text("\n".join(lines).rstrip() + "\n", encoding="utf-8")
    logger.info(f"Report written to {out_path}")
    return out_path
