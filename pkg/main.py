# main.py
import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from config import (
    ASSUMPTION_COMBINATIONS,
    BOOTSTRAP_REPLICATES,
    DEFAULT_PRIOR,
    DEBUG,
    DEFAULT_SEED,
    GRID_POINTS,
    THREADS,
    VERSION,
    AssumptionConfig,
    PriorSpec,
)
from errors import SpceError
from mixture_engine import curves_to_csv as mixture_curves_to_csv
from mixture_engine import draws_to_csv, run_em, run_sampler, summary_to_json
from plotting import balance_plot, curves_from_summary, spce_panels, sweep_panels
from report import build_report
from sensitivity import XI_GRID, ZETA_GRID, proportions_table, sweep_to_csv, xi_sweep, zeta_sweep
from trial_data import ColumnMap, Dataset, TimeGrid, load_csv
from trial_simulator import LATENT_COLUMNS, REFERENCE_TRIAL, DgpSpec, calibrate_censoring, simulate, true_spce, truth_to_json, write_truth
from weighting_engine import curves_to_csv, estimate_to_json, profile_frame, run_weighting, weighted_smd

logger = logging.getLogger(__name__)

COMMANDS = ("simulate", "fit-mixture", "fit-weighting", "sensitivity", "report")


def configure_logging(out_dir: Path, debug: bool = False):
    out_dir.mkdir(parents=True, exist_ok=True)
    logging.basicConfig(
        level=logging.DEBUG if debug else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(out_dir / 'run.log'),
            logging.StreamHandler()
        ],
        force=True,
    )


def sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir: Path, args: argparse.Namespace, outputs: List[str], config: Dict,
                   inputs: Dict[str, str], started: float) -> Path:
    """The one manifest.json of a run directory."""
    manifest = {
        "command": args.command,
        "version": VERSION,
        "seed": args.seed,
        "arguments": {k: v for k, v in sorted(vars(args).items()) if k not in ("command", "handler")},
        "config": config,
        "inputs": {name: {"path": path, "sha256": sha256(Path(path))} for name, path in inputs.items()},
        "outputs": {name: sha256(out_dir / name) for name in sorted(outputs)},
        "elapsed_seconds": round(time.time() - started, 3),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, default=str))
    return path


def load_config(path: Optional[str]) -> Dict:
    if not path:
        return {}
    return json.loads(Path(path).read_text())


def split_names(value: Optional[str]) -> Optional[List[str]]:
    if value is None:
        return None
    return [name.strip() for name in value.split(",") if name.strip()]


def load_dataset(args: argparse.Namespace) -> Dataset:
    covariates = split_names(args.covariates)
    if covariates is None:
        header = pd.read_csv(args.data, nrows=0).columns
        core = {args.arm, args.ice, args.time, args.event, *LATENT_COLUMNS}
        covariates = [c for c in header if c not in core]
    return load_csv(args.data, ColumnMap(args.arm, args.ice, args.time, args.event, tuple(covariates)))


def time_grid(args: argparse.Namespace, dataset: Dataset) -> TimeGrid:
    if args.t_max:
        return TimeGrid.equispaced(args.t_max, args.grid_points)
    return TimeGrid.default_for(dataset, args.grid_points)


def assumptions_from(args: argparse.Namespace, config: Dict) -> AssumptionConfig:
    base = AssumptionConfig.model_validate(config.get("assumptions", {}))
    updates = {}
    if getattr(args, "monotonicity", None) is not None:
        updates["monotonicity"] = args.monotonicity
    if getattr(args, "er", None) is not None:
        updates["exclusion_restriction"] = args.er
    return AssumptionConfig.model_validate({**base.model_dump(), **updates})


def run_simulate(args: argparse.Namespace, out_dir: Path) -> Dict:
    config = load_config(args.config)
    spec = DgpSpec.model_validate(config) if config else REFERENCE_TRIAL
    if args.n:
        spec = spec.with_size(args.n)
    if args.calibrate_censoring:
        spec = calibrate_censoring(spec, args.calibrate_censoring)

    trial = simulate(spec, args.seed)
    trial.dataset.to_frame().to_csv(out_dir / "trial.csv", index=False, encoding="utf-8")
    write_truth(trial, out_dir / "truth.csv")
    (out_dir / "spec.json").write_text(spec.model_dump_json(indent=2))

    grid = TimeGrid.equispaced(args.t_max or float(np.quantile(trial.dataset.time, 0.99)), args.grid_points)
    truth = true_spce(spec, grid)
    truth_to_json(truth, out_dir / "true_curves.json")
    spce_panels(grid.points, {u.value: tau for u, tau in truth.spce.items()}, path=out_dir / "truth.svg",
                title="True SPCE")
    outputs = ["trial.csv", "truth.csv", "spec.json", "true_curves.json", "truth.svg"]
    return {"success": True, "outputs": outputs, "config": json.loads(spec.model_dump_json()), "inputs": {}}


def run_fit_mixture(args: argparse.Namespace, out_dir: Path) -> Dict:
    config = load_config(args.config)
    dataset = load_dataset(args)
    grid = time_grid(args, dataset)
    prior = PriorSpec.model_validate(config.get("prior", {})) if config.get("prior") else DEFAULT_PRIOR
    if args.all_assumptions:
        combos = dict(ASSUMPTION_COMBINATIONS)
    else:
        combos = {"run": assumptions_from(args, config)}

    outputs = []
    for name, assumptions in combos.items():
        suffix = "" if name == "run" else f"_{name}"
        if args.em:
            result = run_em(dataset, assumptions, grid, seed=args.seed)
            path = out_dir / f"em{suffix}.json"
            path.write_text(json.dumps(result.to_dict(), indent=2))
            outputs.append(path.name)
            continue
        summary, draws = run_sampler(dataset, assumptions, prior, grid, args.chains, args.iters, args.burnin,
                                     args.seed, args.thin, args.threads)
        if not summary.converged:
            logger.warning(f"{assumptions.label}: split R-hat above threshold; inspect the chains")
        summary_to_json(summary, out_dir / f"summary{suffix}.json")
        draws_to_csv(draws, out_dir / f"draws{suffix}.csv")
        mixture_curves_to_csv(summary, out_dir / f"curves{suffix}.csv")
        g, curves, bands = curves_from_summary(summary.to_dict())
        spce_panels(g, curves, bands, path=out_dir / f"spce{suffix}.svg", title=assumptions.label)
        outputs += [f"summary{suffix}.json", f"draws{suffix}.csv", f"curves{suffix}.csv", f"spce{suffix}.svg"]
    return {"success": True, "outputs": outputs, "inputs": {"data": args.data},
            "config": {"assumptions": {k: v.model_dump() for k, v in combos.items()}, "prior": prior.model_dump()}}


def covariate_sets(args: argparse.Namespace) -> Dict[str, Optional[List[str]]]:
    return {
        "propensity_covariates": split_names(args.e_covariates),
        "ice_covariates": split_names(args.pi_covariates),
        "event_covariates": split_names(args.t_covariates),
        "censoring_covariates": split_names(args.c_covariates),
    }


def run_fit_weighting(args: argparse.Namespace, out_dir: Path) -> Dict:
    config = load_config(args.config)
    dataset = load_dataset(args)
    grid = time_grid(args, dataset)
    assumptions = AssumptionConfig.model_validate(config.get("assumptions", {}))
    covariates = covariate_sets(args)
    estimate, bundle, _ = run_weighting(dataset, grid, assumptions, args.bootstrap, args.seed, covariates,
                                        args.form, args.threads)
    estimate_to_json(estimate, out_dir / "estimate.json")
    curves_to_csv(estimate, out_dir / "curves.csv")
    smd = weighted_smd(bundle, dataset)
    smd.to_csv(out_dir / "smd.csv", index=False)
    balance_plot(smd, out_dir / "balance.svg")
    profile_frame(bundle, dataset).to_csv(out_dir / "profiles.csv", index=False)
    g, curves, bands = curves_from_summary(estimate.to_dict())
    spce_panels(g, curves, bands, path=out_dir / "spce.svg", title="Weighting estimator")
    outputs = ["estimate.json", "curves.csv", "smd.csv", "profiles.csv", "balance.svg", "spce.svg"]
    return {"success": True, "outputs": outputs, "inputs": {"data": args.data},
            "config": {"assumptions": assumptions.model_dump(), "covariates": covariates, "form": args.form}}


def run_sensitivity(args: argparse.Namespace, out_dir: Path) -> Dict:
    dataset = load_dataset(args)
    grid = time_grid(args, dataset)
    covariates = covariate_sets(args)
    if args.xi0 is not None or args.xi1 is not None:
        xi0 = args.xi0 if args.xi0 is not None else list(XI_GRID)
        xi1 = args.xi1 if args.xi1 is not None else list(XI_GRID)
        result = xi_sweep(dataset, xi0, xi1, grid, args.bootstrap, args.seed, covariates, args.threads, args.fast)
        parameter = "xi"
    else:
        zetas = args.zeta if args.zeta is not None else list(ZETA_GRID)
        result = zeta_sweep(dataset, zetas, grid, args.bootstrap, args.seed, covariates, args.threads, args.fast)
        parameter = "zeta"
    sweep_to_csv(result, out_dir / "sweep.csv")
    proportions_table(result).to_csv(out_dir / "proportions.csv", index=False)
    sweep_panels(result.to_frame(), out_dir / "sweep.svg", parameter=parameter,
                 title=f"{parameter} sensitivity{' (fast bootstrap)' if result.fast else ''}")
    config = {"sweep": parameter, "bound": result.bound, "fast": result.fast, "covariates": covariates}
    return {"success": True, "outputs": ["sweep.csv", "proportions.csv", "sweep.svg"],
            "inputs": {"data": args.data}, "config": config}


def run_report(args: argparse.Namespace, out_dir: Path) -> Dict:
    build_report(args.runs, out_dir / "report.md")
    return {"success": True, "outputs": ["report.md"], "inputs": {}, "config": {"runs": args.runs}}


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--out-dir", required=True, help="directory for every output of this run")
    parser.add_argument("--seed", type=int, default=DEFAULT_SEED)
    parser.add_argument("--threads", type=int, default=THREADS)
    parser.add_argument("--config", help="JSON configuration file")
    parser.add_argument("--debug", action="store_true", default=DEBUG)


def _add_data(parser: argparse.ArgumentParser):
    parser.add_argument("--data", required=True, help="trial CSV")
    parser.add_argument("--covariates", help="comma-separated covariate columns (default: all non-core columns)")
    parser.add_argument("--arm", default="Z")
    parser.add_argument("--ice", default="D")
    parser.add_argument("--time", default="time")
    parser.add_argument("--event", default="event")
    parser.add_argument("--grid-points", type=int, default=GRID_POINTS)
    parser.add_argument("--t-max", type=float)


def _add_covariate_sets(parser: argparse.ArgumentParser):
    parser.add_argument("--pi-covariates", help="covariates of the ICE (principal score) models")
    parser.add_argument("--e-covariates", help="covariates of the propensity model")
    parser.add_argument("--c-covariates", help="covariates of the censoring models")
    parser.add_argument("--t-covariates", help="covariates of the event-time models")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spce", description="Survival principal causal effects toolkit")
    parser.add_argument("--version", action="version", version=VERSION)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a trial with latent truth")
    _add_common(p)
    p.add_argument("--n", type=int, help="total sample size (arm ratio kept)")
    p.add_argument("--calibrate-censoring", type=float, help="target censoring fraction")
    p.add_argument("--grid-points", type=int, default=GRID_POINTS)
    p.add_argument("--t-max", type=float)
    p.set_defaults(handler=run_simulate)

    p = sub.add_parser("fit-mixture", help="Bayesian mixture model (or EM)")
    _add_common(p)
    _add_data(p)
    p.add_argument("--monotonicity", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--er", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--all-assumptions", action="store_true", help="run all four monotonicity/ER combinations")
    p.add_argument("--chains", type=int, default=4)
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--burnin", type=int)
    p.add_argument("--thin", type=int, default=1)
    p.add_argument("--em", action="store_true", help="EM point estimates instead of sampling")
    p.set_defaults(handler=run_fit_mixture)

    p = sub.add_parser("fit-weighting", help="multiply robust weighting estimator")
    _add_common(p)
    _add_data(p)
    _add_covariate_sets(p)
    p.add_argument("--bootstrap", type=int, default=BOOTSTRAP_REPLICATES)
    p.add_argument("--form", choices=("corrected", "printed"), default="corrected")
    p.set_defaults(handler=run_fit_weighting)

    p = sub.add_parser("sensitivity", help="zeta or (xi0, xi1) sensitivity sweep")
    _add_common(p)
    _add_data(p)
    _add_covariate_sets(p)
    p.add_argument("--zeta", type=float, nargs="+")
    p.add_argument("--xi0", type=float, nargs="+")
    p.add_argument("--xi1", type=float, nargs="+")
    p.add_argument("--bootstrap", type=int, default=0)
    p.add_argument("--fast", action="store_true", help="reuse point-estimate nuisances in the bootstrap")
    p.set_defaults(handler=run_sensitivity)

    p = sub.add_parser("report", help="Markdown report over finished runs")
    _add_common(p)
    p.add_argument("runs", nargs="+", help="run directories")
    p.set_defaults(handler=run_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "burnin", "unset") is None:
        args.burnin = args.iters // 2
    out_dir = Path(args.out_dir)
    configure_logging(out_dir, args.debug)
    logger.info(f"spce {VERSION}: {args.command} -> {out_dir}")
    started = time.time()

    try:
        result = args.handler(args, out_dir)
        write_manifest(out_dir, args, result["outputs"], result["config"], result["inputs"], started)
        logger.info(f"{args.command} complete: {result['outputs']}")
    except (SpceError, ValueError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        result = {"success": False, "error": str(e), "type": type(e).__name__}
    except Exception as e:
        logger.exception(f"{args.command} failed unexpectedly")
        result = {"success": False, "error": str(e), "type": type(e).__name__}

    if not result["success"]:
        (out_dir / "error.json").write_text(json.dumps(result, indent=2))
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
