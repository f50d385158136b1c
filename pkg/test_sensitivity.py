# test_sensitivity.py
import numpy as np
import pytest

from errors import ZetaOutOfRangeError
from sensitivity import (
    XI_GRID,
    ZETA_GRID,
    assumption_sweep,
    proportions_table,
    smoothness,
    sweep_to_csv,
    xi_sweep,
    xi_tilt,
    xi_tilted_spce,
    zeta_max,
    zeta_scores,
    zeta_sweep,
)
from trial_data import StratumLabel, TimeGrid
from trial_simulator import REFERENCE_TRIAL, simulate
from weighting_engine import fit_nuisances, mr_survival

S01, S10 = StratumLabel.S01, StratumLabel.S10
GRID = TimeGrid.equispaced(30.0, 11)


@pytest.fixture(scope="module")
def bundle(pi_trial):
    return fit_nuisances(pi_trial.dataset)


@pytest.fixture(scope="module")
def sweep(pi_trial):
    return zeta_sweep(pi_trial.dataset, zetas=(0.0, 0.1, 0.2), grid=GRID, progress=False)


@pytest.mark.parametrize("zeta", ZETA_GRID)
def test_zeta_scores_sum_to_one(zeta, rng):
    p0 = rng.uniform(0.05, 0.4, size=50)
    p1 = p0 + rng.uniform(0.0, 0.3, size=50)
    scores = zeta_scores(p0, p1, zeta)
    np.testing.assert_allclose(scores.total, 1.0)
    assert S10 in scores.scores
    np.testing.assert_allclose(scores.scores[S10], zeta * scores.scores[S01])


def test_zeta_scores_range():
    with pytest.raises(ValueError):
        zeta_scores(np.array([0.2]), np.array([0.5]), 1.0)


def test_xi_tilt_is_one_at_origin():
    tilt = xi_tilt(np.log(1.5), GRID)
    assert tilt[0] == 1.0
    assert tilt[-1] == pytest.approx(1.5)
    assert len(XI_GRID) == 3


def test_zero_zeta_point_is_the_monotone_benchmark(sweep, pi_trial, bundle):
    benchmark = mr_survival(bundle, pi_trial.dataset, GRID)
    first = sweep.points[0]
    assert first.zeta == 0.0
    for key, curve in benchmark.survival_raw.items():
        np.testing.assert_array_equal(first.estimate.survival_raw[key], curve)


def test_zeta_sweep_frame(sweep, tmp_path):
    frame = sweep.to_frame()
    assert list(frame.columns) == ["sweep", "zeta", "xi0", "xi1", "stratum", "t", "estimate", "lo", "hi"]
    # three strata at zeta = 0, four afterwards
    assert len(frame) == (3 + 4 + 4) * len(GRID)
    assert frame["lo"].isna().all()
    assert sweep_to_csv(sweep, tmp_path / "sweep.csv").exists()
    table = proportions_table(sweep)
    for _, group in table.groupby("zeta"):
        assert group["proportion"].sum() == pytest.approx(1.0)


def test_zeta_sweep_bound_and_drift(sweep, pi_trial, bundle):
    assert sweep.bound == pytest.approx(zeta_max(bundle, pi_trial.dataset))
    drift = sweep.max_drift()
    assert set(drift) == {"00", "11"}
    assert all(np.isfinite(v) for v in drift.values())
    assert max(drift.values()) < 0.05
    jump, size = smoothness(sweep, S01)
    assert 0.0 <= jump and size > 0.0


def test_zeta_sweep_rejects_values_past_the_bound(pi_trial, bundle):
    bound = zeta_max(bundle, pi_trial.dataset)
    with pytest.raises(ZetaOutOfRangeError) as info:
        zeta_sweep(pi_trial.dataset, zetas=(0.0, bound + (1.0 - bound) / 2), grid=GRID, progress=False)
    assert info.value.bound == pytest.approx(bound)


def test_untilted_xi_equals_benchmark(pi_trial, bundle):
    benchmark = mr_survival(bundle, pi_trial.dataset, GRID)
    tilted = xi_tilted_spce(pi_trial.dataset, 0.0, 0.0, grid=GRID, bundle=bundle)
    for u in benchmark.strata:
        np.testing.assert_array_equal(tilted.spce[u], benchmark.spce[u])


def test_xi_must_be_finite(pi_trial, bundle):
    with pytest.raises(ValueError):
        xi_tilted_spce(pi_trial.dataset, np.inf, 0.0, grid=GRID, bundle=bundle)


def test_xi_sweep_starts_with_benchmark(pi_trial):
    result = xi_sweep(pi_trial.dataset, xi0_values=(np.log(1.2),), xi1_values=(np.log(0.9), np.log(1.5)),
                      grid=GRID, progress=False)
    assert [(p.xi0, p.xi1) for p in result.points][0] == (0.0, 0.0)
    assert len(result.points) == 3
    assert result.to_frame()["sweep"].eq("xi").all()


@pytest.mark.slow
def test_assumption_sweep_with_em(pi_trial):
    out = assumption_sweep(pi_trial.dataset, GRID, combinations=["mono", "mono_er"], em=True)
    assert set(out) == {"mono", "mono_er"}
    assert out["mono_er"]["assumptions"]["exclusion_restriction"] is True
    assert out["mono"]["engine"] == "mixture-em"


@pytest.mark.slow
def test_reference_design_is_stable_across_sweeps():
    d = simulate(REFERENCE_TRIAL, seed=8).dataset
    bound = zeta_max(fit_nuisances(d), d)
    zetas = [z for z in ZETA_GRID if z < bound]
    assert len(zetas) > 1
    assert max(zeta_sweep(d, zetas=zetas, grid=GRID, progress=False).max_drift().values()) < 0.05
    assert max(xi_sweep(d, grid=GRID, progress=False).max_drift().values()) < 0.05
