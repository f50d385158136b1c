# test_trial_simulator.py
import json

import numpy as np
import pytest
from pydantic import ValidationError

from trial_data import ALL_STRATA, ColumnMap, StratumLabel, TimeGrid, load_csv
from trial_simulator import (
    COVARIATE_NAMES,
    IGNORABLE_TRIAL,
    REFERENCE_TRIAL,
    DgpSpec,
    TrueCensoringSurvival,
    TrueIceProbability,
    calibrate_censoring,
    draw_covariates,
    expected_censoring_fraction,
    expected_strata_proportions,
    load_spec,
    simulate,
    strata_probabilities,
    true_spce,
    truth_to_json,
    weibull_inverse,
    write_truth,
)

S00, S01, S10, S11 = StratumLabel.S00, StratumLabel.S01, StratumLabel.S10, StratumLabel.S11
ZERO_STRATA = {"01": (0.0,) * 5, "10": (0.0,) * 5, "11": (0.0,) * 5}


def test_same_seed_same_trial():
    a = simulate(REFERENCE_TRIAL, seed=5)
    b = simulate(REFERENCE_TRIAL, seed=5)
    np.testing.assert_array_equal(a.dataset.time, b.dataset.time)
    np.testing.assert_array_equal(a.dataset.X, b.dataset.X)
    np.testing.assert_array_equal(a.strata, b.strata)
    assert not np.array_equal(a.dataset.time, simulate(REFERENCE_TRIAL, seed=6).dataset.time)


def test_observed_data_follow_latent_truth(trial):
    assert trial.check_consistency()
    d = trial.dataset
    assert d.n == 732
    assert int(d.arm.sum()) == 363
    assert d.covariate_names == COVARIATE_NAMES


def test_monotone_trial_has_no_defiers(pi_trial):
    assert not np.any(pi_trial.strata == ALL_STRATA.index(S10))
    # cells pinned by monotonicity
    d = pi_trial.dataset
    labels = pi_trial.labels
    assert set(labels[(d.arm == 0) & (d.ice == 1)]) == {"11"}
    assert set(labels[(d.arm == 1) & (d.ice == 0)]) == {"00"}


def test_zero_coefficients_give_uniform_strata():
    X = draw_covariates(REFERENCE_TRIAL.covariates, 50, np.random.default_rng(0))
    flat = REFERENCE_TRIAL.model_copy(update={"strata_coefficients": ZERO_STRATA})
    np.testing.assert_allclose(strata_probabilities(flat, X), 0.25)
    mono = flat.model_copy(update={"monotone": True})
    probs = strata_probabilities(mono, X)
    np.testing.assert_allclose(probs[:, ALL_STRATA.index(S10)], 0.0)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0)
    np.testing.assert_allclose(probs[:, ALL_STRATA.index(S11)], 1.0 / 3.0)


def test_quadrature_proportions_match_simulation():
    expected = expected_strata_proportions(REFERENCE_TRIAL)
    assert sum(expected.values()) == pytest.approx(1.0)
    big = simulate(REFERENCE_TRIAL.with_size(40000), seed=1)
    observed = np.bincount(big.strata, minlength=4) / big.dataset.n
    for k, u in enumerate(ALL_STRATA):
        assert observed[k] == pytest.approx(expected[u], abs=0.01)


def test_censoring_fraction_matches_simulation():
    big = simulate(REFERENCE_TRIAL.with_size(40000), seed=2)
    assert 1.0 - big.dataset.event.mean() == pytest.approx(expected_censoring_fraction(REFERENCE_TRIAL), abs=0.01)


def test_calibrate_censoring_hits_target():
    calibrated = calibrate_censoring(REFERENCE_TRIAL, target=0.2)
    assert expected_censoring_fraction(calibrated) == pytest.approx(0.2, abs=1e-6)
    assert calibrated.censoring_intercept > REFERENCE_TRIAL.censoring_intercept
    with pytest.raises(ValueError):
        calibrate_censoring(REFERENCE_TRIAL, target=1.0)


def test_censoring_fraction_is_monotone_in_intercept():
    intercepts = [-25.0, -10.0, -5.0, -3.0, 0.0, 3.0, 10.0]
    fractions = [expected_censoring_fraction(REFERENCE_TRIAL.model_copy(update={"censoring_intercept": b}))
                 for b in intercepts]
    assert np.all(np.diff(fractions) >= 0)
    assert fractions[0] < 1e-6
    assert fractions[-1] > 0.99


def test_calibrate_censoring_to_default_target():
    calibrated = calibrate_censoring(REFERENCE_TRIAL)
    assert expected_censoring_fraction(calibrated) == pytest.approx(0.10, abs=1e-6)
    assert calibrated.censoring_intercept == pytest.approx(REFERENCE_TRIAL.censoring_intercept, abs=0.3)


def test_reference_trial_hits_published_design():
    expected = expected_strata_proportions(REFERENCE_TRIAL)
    for u, target in {S00: 0.44, S01: 0.12, S11: 0.40, S10: 0.04}.items():
        assert expected[u] == pytest.approx(target, abs=0.01)
    assert expected_censoring_fraction(REFERENCE_TRIAL) == pytest.approx(0.10, abs=0.02)


@pytest.mark.slow
def test_large_reference_trial_hits_published_design():
    big = simulate(REFERENCE_TRIAL.with_size(100_000), seed=4)
    observed = np.bincount(big.strata, minlength=4) / big.dataset.n
    for u, target in {S00: 0.44, S01: 0.12, S11: 0.40, S10: 0.04}.items():
        assert observed[ALL_STRATA.index(u)] == pytest.approx(target, abs=0.01)
    assert 1.0 - big.dataset.event.mean() == pytest.approx(0.10, abs=0.02)


def test_weibull_inverse_hits_requested_survival(rng):
    fit = REFERENCE_TRIAL.outcome_fit(1, S00)
    X = draw_covariates(REFERENCE_TRIAL.covariates, 20, rng)
    V = rng.random(20)
    T = weibull_inverse(fit, X, V)
    H = T ** fit.shape * np.exp(fit.log_scale + X @ fit.slopes) / fit.shape
    np.testing.assert_allclose(np.exp(-H), V)


def test_covariates_respect_their_law(rng):
    X = draw_covariates(REFERENCE_TRIAL.covariates, 5000, rng)
    lo, hi = REFERENCE_TRIAL.covariates.age_bounds
    assert X.shape == (5000, 4)
    assert np.all((X[:, 0] >= lo) & (X[:, 0] <= hi))
    assert set(np.unique(X[:, 1:])) <= {0.0, 1.0}
    assert X[:, 1].mean() == pytest.approx(0.65, abs=0.03)


def test_true_curves_start_at_one_and_decrease(grid):
    truth = true_spce(REFERENCE_TRIAL, grid)
    assert set(truth.proportions) == set(ALL_STRATA)
    for curve in truth.survival.values():
        assert curve[0] == pytest.approx(1.0)
        assert np.all(np.diff(curve) <= 1e-12)
    for tau in truth.spce.values():
        assert tau[0] == pytest.approx(0.0, abs=1e-12)


def test_always_ice_stratum_benefits_from_treatment(grid):
    # same shape and slopes, lower baseline hazard under treatment
    tau = true_spce(REFERENCE_TRIAL, grid).spce[S11]
    assert np.all(tau >= -1e-12)
    assert tau[-1] > 0


def test_monotone_truth_drops_defiers(grid):
    truth = true_spce(IGNORABLE_TRIAL, grid)
    assert S10 not in truth.proportions
    assert sum(truth.proportions.values()) == pytest.approx(1.0)


def test_true_ice_probabilities_are_ordered_under_monotonicity(rng):
    X = draw_covariates(REFERENCE_TRIAL.covariates, 200, rng)
    p0 = TrueIceProbability(IGNORABLE_TRIAL, 0).predict(X)
    p1 = TrueIceProbability(IGNORABLE_TRIAL, 1).predict(X)
    assert np.all(p1 >= p0)


def test_true_censoring_compensator(rng):
    X = draw_covariates(REFERENCE_TRIAL.covariates, 10, rng)
    cens = TrueCensoringSurvival(REFERENCE_TRIAL, t_max=50.0, n_grid=100)
    total = cens.hazard_increments(X).sum(axis=1)
    np.testing.assert_allclose(np.exp(-total), cens.survival_at(50.0, X))


def test_spec_validation_and_resizing(tmp_path):
    with pytest.raises(ValidationError):
        DgpSpec(strata_coefficients={"00": (0.0,) * 5})
    small = REFERENCE_TRIAL.with_size(100)
    assert small.n == 100 and small.n_treated == 50
    with pytest.raises(ValueError):
        REFERENCE_TRIAL.with_size(1)
    path = tmp_path / "spec.json"
    path.write_text(IGNORABLE_TRIAL.model_dump_json())
    assert load_spec(path) == IGNORABLE_TRIAL


def test_truth_file_loads_without_latent_columns(tmp_path, trial):
    path = write_truth(trial, tmp_path / "truth.csv")
    header = path.read_text().splitlines()[0].split(",")
    assert {"U", "T0", "T1", "C"} <= set(header)
    loaded = load_csv(path, ColumnMap(covariates=COVARIATE_NAMES))
    assert loaded.covariate_names == COVARIATE_NAMES
    np.testing.assert_allclose(loaded.time, trial.dataset.time)
    np.testing.assert_array_equal(loaded.ice, trial.dataset.ice)


def test_truth_json(tmp_path, grid):
    payload = json.loads(truth_to_json(true_spce(IGNORABLE_TRIAL, grid), tmp_path / "t.json").read_text())
    assert payload["method"] == "quadrature"
    assert set(payload["spce"]) == {"00", "01", "11"}
    assert len(payload["survival"]["z1_11"]) == len(grid)


def test_unknown_truth_method(grid):
    with pytest.raises(ValueError):
        true_spce(REFERENCE_TRIAL, grid, method="guess")


@pytest.mark.slow
def test_monte_carlo_truth_agrees_with_quadrature():
    grid = TimeGrid.equispaced(30.0, 7)
    quad = true_spce(REFERENCE_TRIAL, grid)
    mc = true_spce(REFERENCE_TRIAL, grid, method="mc", mc_size=400_000, seed=3)
    for key, curve in quad.survival.items():
        np.testing.assert_array_less(np.abs(mc.survival[key] - curve), 5 * mc.mc_se[key] + 1e-3)
