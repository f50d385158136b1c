# test_mixture_engine.py
import json

import numpy as np
import pandas as pd
import pytest
from scipy.stats import chisquare

from config import DEFAULT_PRIOR, MONOTONE, MONOTONE_ER, NO_MONOTONE, THREADS, PriorSpec
from errors import DataParseError
from mixture_engine import (
    Band,
    MixtureModel,
    MixtureSampler,
    band,
    curves_to_csv,
    draws_to_csv,
    itt_from_draw,
    observed_loglik,
    prior_predictive,
    run_em,
    run_sampler,
    split_rhat,
    summary_to_json,
)
from trial_data import Dataset, StratumLabel, TimeGrid, admissibility_mask, strata_for
from trial_simulator import IGNORABLE_TRIAL, REFERENCE_TRIAL, expected_strata_proportions, simulate, true_spce


MONOTONE_STRATA = strata_for(MONOTONE)
S00, S10, S11 = StratumLabel.S00, StratumLabel.S10, StratumLabel.S11


@pytest.fixture(scope="module")
def small_trial():
    return simulate(IGNORABLE_TRIAL.with_size(240), seed=3)


@pytest.fixture(scope="module")
def smoke_run(small_trial):
    grid = TimeGrid.equispaced(40.0, 9)
    return run_sampler(small_trial.dataset, MONOTONE, grid=grid, chains=2, iters=12, burnin=6, seed=5)


def test_split_rhat_identical_chains():
    rng = np.random.default_rng(1)
    draws = rng.normal(size=400)
    assert split_rhat(np.stack([draws, draws])) == pytest.approx(1.0, abs=0.02)


def test_split_rhat_flags_shifted_chains():
    rng = np.random.default_rng(2)
    chains = np.stack([rng.normal(size=300), rng.normal(loc=3.0, size=300)])
    assert split_rhat(chains) > 1.05


def test_split_rhat_too_short():
    assert np.isnan(split_rhat(np.ones((2, 3))))


def test_band_contains_mean():
    samples = np.array([[0.0], [0.0], [0.0], [10.0]])
    b = band(samples)
    assert b.lower[0] <= b.mean[0] <= b.upper[0]
    assert set(Band(1.0, 0.0, 2.0).to_dict()) == {"mean", "lower", "upper"}


def test_model_layout(toy_dataset):
    mono = MixtureModel.for_dataset(toy_dataset, MONOTONE)
    assert mono.K == 3 and len(mono.groups) == 6
    assert mono.n_params == 2 * 2 + 6 * 3
    assert len(mono.parameter_names()) == mono.n_params

    er = MixtureModel.for_dataset(toy_dataset, MONOTONE_ER)
    k11 = er.strata.index(StratumLabel.S11)
    assert er.group_of(0, k11) == er.group_of(1, k11)
    assert len(er.groups) == 5 and er.n_params == 4 + 5 * 3

    full = MixtureModel.for_dataset(toy_dataset, NO_MONOTONE)
    assert full.K == 4 and full.n_params == 3 * 2 + 8 * 3


def test_scores_are_a_distribution(toy_dataset, rng):
    model = MixtureModel.for_dataset(toy_dataset, NO_MONOTONE)
    theta = rng.normal(size=model.n_params)
    pi = model.scores(theta, model.standardize(toy_dataset.X))
    np.testing.assert_allclose(pi.sum(axis=1), 1.0)


def test_observed_loglik_ignores_inadmissible_strata(toy_dataset, rng):
    model = MixtureModel.for_dataset(toy_dataset, MONOTONE)
    theta = rng.normal(scale=0.3, size=model.n_params)
    Xs = model.standardize(toy_dataset.X)
    mask = admissibility_mask(toy_dataset.arm, toy_dataset.ice, model.strata)
    ll = observed_loglik(model, theta, toy_dataset.arm, toy_dataset.time, toy_dataset.event.astype(float), Xs, mask)
    assert np.isfinite(ll)


def test_sampler_rejects_nonpositive_times(toy_dataset, grid):
    bad = Dataset(toy_dataset.arm, toy_dataset.ice, np.r_[0.0, toy_dataset.time[1:]], toy_dataset.event,
                  toy_dataset.X, covariate_names=("x",))
    with pytest.raises(DataParseError) as info:
        MixtureSampler(bad, MONOTONE, DEFAULT_PRIOR, grid, iters=10, burnin=5)
    assert info.value.row == 1


def test_sampler_requires_iterations_past_burnin(toy_dataset, grid):
    with pytest.raises(ValueError):
        MixtureSampler(toy_dataset, MONOTONE, DEFAULT_PRIOR, grid, iters=5, burnin=5)


def test_sampler_smoke_shapes(smoke_run):
    summary, draws = smoke_run
    assert draws.n_draws == 12 and draws.n_chains == 2
    assert draws.curves.shape == (12, 2, 3, 9)
    np.testing.assert_allclose(draws.proportions.sum(axis=1), 1.0)
    np.testing.assert_allclose(draws.curves[:, :, :, 0], 1.0)
    payload = summary.to_dict()
    assert payload["strata"] == [s.value for s in MONOTONE_STRATA]
    assert set(payload["spce"]) == {s.value for s in summary.strata}
    assert "converged" in payload


def test_sampled_labels_respect_observed_cells(small_trial, smoke_run):
    _, draws = smoke_run
    d = small_trial.dataset
    mask = admissibility_mask(d.arm, d.ice, draws.model.strata)
    assert draws.labels.shape == (draws.n_draws, d.n)
    assert mask[np.arange(d.n)[None, :], draws.labels].all()


def test_prior_predictive_draws(rng):
    X = rng.normal(size=(50, 2))
    arm = np.repeat([0, 1], 25)
    prior = PriorSpec(sigma_intercept=1.0, sigma_log_shape=0.3)
    theta, d, labels = prior_predictive(X, arm, MONOTONE, prior, rng)
    model = MixtureModel.for_dataset(d, MONOTONE)
    assert theta.shape == (model.n_params,)
    assert np.all(d.time > 0) and np.all(d.event == 1)
    assert admissibility_mask(d.arm, d.ice, model.strata)[np.arange(50), labels].all()
    with pytest.raises(ValueError):
        prior_predictive(X, arm, MONOTONE, DEFAULT_PRIOR, rng)


def test_itt_decomposes_over_strata(smoke_run):
    _, draws = smoke_run
    for r in (0, draws.n_draws - 1):
        mixed = np.sum(draws.proportions[r][:, None] * draws.spce[r], axis=0)
        np.testing.assert_allclose(mixed, itt_from_draw(draws, r), atol=1e-10)


def test_sampler_is_deterministic(small_trial):
    grid = TimeGrid.equispaced(40.0, 5)
    _, a = run_sampler(small_trial.dataset, MONOTONE, grid=grid, chains=1, iters=8, burnin=4, seed=9)
    _, b = run_sampler(small_trial.dataset, MONOTONE, grid=grid, chains=1, iters=8, burnin=4, seed=9)
    np.testing.assert_array_equal(a.params, b.params)


def test_draws_and_summary_files(tmp_path, smoke_run):
    summary, draws = smoke_run
    csv = draws_to_csv(draws, tmp_path / "draws.csv")
    lines = csv.read_text().strip().splitlines()
    assert len(lines) == 1 + draws.n_draws * 3 * 9
    payload = json.loads(summary_to_json(summary, tmp_path / "summary.json").read_text())
    assert payload["engine"] == "mixture"
    curves = pd.read_csv(curves_to_csv(summary, tmp_path / "curves.csv"))
    assert len(curves) == 2 * 3 * 9
    assert (curves["lower"] <= curves["survival"] + 1e-12).all()


def test_em_likelihood_never_decreases(small_trial):
    result = run_em(small_trial.dataset, MONOTONE, grid=TimeGrid.equispaced(40.0, 9), seed=1, max_iter=60)
    trace = np.array(result.loglik_trace)
    assert np.all(np.diff(trace) >= -1e-10 * np.abs(trace[:-1]).max())
    np.testing.assert_allclose(result.proportions.sum(), 1.0)
    assert result.to_dict()["engine"] == "mixture-em"


def test_em_with_known_strata(small_trial):
    labels = small_trial.labels
    result = run_em(small_trial.dataset, MONOTONE, grid=TimeGrid.equispaced(40.0, 9), known_strata=labels)
    assert result.converged
    strata = result.model.strata
    observed = np.array([np.mean(labels == s.value) for s in strata])
    np.testing.assert_allclose(result.proportions, observed, atol=1e-4)


def test_em_rejects_conflicting_known_strata(toy_dataset, grid):
    # record 0 sits in cell (0, 0) so it cannot be an always-ICE case
    labels = ["11"] + ["00"] * 7
    with pytest.raises(ValueError):
        run_em(toy_dataset, MONOTONE, grid=grid, known_strata=labels)


@pytest.mark.slow
def test_sampler_recovers_strata_proportions():
    spec = IGNORABLE_TRIAL.with_size(3000)
    trial = simulate(spec, seed=21)
    summary, _ = run_sampler(trial.dataset, MONOTONE, grid=TimeGrid.equispaced(40.0, 9),
                             chains=2, iters=600, burnin=300, seed=4)
    truth = expected_strata_proportions(spec)
    for s in summary.strata:
        assert summary.proportions[s].mean == pytest.approx(truth[s], abs=0.04)


@pytest.mark.slow
def test_sampler_on_reference_design():
    # defiers make up 4% of the reference trial, so monotone margins absorb them
    trial = simulate(REFERENCE_TRIAL, seed=21)
    grid = TimeGrid.equispaced(40.0, 21)
    summary, _ = run_sampler(trial.dataset, MONOTONE, grid=grid, chains=6, iters=2000, burnin=1000,
                             seed=4, threads=THREADS)
    truth = expected_strata_proportions(REFERENCE_TRIAL)
    assert summary.proportions[S00].mean == pytest.approx(truth[S00] + truth[S10], abs=0.05)
    assert summary.proportions[S11].mean == pytest.approx(truth[S11] + truth[S10], abs=0.05)
    tau = true_spce(REFERENCE_TRIAL, grid).spce[S00]
    band00 = summary.spce[S00]
    covered = (band00.lower <= tau + 1e-12) & (tau - 1e-12 <= band00.upper)
    assert covered.mean() >= 0.9


@pytest.mark.slow
def test_exclusion_restriction_barely_moves_never_ice_effect():
    trial = simulate(REFERENCE_TRIAL.with_size(2000), seed=12)
    grid = TimeGrid.equispaced(40.0, 21)
    free = run_em(trial.dataset, MONOTONE, grid=grid, seed=2)
    er = run_em(trial.dataset, MONOTONE_ER, grid=grid, seed=2)
    k00 = free.model.strata.index(S00)
    assert np.max(np.abs(free.spce[k00] - er.spce[er.model.strata.index(S00)])) < 0.03
    np.testing.assert_allclose(er.spce[er.model.strata.index(S11)], 0.0, atol=1e-12)


@pytest.mark.slow
def test_em_estimates_sit_inside_posterior_intervals():
    trial = simulate(IGNORABLE_TRIAL.with_size(1000), seed=14)
    grid = TimeGrid.equispaced(40.0, 9)
    em = run_em(trial.dataset, MONOTONE, grid=grid, seed=3)
    summary, _ = run_sampler(trial.dataset, MONOTONE, grid=grid, chains=4, iters=1500, burnin=750,
                             seed=6, threads=THREADS)
    for k, s in enumerate(em.model.strata):
        prop = summary.proportions[s]
        assert prop.lower <= em.proportions[k] <= prop.upper
        tau = summary.spce[s]
        assert np.all(tau.lower - 1e-9 <= em.spce[k]) and np.all(em.spce[k] <= tau.upper + 1e-9)


@pytest.mark.slow
def test_simulation_based_calibration():
    # ranks of the true parameter among thinned posterior draws are uniform
    rng = np.random.default_rng(77)
    prior = PriorSpec(sigma_beta=0.5, sigma_gamma=0.5, sigma_intercept=1.0, sigma_log_shape=0.3)
    arm = np.repeat([0, 1], 100)
    ranks = []
    for r in range(200):
        X = rng.normal(size=(arm.size, 1))
        theta, d, _ = prior_predictive(X, arm, MONOTONE, prior, rng)
        grid = TimeGrid.equispaced(float(np.quantile(d.time, 0.9)), 3)
        _, draws = run_sampler(d, MONOTONE, prior, grid=grid, chains=1, iters=400, burnin=200, thin=10,
                               seed=r)
        j = draws.model.parameter_names().index("beta[11][intercept]")
        ranks.append(int(np.sum(draws.params[:, j] < theta[j])))
    counts = np.bincount(np.array(ranks) * 7 // 21, minlength=7)
    assert chisquare(counts).pvalue > 0.01
