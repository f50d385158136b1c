# test_trial_data.py
import numpy as np
import pytest

from config import MONOTONE, NO_MONOTONE
from errors import DataParseError, SchemaError
from trial_data import (
    ColumnMap,
    Dataset,
    StratumLabel,
    TimeGrid,
    admissibility_mask,
    admissible_strata,
    cell_counts,
    dataset_summary,
    dichotomize_ice,
    load_csv,
    standardize,
    strata_for,
    write_csv,
)

S00, S01, S10, S11 = StratumLabel.S00, StratumLabel.S01, StratumLabel.S10, StratumLabel.S11


def test_stratum_label_parsing_and_ice():
    assert StratumLabel.parse("S01") is S01
    assert StratumLabel.parse("11") is S11
    assert StratumLabel.parse(0) is S00
    assert S01.ice_under(0) == 0 and S01.ice_under(1) == 1
    assert S10.ice_under(0) == 1 and S10.ice_under(1) == 0


def test_monotonicity_drops_s10():
    assert S10 not in strata_for(MONOTONE)
    assert set(strata_for(NO_MONOTONE)) == {S00, S01, S10, S11}


@pytest.mark.parametrize("arm,ice,expected", [
    (0, 0, {S00, S01}),
    (0, 1, {S10, S11}),
    (1, 0, {S00, S10}),
    (1, 1, {S01, S11}),
])
def test_admissible_strata_without_monotonicity(arm, ice, expected):
    assert set(admissible_strata(arm, ice, NO_MONOTONE)) == expected


def test_monotonicity_pins_two_cells():
    assert admissible_strata(0, 1, MONOTONE) == (S11,)
    assert admissible_strata(1, 0, MONOTONE) == (S00,)


def test_admissibility_mask_rows_match_table(toy_dataset):
    strata = strata_for(NO_MONOTONE)
    mask = admissibility_mask(toy_dataset.arm, toy_dataset.ice, strata)
    assert mask.shape == (toy_dataset.n, 4)
    assert np.all(mask.sum(axis=1) == 2)
    for i, (z, d) in enumerate(zip(toy_dataset.arm, toy_dataset.ice)):
        allowed = {s for s, ok in zip(strata, mask[i]) if ok}
        assert allowed == set(admissible_strata(z, d, NO_MONOTONE))


def test_time_grid_validation():
    with pytest.raises(ValueError):
        TimeGrid(np.array([1.0, 1.0, 2.0]))
    with pytest.raises(ValueError):
        TimeGrid(np.array([-1.0, 2.0]))
    with pytest.raises(ValueError):
        TimeGrid(np.array([]))
    assert TimeGrid.equispaced(10.0, 1).points.tolist() == [10.0]
    grid = TimeGrid.equispaced(10.0, 11)
    assert grid.points[0] == 0.0 and grid.t_max == 10.0 and len(grid) == 11


def test_dataset_is_read_only(toy_dataset):
    with pytest.raises(ValueError):
        toy_dataset.time[0] = 1.0
    with pytest.raises(Exception):
        toy_dataset.arm = np.zeros(8)


def test_dataset_length_mismatch():
    with pytest.raises(SchemaError):
        Dataset(np.array([0, 1]), np.array([0]), np.array([1.0, 2.0]), np.array([1, 1]), np.zeros((2, 1)))


def test_cell_counts_and_summary(toy_dataset):
    assert cell_counts(toy_dataset) == {(0, 0): 2, (0, 1): 2, (1, 0): 2, (1, 1): 2}
    summary = dataset_summary(toy_dataset)
    assert summary["n"] == 8
    assert summary["events"] + summary["censored"] == 8
    assert summary["cells"]["Z1_D1"] == 2


def test_take_and_resample_repeat_rows(toy_dataset):
    boot = toy_dataset.resample(np.array([0, 0, 7]))
    assert boot.n == 3
    assert boot.time.tolist() == [5.0, 5.0, 8.0]
    assert boot.covariate_names == ("x",)


def test_csv_write_then_load(tmp_path, toy_dataset):
    path = write_csv(toy_dataset, tmp_path / "toy.csv")
    loaded = load_csv(path, ColumnMap(covariates=("x",)))
    np.testing.assert_array_equal(loaded.arm, toy_dataset.arm)
    np.testing.assert_allclose(loaded.time, toy_dataset.time)
    np.testing.assert_allclose(loaded.X, toy_dataset.X)


def test_load_csv_reports_bad_row(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("Z,D,time,event,x\n0,0,1.0,1,0.1\n2,0,1.5,1,0.2\n")
    with pytest.raises(DataParseError) as info:
        load_csv(path, ColumnMap(covariates=("x",)))
    assert info.value.row == 2


def test_load_csv_rejects_negative_time(tmp_path):
    path = tmp_path / "neg.csv"
    path.write_text("Z,D,time,event\n0,0,-1.0,1\n")
    with pytest.raises(DataParseError):
        load_csv(path, ColumnMap())


def test_load_csv_missing_column(tmp_path):
    path = tmp_path / "short.csv"
    path.write_text("Z,D,time\n0,0,1.0\n")
    with pytest.raises(SchemaError):
        load_csv(path, ColumnMap())


def test_dichotomize_ice_missing_counts_as_event():
    ice = dichotomize_ice([5.0, None, 40.0, 30.0], cutoff=30.0)
    assert ice.tolist() == [1, 1, 0, 0]
    with pytest.raises(ValueError):
        dichotomize_ice([1.0], cutoff=0.0)


def test_standardize_keeps_constant_columns():
    X = np.column_stack([np.arange(5.0), np.ones(5)])
    Xs, center, scale = standardize(X)
    assert scale[1] == 1.0
    np.testing.assert_allclose(Xs[:, 0].mean(), 0.0, atol=1e-12)
    np.testing.assert_allclose(Xs[:, 1], 0.0)
