import json

import numpy as np
import pytest

from ecalab.dgp import DgpConfig
from ecalab.numerics import homogeneity
from ecalab.study import (
    StudyReport,
    level_data,
    plateau_spread,
    run_batch_size_study,
    run_homogeneity_study,
)
from ecalab.train import TrainConfig

SMALL_DGP = DgpConfig(N_train=200, N_val=50)


@pytest.fixture(scope="module")
def tiny():
    return run_homogeneity_study((0.10, 0.42), seeds=range(2), base=TrainConfig(epochs=120), dgp=SMALL_DGP)


def test_level_data_calibrated():
    cfg, (tr, _) = level_data(0.24, SMALL_DGP, 4)
    assert cfg.seed == 4
    assert homogeneity(tr).sigma_tilde == pytest.approx(0.24, rel=0.15)


def test_report_shape(tiny):
    assert len(tiny.runs) == 2 * 2 * 5
    assert tiny.levels() == [0.10, 0.42]
    rows = tiny.summary_rows()
    assert len(rows) == 10 and all(r["seeds"] == 2 for r in rows)
    assert set(tiny.rho0) == {0.10, 0.42}


def test_study_is_deterministic():
    base = TrainConfig(epochs=30)
    a = run_homogeneity_study((0.10,), seeds=[1], base=base, dgp=SMALL_DGP, variants=("baseline",))
    b = run_homogeneity_study((0.10,), seeds=[1], base=base, dgp=SMALL_DGP, variants=("baseline",))
    assert a.to_csv() == b.to_csv()


def test_rho0_reference(tiny):
    # mean pooling on the true direction; the level only shifts the pooled mean
    vals = [tiny.rho0[lv] for lv in tiny.levels()]
    assert all(0 < v < 1 for v in vals)
    np.testing.assert_allclose(vals, vals[0], rtol=1e-9)


def test_write_outputs(tiny, tmp_path):
    tiny.write(tmp_path)
    doc = json.loads((tmp_path / "study.json").read_text())
    assert len(doc["runs"]) == len(tiny.runs)
    assert (tmp_path / "study.csv").read_text().count("\n") == len(tiny.runs) + 1
    assert (tmp_path / "summary.csv").read_text().startswith("level,variant,")


def test_plateau_spread_counts_missing_as_run_length():
    rep = run_batch_size_study(0.10, seeds=[0], sizes=(32, 200), base=TrainConfig(epochs=40), dgp=SMALL_DGP)
    assert len(rep.runs) == 2
    spread = plateau_spread(rep)
    assert len(spread) == 1 and 0 <= spread[0] <= 40


def test_median_handles_missing_plateau():
    rep = StudyReport()
    assert np.isnan(rep.median("final_val_pcc"))


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="the key-strength intercept grows with eta, so heterogeneous data is the hard end here")
def test_baseline_trend_follows_homogeneity():
    rep = run_homogeneity_study((0.10, 0.73), seeds=range(5), variants=("baseline",))
    assert rep.median("final_val_pcc", level=0.10) < rep.median("final_val_pcc", level=0.73)
    assert rep.median("final_val_mse", level=0.10) > rep.median("final_val_mse", level=0.73)
