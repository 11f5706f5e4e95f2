import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from streamgnn.metrics import (
    HorizonMetrics,
    TABLE_COLUMNS,
    UndefinedMetric,
    YearReport,
    assemble_report,
    average_row,
    horizon_slice,
    mae,
    mape,
    read_report_rows,
    rmse,
    write_comparison,
)


def test_examples():
    assert mae([1, 2], [2, 4]) == 1.5
    assert rmse([1, 2], [2, 5]) == pytest.approx(math.sqrt(5))
    assert rmse([0, 0], [2, 4]) == pytest.approx(math.sqrt(10))
    assert mape([110, 90], [100, 100]) == pytest.approx(10.0)


def test_mape_floor():
    assert mape([1.0, 110.0], [0.0, 100.0]) == pytest.approx(10.0)
    with pytest.raises(UndefinedMetric):
        mape([1.0], [0.5])


def test_shape_mismatch():
    with pytest.raises(ValueError):
        mae(np.ones(3), np.ones(4))


def test_horizon_slice_masks_other_steps():
    rng = np.random.default_rng(0)
    t = rng.uniform(10, 20, size=(5, 4, 12))
    p = t.copy()
    p[..., 2] += 3.0  # only step 3 is wrong
    m = HorizonMetrics.compute(p, t)
    assert m.mae[3] == pytest.approx(3.0) and m.mae[6] == 0.0 and m.mae[12] == 0.0
    assert m.mae_all == pytest.approx(3.0 / 12)
    with pytest.raises(ValueError):
        horizon_slice(p, t, 13)


def year_report(year, base):
    m = HorizonMetrics({3: base, 6: base + 1, 12: base + 2}, {3: 1.0, 6: 2.0, 12: 3.0}, {3: 5.0, 6: 6.0, 12: 7.0}, base)
    return YearReport(year, m, total_seconds=10.0 * year, seconds_per_epoch=1.0, epochs=10, trained_nodes=5, strategy="static")


def test_average_row():
    avg = average_row([year_report(1, 1.0), year_report(2, 3.0)])
    assert avg["mae_15"] == 2.0 and avg["mae_60"] == 4.0 and avg["total_s"] == 15.0
    assert list(avg) == TABLE_COLUMNS


def test_assemble_report(tmp_path):
    reps = [year_report(1, 1.0), year_report(2, 3.0)]
    avg = assemble_report(reps, tmp_path)
    rows = read_report_rows(tmp_path / "report.csv")
    assert [r["year"] for r in rows] == ["1", "2", "average"]
    assert float(rows[-1]["mae_30"]) == avg["mae_30"] == 3.0
    for name in ("mae_15", "rmse_15", "total_time", "mae_30", "rmse_30", "time_per_epoch"):
        assert (tmp_path / f"series_{name}.csv").exists()
    assert "average" in (tmp_path / "summary.txt").read_text()
    with pytest.raises(ValueError):
        assemble_report([], tmp_path)


def test_comparison(tmp_path):
    avg = dict(average_row([year_report(1, 2.0)]), mae_all=2.0)
    rows = read_report_rows(write_comparison({"static": avg, "retrained": avg}, tmp_path / "c.csv"))
    assert [r["model"] for r in rows] == ["static", "retrained"]
    assert_allclose(float(rows[0]["mae_all"]), 2.0)
