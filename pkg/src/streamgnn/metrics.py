"""Forecast error metrics and per-year report tables."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

HORIZON_STEPS = (3, 6, 12)
HORIZON_LABELS = {3: "15", 6: "30", 12: "60"}
MAPE_FLOOR = 1.0


class UndefinedMetric(ValueError):
    pass


def _pair(pred, truth):
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    return p, t


def mae(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean(np.abs(p - t)))


def rmse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.sqrt(np.mean(np.square(p - t))))


def mape(pred, truth, floor: float = MAPE_FLOOR) -> float:
    """Percentage error over entries with |truth| >= floor."""
    p, t = _pair(pred, truth)
    keep = np.abs(t) >= floor
    if not keep.any():
        raise UndefinedMetric(f"every target is below the MAPE floor {floor}")
    return float(100.0 * np.mean(np.abs(p[keep] - t[keep]) / np.abs(t[keep])))


def horizon_slice(pred, truth, step: int):
    p, t = _pair(pred, truth)
    if not 1 <= step <= p.shape[-1]:
        raise ValueError(f"horizon step {step} outside 1..{p.shape[-1]}")
    return p[..., step - 1], t[..., step - 1]


@dataclass
class HorizonMetrics:
    mae: dict[int, float]
    rmse: dict[int, float]
    mape: dict[int, float]
    mae_all: float = float("nan")

    @classmethod
    def compute(cls, pred, truth, steps: Sequence[int] = HORIZON_STEPS, floor: float = MAPE_FLOOR) -> "HorizonMetrics":
        m, r, pc = {}, {}, {}
        for s in steps:
            p, t = horizon_slice(pred, truth, s)
            m[s], r[s] = mae(p, t), rmse(p, t)
            try:
                pc[s] = mape(p, t, floor)
            except UndefinedMetric:
                pc[s] = float("nan")
        return cls(m, r, pc, mae(pred, truth))


TABLE_COLUMNS = [f"{metric}_{HORIZON_LABELS[s]}" for s in HORIZON_STEPS for metric in ("mae", "rmse", "mape")] + [
    "total_s",
    "avg_s",
]


@dataclass
class YearReport:
    year: int
    metrics: HorizonMetrics
    total_seconds: float
    seconds_per_epoch: float
    epochs: int
    trained_nodes: int
    strategy: str
    switches: dict = field(default_factory=dict)
    wall_seconds: float = 0.0
    events: list = field(default_factory=list)

    def row(self) -> dict[str, float]:
        out = {}
        for s in HORIZON_STEPS:
            lab = HORIZON_LABELS[s]
            out[f"mae_{lab}"] = self.metrics.mae[s]
            out[f"rmse_{lab}"] = self.metrics.rmse[s]
            out[f"mape_{lab}"] = self.metrics.mape[s]
        out["total_s"] = self.total_seconds
        out["avg_s"] = self.seconds_per_epoch
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["metrics"] = {
            "mae": {str(k): v for k, v in self.metrics.mae.items()},
            "rmse": {str(k): v for k, v in self.metrics.rmse.items()},
            "mape": {str(k): v for k, v in self.metrics.mape.items()},
            "mae_all": self.metrics.mae_all,
        }
        return d


def average_row(reports: Sequence[YearReport]) -> dict[str, float]:
    rows = [r.row() for r in reports]
    return {c: float(np.mean([row[c] for row in rows])) for c in TABLE_COLUMNS}


def _fmt(v: float) -> str:
    return repr(float(v))


SERIES = {
    "mae_15": lambda r: r.metrics.mae[3],
    "rmse_15": lambda r: r.metrics.rmse[3],
    "total_time": lambda r: r.total_seconds,
    "mae_30": lambda r: r.metrics.mae[6],
    "rmse_30": lambda r: r.metrics.rmse[6],
    "time_per_epoch": lambda r: r.seconds_per_epoch,
}


def assemble_report(reports: Sequence[YearReport], out_dir) -> dict[str, float]:
    """Write per-year table, averages, one series file per plot panel and a text summary.

    Returns the average row.
    """
    if not reports:
        raise ValueError("no yearly reports to assemble")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    avg = average_row(reports)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["year"] + TABLE_COLUMNS + ["epochs", "trained_nodes"])
        for r in reports:
            row = r.row()
            w.writerow([r.year] + [_fmt(row[c]) for c in TABLE_COLUMNS] + [r.epochs, r.trained_nodes])
        w.writerow(["average"] + [_fmt(avg[c]) for c in TABLE_COLUMNS] + ["", ""])
    for name, get in SERIES.items():
        with open(out / f"series_{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["year", name])
            for r in reports:
                w.writerow([r.year, _fmt(get(r))])
    (out / "years.json").write_text(json.dumps([r.to_dict() for r in reports], indent=2))

    lines = [f"strategy: {reports[0].strategy}  switches: {reports[0].switches}", ""]
    head = f"{'year':>7} " + " ".join(f"{c:>9}" for c in TABLE_COLUMNS) + f" {'nodes':>6}"
    lines.append(head)
    for r in reports:
        row = r.row()
        lines.append(f"{r.year:>7} " + " ".join(f"{row[c]:9.3f}" for c in TABLE_COLUMNS) + f" {r.trained_nodes:>6}")
    lines.append(f"{'average':>7} " + " ".join(f"{avg[c]:9.3f}" for c in TABLE_COLUMNS))
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    return avg


def read_report_rows(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_comparison(rows: dict[str, dict[str, float]], path) -> Path:
    """One averaged row per strategy or variant, with the per-horizon table columns."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model"] + TABLE_COLUMNS + ["mae_all"])
        for name, avg in rows.items():
            w.writerow([name] + [_fmt(avg[c]) for c in TABLE_COLUMNS] + [_fmt(avg.get("mae_all", float("nan")))])
    return path
