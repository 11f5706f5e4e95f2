"""Per-node drift scores: histograms of model features compared by JS divergence."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import ValidationError
from .graph import GraphSnapshot
from .model import ModelParams, extract_features

BINS = 50
RADIUS = 5.0
FLOOR = 1e-6
STEPS_PER_WEEK = 2016
FEATURE_BATCH = 256


class BinningMismatch(ValueError):
    pass


def feature_stats(u) -> tuple[np.ndarray, np.ndarray]:
    """Per node/feature mean and (floored) std over the window axis of (W, N, D) features."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 3 or u.shape[0] < 2:
        raise ValidationError(f"need (windows>=2, nodes, features), got {u.shape}")
    return u.mean(axis=0), np.maximum(u.std(axis=0), 1e-6)


def feature_distribution(u, bins: int = BINS, radius: float = RADIUS, floor: float = FLOOR, stats=None) -> np.ndarray:
    """Histogram per node of z-scored features.

    u has shape (windows, N, D).  Each node/feature column is z-scored with
    ``stats`` (mean, std), by default its own over the window axis; the
    node's W*D values are pooled and binned on [-radius, radius] (values
    outside are clipped to the edge bins), then a floor is added to every bin
    and the row renormalized.  Returns (N, bins).
    """
    u = np.asarray(u, dtype=np.float64)
    own = feature_stats(u)
    mean, std = own if stats is None else stats
    z = np.clip((u - mean) / std, -radius, radius)
    width = 2 * radius / bins
    idx = np.minimum(((z + radius) / width).astype(np.int64), bins - 1)  # (W, N, D)
    n = u.shape[1]
    offs = (np.arange(n) * bins)[None, :, None]
    counts = np.bincount((idx + offs).ravel(), minlength=n * bins).reshape(n, bins).astype(np.float64)
    p = counts / counts.sum(axis=1, keepdims=True)
    p = p + floor
    return p / p.sum(axis=1, keepdims=True)


def _check_pair(p, q):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise BinningMismatch(f"histograms have different binning: {p.shape} vs {q.shape}")
    return p, q


def kl_divergence(p, q) -> np.ndarray | float:
    """sum p log(p/q) over the last axis, in nats."""
    p, q = _check_pair(p, q)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p / q), 0.0)
    out = terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def js_divergence(p, q) -> np.ndarray | float:
    p, q = _check_pair(p, q)
    m = 0.5 * (p + q)
    out = 0.5 * np.asarray(kl_divergence(p, m)) + 0.5 * np.asarray(kl_divergence(q, m))
    out = np.clip(out, 0.0, math.log(2))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True, eq=False)
class JsdReport:
    node_ids: np.ndarray
    scores: np.ndarray
    prev_year: int | None = None
    curr_year: int | None = None
    prev_window: tuple[int, int] | None = None
    curr_window: tuple[int, int] | None = None

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["node_id", "score"])
            for nid, s in zip(self.node_ids, self.scores):
                w.writerow([int(nid), repr(float(s))])
        return path

    @classmethod
    def from_csv(cls, path) -> "JsdReport":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        return cls(np.array([int(r[0]) for r in rows], dtype=np.int64), np.array([float(r[1]) for r in rows]))

    def ranks(self) -> dict[int, int]:
        """1-based rank by descending score (ties by ascending id)."""
        order = np.lexsort((self.node_ids, -self.scores))
        return {int(self.node_ids[i]): r + 1 for r, i in enumerate(order)}


def _features_over(params: ModelParams, adjacency, values: np.ndarray) -> np.ndarray:
    cfg = params.config
    starts = np.arange(values.shape[1] - cfg.in_steps + 1)
    out = []
    for i in range(0, starts.size, FEATURE_BATCH):
        win = np.lib.stride_tricks.sliding_window_view(values, cfg.in_steps, axis=1)[:, starts[i : i + FEATURE_BATCH]]
        x = np.ascontiguousarray(win.transpose(1, 0, 3, 2))  # (B, N, T, F)
        out.append(extract_features(params, adjacency, x))
    return np.concatenate(out)


def score_nodes(
    params: ModelParams,
    prev: GraphSnapshot,
    curr: GraphSnapshot,
    prev_values: np.ndarray,
    curr_values: np.ndarray,
    week_steps: int = STEPS_PER_WEEK,
    bins: int = BINS,
    radius: float = RADIUS,
    floor: float = FLOOR,
) -> JsdReport:
    """JS divergence per common node between last week of ``prev`` and first week of ``curr``.

    ``prev_values``/``curr_values`` are (normalized) flows aligned with each
    snapshot's node order.  Features of both weeks are z-scored with the
    previous week's per-node statistics.  Both passes use the previous year's model; each
    year's adjacency is restricted to the common nodes.
    """
    common = np.array(sorted(set(prev.node_ids.tolist()) & set(curr.node_ids.tolist())), dtype=np.int64)
    if common.size == 0:
        raise ValidationError("no nodes common to both years")
    if prev_values.shape[1] < week_steps or curr_values.shape[1] < week_steps:
        raise ValidationError(f"need {week_steps} steps per year for detection")
    pi, ci = prev.indices(common), curr.indices(common)
    t_prev = prev_values.shape[1]
    x_prev = prev_values[pi, t_prev - week_steps :]
    x_curr = curr_values[ci, :week_steps]
    u_prev = _features_over(params, prev.restrict(common), x_prev)
    u_curr = _features_over(params, curr.restrict(common), x_curr)
    # both years on the previous year's grid, so level and scale changes count
    ref = feature_stats(u_prev)
    hp = feature_distribution(u_prev, bins, radius, floor, ref)
    hc = feature_distribution(u_curr, bins, radius, floor, ref)
    return JsdReport(
        common,
        np.asarray(js_divergence(hc, hp)),
        prev.year,
        curr.year,
        (t_prev - week_steps, t_prev),
        (0, week_steps),
    )


def _count(fraction: float, n: int) -> int:
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    return min(n, math.ceil(fraction * n - 1e-9))


def select_evolved(report: JsdReport, fraction: float = 0.05) -> set[int]:
    """ceil(fraction * N) highest scores; ties go to the smaller id."""
    k = _count(fraction, report.node_ids.size)
    order = np.lexsort((report.node_ids, -report.scores))
    return {int(i) for i in report.node_ids[order[:k]]}


def select_replay(report: JsdReport, fraction: float = 0.10, exclude=()) -> set[int]:
    """ceil(fraction * N) lowest scores among nodes not in ``exclude``; ties go to the smaller id."""
    k = _count(fraction, report.node_ids.size)
    skip = {int(i) for i in exclude}
    order = np.lexsort((report.node_ids, report.scores))
    picked = [int(report.node_ids[i]) for i in order if int(report.node_ids[i]) not in skip]
    return set(picked[:k])
