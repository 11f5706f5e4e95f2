"""Flow tensors, corpus files, sensor filtering, splits and windows."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .graph import (
    EPSILON,
    SIGMA_D,
    GraphSnapshot,
    StreamingGraph,
    StreamIntegrityError,
    build_adjacency,
    pairwise_distances,
)

IN_STEPS = 12
HORIZON = 12
BATCH_SIZE = 128
STD_FLOOR = 1e-6


class CorpusError(ValueError):
    pass


class ValidationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FlowTensor:
    """Node-major measurements, shape (nodes, timesteps, features)."""

    values: np.ndarray
    node_ids: np.ndarray
    timestep_minutes: int = 5

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise ValueError(f"flow values must be (nodes, time, features), got {v.shape}")
        ids = np.asarray(self.node_ids, dtype=np.int64)
        if ids.size != v.shape[0]:
            raise ValueError(f"{v.shape[0]} flow rows for {ids.size} node ids")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "node_ids", ids)

    @property
    def num_steps(self) -> int:
        return self.values.shape[1]

    @property
    def feature_count(self) -> int:
        return self.values.shape[2]

    def steps_per_week(self) -> int:
        return 7 * 24 * 60 // self.timestep_minutes


# -- sensor quality ----------------------------------------------------------


@dataclass(frozen=True)
class SensorStats:
    sensor_id: int
    location_shift_m: float
    missing_ratio: float
    years_present: frozenset


@dataclass
class SensorQualityReport:
    stats: dict[int, SensorStats]
    shift_ok: dict[int, bool]
    missing_ok: dict[int, bool]
    persistent: dict[int, bool]
    kept: set[int] = field(default_factory=set)

    def passed(self, sensor_id: int) -> bool:
        return sensor_id in self.kept


def filter_sensors(
    stats: Iterable[SensorStats],
    years: Sequence[int],
    max_shift_m: float = 100.0,
    max_missing: float = 0.15,
) -> SensorQualityReport:
    """Keep sensors that moved < max_shift_m, miss < max_missing of their data,
    and, once seen, are present in every later year."""
    years = sorted(years)
    stats = {s.sensor_id: s for s in stats}
    report = SensorQualityReport(stats, {}, {}, {})
    for sid, s in stats.items():
        report.shift_ok[sid] = s.location_shift_m < max_shift_m
        report.missing_ok[sid] = s.missing_ratio < max_missing
        present = set(s.years_present)
        if present:
            first = min(present)
            report.persistent[sid] = all(y in present for y in years if y >= first)
        else:
            report.persistent[sid] = False
        if report.shift_ok[sid] and report.missing_ok[sid] and report.persistent[sid]:
            report.kept.add(sid)
    return report


def impute_missing(values: np.ndarray) -> np.ndarray:
    """Linear interpolation of NaN gaps along time; edges take the nearest observation."""
    v = np.array(values, dtype=np.float64)
    if v.ndim != 3:
        raise ValueError(f"expected (nodes, time, features), got {v.shape}")
    t = np.arange(v.shape[1])
    for n in range(v.shape[0]):
        for f in range(v.shape[2]):
            series = v[n, :, f]
            gap = np.isnan(series)
            if not gap.any():
                continue
            if gap.all():
                raise ValidationError(f"node row {n} feature {f} has no observations")
            series[gap] = np.interp(t[gap], t[~gap], series[~gap])
    return v


# -- splits and windows ------------------------------------------------------


@dataclass(frozen=True)
class SplitIndices:
    train: tuple[int, int]
    val: tuple[int, int]
    test: tuple[int, int]


def split_6_2_2(total_steps: int, in_steps: int = IN_STEPS, horizon: int = HORIZON) -> SplitIndices:
    if total_steps < 3 * (in_steps + horizon):
        raise ValidationError(f"{total_steps} steps is too short for a 6:2:2 split with {in_steps}+{horizon} windows")
    n_train = math.floor(0.6 * total_steps)
    n_val = math.floor(0.2 * total_steps)
    return SplitIndices((0, n_train), (n_train, n_train + n_val), (n_train + n_val, total_steps))


@dataclass(frozen=True, eq=False)
class WindowBatch:
    inputs: np.ndarray  # (B, N, T, F)
    targets: np.ndarray  # (B, N, K)

    def __len__(self) -> int:
        return self.inputs.shape[0]


def window_starts(span: tuple[int, int], in_steps: int = IN_STEPS, horizon: int = HORIZON) -> np.ndarray:
    start, stop = span
    if stop - start < in_steps + horizon:
        raise ValidationError(f"range {span} holds no {in_steps}+{horizon} window")
    return np.arange(start, stop - in_steps - horizon + 1)


def gather_windows(values: np.ndarray, starts: np.ndarray, in_steps: int = IN_STEPS, horizon: int = HORIZON) -> WindowBatch:
    """Windows beginning at ``starts``; targets are feature 0 of the next ``horizon`` steps."""
    n, _, nf = values.shape
    win = np.lib.stride_tricks.sliding_window_view(values, in_steps + horizon, axis=1)  # (N, S, F, T+K)
    sel = win[:, starts]  # (N, B, F, T+K)
    inputs = np.ascontiguousarray(sel[..., :in_steps].transpose(1, 0, 3, 2))
    targets = np.ascontiguousarray(sel[:, :, 0, in_steps:].transpose(1, 0, 2))
    return WindowBatch(inputs, targets)


def make_windows(
    values: np.ndarray,
    span: tuple[int, int],
    in_steps: int = IN_STEPS,
    horizon: int = HORIZON,
    batch_size: int = BATCH_SIZE,
    shuffle: bool = False,
    seed: int | None = None,
) -> Iterator[WindowBatch]:
    """Stride-1 windows fully inside ``span``, in batches (last one may be short)."""
    starts = window_starts(span, in_steps, horizon)
    if shuffle:
        starts = np.random.default_rng(seed).permutation(starts)
    for i in range(0, starts.size, batch_size):
        yield gather_windows(values, starts[i : i + batch_size], in_steps, horizon)


@dataclass(frozen=True)
class Scaler:
    mean: float
    std: float

    def normalize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean


def normalize_flows(values: np.ndarray, train_span: tuple[int, int]) -> tuple[np.ndarray, Scaler]:
    """Z-score with statistics pooled over all nodes/features of the training range."""
    start, stop = train_span
    if stop <= start:
        raise ValidationError("training range is empty")
    ref = values[:, start:stop]
    scaler = Scaler(float(ref.mean()), max(float(ref.std()), STD_FLOOR))
    return scaler.normalize(values), scaler


# -- corpus files ------------------------------------------------------------


def _rows(path: Path) -> list[list[str]]:
    with open(path, newline="") as fh:
        return [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def _drop_header(rows: list[list[str]]) -> list[list[str]]:
    if rows and not all(_is_number(c) for c in rows[0]):
        return rows[1:]
    return rows


def read_manifest(root: Path) -> list[tuple[int, int, int, int]]:
    path = Path(root) / "manifest.txt"
    if not path.exists():
        raise CorpusError(f"{path} not found")
    entries = []
    for lineno, row in enumerate(_rows(path), 1):
        try:
            year, n, steps, feats = (int(c) for c in row)
        except ValueError:
            raise CorpusError(f"manifest line {lineno}: expected year,nodes,timesteps,features, got {row}") from None
        entries.append((year, n, steps, feats))
    if not entries:
        raise CorpusError("manifest lists no years")
    return sorted(entries)


def load_corpus(
    root, sigma_d: float = SIGMA_D, epsilon: float = EPSILON, timestep_minutes: int = 5
) -> tuple[StreamingGraph, list[FlowTensor]]:
    root = Path(root)
    snapshots, flows = [], []
    for year, n, steps, nf in read_manifest(root):
        ydir = root / f"year_{year}"
        if not ydir.is_dir():
            raise CorpusError(f"year {year} listed in manifest but {ydir} is missing")
        for name in ("nodes.csv", "distances.csv", "flow.csv"):
            if not (ydir / name).exists():
                raise CorpusError(f"year {year}: {name} missing")

        rows = _rows(ydir / "nodes.csv")
        if not rows or rows[0][0].strip() != "global_id":
            raise CorpusError(f"year {year}: nodes.csv needs a global_id,pos_x,pos_y header")
        try:
            ids = np.array([int(r[0]) for r in rows[1:]], dtype=np.int64)
            pos = np.array([[float(r[1]), float(r[2])] for r in rows[1:]], dtype=np.float64).reshape(-1, 2)
        except (ValueError, IndexError):
            raise CorpusError(f"year {year}: malformed nodes.csv") from None
        if ids.size != n:
            raise CorpusError(f"year {year}: manifest says {n} nodes, nodes.csv has {ids.size}")
        index = {int(i): k for k, i in enumerate(ids)}
        if len(index) != n:
            raise CorpusError(f"year {year}: duplicate node ids in nodes.csv")

        dist = np.full((n, n), np.inf)
        np.fill_diagonal(dist, 0.0)
        for r in _drop_header(_rows(ydir / "distances.csv")):
            try:
                a, b, d = index[int(r[0])], index[int(r[1])], float(r[2])
            except (KeyError, ValueError, IndexError):
                raise CorpusError(f"year {year}: bad distances.csv row {r}") from None
            dist[a, b] = dist[b, a] = d
        if np.any(dist < 0):
            raise CorpusError(f"year {year}: negative distance")

        flow_rows = _rows(ydir / "flow.csv")
        if len(flow_rows) != n:
            raise CorpusError(f"year {year}: flow.csv has {len(flow_rows)} rows for {n} nodes")
        try:
            values = np.array([[float(c) for c in r] for r in flow_rows], dtype=np.float64)
        except ValueError:
            raise CorpusError(f"year {year}: non-numeric entry in flow.csv") from None
        if values.shape[1] != steps * nf:
            raise CorpusError(f"year {year}: flow.csv has {values.shape[1]} columns, expected {steps}*{nf}")
        values = values.reshape(n, steps, nf)

        mpath = ydir / "missing.csv"
        if mpath.exists():
            for r in _drop_header(_rows(mpath)):
                try:
                    values[index[int(r[0])], int(r[1]), int(r[2])] = np.nan
                except (KeyError, ValueError, IndexError):
                    raise CorpusError(f"year {year}: bad missing.csv row {r}") from None
        try:
            values = impute_missing(values)
        except ValidationError as exc:
            raise CorpusError(f"year {year}: {exc}") from None

        snapshots.append(GraphSnapshot(year, ids, build_adjacency(dist, sigma_d, epsilon), pos))
        flows.append(FlowTensor(values, ids, timestep_minutes))
    try:
        graph = StreamingGraph(tuple(snapshots))
    except StreamIntegrityError as exc:
        raise CorpusError(str(exc)) from None
    return graph, flows


def write_corpus(root, graph: StreamingGraph, flows: Sequence[FlowTensor], decimals: int = 2) -> Path:
    """Write the text layout understood by :func:`load_corpus`.

    Distances are Euclidean between node positions (all pairs).
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for snap, flow in zip(graph, flows):
        n, steps, nf = flow.values.shape
        lines.append(f"{snap.year},{n},{steps},{nf}")
        ydir = root / f"year_{snap.year}"
        ydir.mkdir(exist_ok=True)
        pos = snap.positions
        dist = pairwise_distances(pos)
        with open(ydir / "nodes.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["global_id", "pos_x", "pos_y"])
            for i, nid in enumerate(snap.node_ids):
                w.writerow([int(nid), repr(float(pos[i, 0])), repr(float(pos[i, 1]))])
        with open(ydir / "distances.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id_a", "id_b", "distance"])
            for a in range(n):
                for b in range(a + 1, n):
                    w.writerow([int(snap.node_ids[a]), int(snap.node_ids[b]), repr(float(dist[a, b]))])
        fmt = f"%.{decimals}f"
        np.savetxt(ydir / "flow.csv", flow.values.reshape(n, steps * nf), delimiter=",", fmt=fmt)
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")
    return root
