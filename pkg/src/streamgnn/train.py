"""AdamW, early-stopped yearly training and the year-over-year strategies."""

from __future__ import annotations

import ctypes
import ctypes.util
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import NumericError
from .data import FlowTensor, Scaler, SplitIndices, gather_windows, make_windows, normalize_flows, split_6_2_2, window_starts
from .detect import JsdReport, score_nodes, select_evolved, select_replay
from .ewc import FisherDiagonal, estimate_fisher, ewc_penalty, save_fisher
from .graph import GraphSnapshot, StreamingGraph, k_hop_subgraph
from .metrics import HorizonMetrics, YearReport
from .model import ModelConfig, ModelParams, forward, init_params, loss_and_grad, save_params

log = logging.getLogger(__name__)

STRATEGIES = ("static", "expansible", "retrained", "trafficstream")
EVAL_BATCH = 256


_HEAP_TUNED = False


def reuse_heap_memory() -> bool:
    """Ask glibc to keep large freed blocks instead of unmapping them.

    Every training step allocates and frees arrays of tens of MB; by default
    each goes back to the OS and is page-faulted in again on the next step,
    which costs about a fifth of an epoch.  No effect on other C libraries.
    """
    global _HEAP_TUNED
    if _HEAP_TUNED:
        return True
    _HEAP_TUNED = True
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    m_trim_threshold, m_top_pad, m_mmap_threshold = -1, -2, -3
    ok = mallopt(m_mmap_threshold, 1 << 30) and mallopt(m_trim_threshold, 1 << 30) and mallopt(m_top_pad, 64 << 20)
    return bool(ok)


class AdamW:
    """Adam with decoupled weight decay on a flat parameter vector."""

    def __init__(self, size: int, lr: float = 0.005, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 1e-4):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if theta.shape != self.m.shape or grad.shape != self.m.shape:
            raise ValueError("parameter/gradient vector does not match optimizer state")
        bad = np.flatnonzero(~np.isfinite(grad))
        if bad.size:
            raise NumericError(f"non-finite gradient at parameter index {int(bad[0])}")
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return theta - self.lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * theta)


@dataclass(frozen=True)
class TrainPlan:
    strategy: str = "trafficstream"
    use_expand: bool = True
    use_detect: bool = True
    use_replay: bool = True
    use_smooth: bool = True
    epochs: int = 100
    patience: int = 10
    min_delta: float = 1e-4
    batch_size: int = 128
    lr: float = 0.005
    weight_decay: float = 1e-4
    evolved_fraction: float = 0.05
    replay_fraction: float = 0.10
    lam: float = 1.0
    hops: int = 2
    seed: int = 0
    fisher_samples: int | None = 256
    model: ModelConfig = ModelConfig()

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.epochs < 0 or self.patience < 1 or self.batch_size < 1:
            raise ValueError("epochs >= 0, patience >= 1 and batch_size >= 1 required")

    @property
    def switches(self) -> dict[str, bool]:
        return {k: getattr(self, k) for k in ("use_expand", "use_detect", "use_replay", "use_smooth")}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainPlan":
        d = dict(d)
        d["model"] = ModelConfig(**d.get("model", {}))
        return cls(**d)


# the five ablations, as switch overrides on the full method
ABLATIONS = {
    "non_expand": {"use_expand": False},
    "non_detect": {"use_detect": False},
    "non_conso": {"use_replay": False, "use_smooth": False},
    "non_replay": {"use_replay": False},
    "non_smooth": {"use_smooth": False},
}


@dataclass(eq=False)
class YearData:
    snapshot: GraphSnapshot
    raw: np.ndarray
    values: np.ndarray  # normalized
    scaler: Scaler
    split: SplitIndices
    timestep_minutes: int = 5

    @property
    def steps_per_week(self) -> int:
        return 7 * 24 * 60 // self.timestep_minutes


def prepare_year(snapshot: GraphSnapshot, flow: FlowTensor, config: ModelConfig) -> YearData:
    if not np.array_equal(snapshot.node_ids, flow.node_ids):
        raise ValueError(f"year {snapshot.year}: flow rows are not aligned with snapshot nodes")
    split = split_6_2_2(flow.num_steps, config.in_steps, config.horizon)
    values, scaler = normalize_flows(flow.values, split.train)
    return YearData(snapshot, flow.values, values, scaler, split, flow.timestep_minutes)


def predict(params: ModelParams, adjacency, values: np.ndarray, span: tuple[int, int]) -> np.ndarray:
    """Normalized predictions (windows, N, K) for every window in ``span``."""
    cfg = params.config
    starts = window_starts(span, cfg.in_steps, cfg.horizon)
    out = []
    for i in range(0, starts.size, EVAL_BATCH):
        batch = gather_windows(values, starts[i : i + EVAL_BATCH], cfg.in_steps, cfg.horizon)
        out.append(forward(params, adjacency, batch.inputs))
    return np.concatenate(out)


def truth(raw: np.ndarray, span: tuple[int, int], config: ModelConfig) -> np.ndarray:
    starts = window_starts(span, config.in_steps, config.horizon)
    return gather_windows(raw, starts, config.in_steps, config.horizon).targets


def evaluate(params: ModelParams, yd: YearData, span: tuple[int, int] | None = None) -> HorizonMetrics:
    span = yd.split.test if span is None else span
    pred = yd.scaler.denormalize(predict(params, yd.snapshot.adjacency, yd.values, span))
    return HorizonMetrics.compute(pred, truth(yd.raw, span, params.config))


def _val_mae(params: ModelParams, yd: YearData, val_truth: np.ndarray) -> float:
    pred = yd.scaler.denormalize(predict(params, yd.snapshot.adjacency, yd.values, yd.split.val))
    return float(np.mean(np.abs(pred - val_truth)))


def _epoch_seed(seed: int, year: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, year, epoch]).generate_state(1)[0])


@dataclass
class YearTrainOutcome:
    params: ModelParams
    epoch_times: list[float] = field(default_factory=list)
    val_history: list[float] = field(default_factory=list)  # index 0 is the starting point
    trained_nodes: int = 0
    best_epoch: int = 0
    fisher: FisherDiagonal | None = None
    last_params: ModelParams | None = None  # final iterate, before best-checkpoint selection

    @property
    def epochs_run(self) -> int:
        return len(self.epoch_times)

    @property
    def total_seconds(self) -> float:
        return float(sum(self.epoch_times))

    @property
    def seconds_per_epoch(self) -> float:
        return self.total_seconds / self.epochs_run if self.epoch_times else 0.0


def train_one_year(
    plan: TrainPlan,
    params: ModelParams,
    yd: YearData,
    train_ids: Sequence[int] | None = None,
    anchor: tuple[ModelParams, FisherDiagonal] | None = None,
) -> YearTrainOutcome:
    """Minibatch AdamW on the given nodes, early-stopped on full-graph validation MAE.

    Returns the best validation parameters seen, including the starting point.
    """
    reuse_heap_memory()
    snap = yd.snapshot
    if train_ids is None:
        idx = np.arange(snap.num_nodes)
    else:
        idx = snap.indices(sorted(int(i) for i in train_ids))
    adj = snap.adjacency[np.ix_(idx, idx)]
    values = yd.values[idx]
    cfg = params.config

    val_truth = truth(yd.raw, yd.split.val, cfg)
    theta = params.flatten()
    best_theta, best = theta.copy(), _val_mae(params, yd, val_truth)
    ref, wait = best, 0
    opt = AdamW(theta.size, plan.lr, weight_decay=plan.weight_decay)
    use_ewc = anchor is not None and plan.lam > 0
    anchor_flat = anchor[0].flatten() if use_ewc else None

    outcome = YearTrainOutcome(params, trained_nodes=int(idx.size), val_history=[best])
    for epoch in range(plan.epochs):
        t0 = time.perf_counter()
        batches = make_windows(
            values, yd.split.train, cfg.in_steps, cfg.horizon, plan.batch_size, shuffle=True,
            seed=_epoch_seed(plan.seed, snap.year, epoch),
        )
        current = params
        for batch in batches:
            current = ModelParams.from_flat(cfg, theta)
            _, grad = loss_and_grad(current, adj, batch.inputs, batch.targets)
            if use_ewc:
                grad = grad + ewc_penalty(theta, anchor_flat, anchor[1], plan.lam)[1]
            theta = opt.step(theta, grad)
        current = ModelParams.from_flat(cfg, theta)
        score = _val_mae(current, yd, val_truth)
        outcome.epoch_times.append(time.perf_counter() - t0)
        outcome.val_history.append(score)
        if score < best:
            best, best_theta, outcome.best_epoch = score, theta.copy(), epoch + 1
        if score < ref - plan.min_delta:
            ref, wait = score, 0
        else:
            wait += 1
            if wait >= plan.patience:
                break
    outcome.params = ModelParams.from_flat(cfg, best_theta)
    outcome.last_params = ModelParams.from_flat(cfg, theta)
    log.debug("year %s: %d epochs on %d nodes, best val MAE %.4f", snap.year, outcome.epochs_run, idx.size, best)
    return outcome


def fisher_for(plan: TrainPlan, params: ModelParams, yd: YearData) -> FisherDiagonal:
    cfg = params.config
    batches = make_windows(yd.values, yd.split.train, cfg.in_steps, cfg.horizon, plan.batch_size)
    return estimate_fisher(params, yd.snapshot.adjacency, batches, plan.fisher_samples)


@dataclass
class YearResult:
    year: int
    params: ModelParams
    outcome: YearTrainOutcome
    report: YearReport
    fisher: FisherDiagonal | None = None
    jsd: JsdReport | None = None
    trained_ids: np.ndarray | None = None
    events: list[str] = field(default_factory=list)


def train_first_year(plan: TrainPlan, yd: YearData) -> YearTrainOutcome:
    return train_one_year(plan, init_params(plan.model, plan.seed), yd)


def _carry(params: ModelParams) -> YearTrainOutcome:
    return YearTrainOutcome(params)


def run_strategy(
    plan: TrainPlan,
    graph: StreamingGraph,
    flows: Sequence[FlowTensor],
    out_dir=None,
    first_year: YearTrainOutcome | None = None,
) -> list[YearResult]:
    """Run ``plan.strategy`` over every year; optionally write per-year files.

    ``first_year`` lets several strategies share one first-year training.
    """
    if len(graph) != len(flows) or not len(graph):
        raise ValueError("need one flow tensor per snapshot and at least one year")
    results: list[YearResult] = []
    prev_yd: YearData | None = None
    wants_fisher = plan.strategy == "trafficstream" and plan.use_smooth
    for i, (snap, flow) in enumerate(zip(graph, flows)):
        yd = prepare_year(snap, flow, plan.model)
        events: list[str] = []
        jsd = None
        trained_ids = snap.node_ids
        t0 = time.perf_counter()
        if i == 0:
            outcome = first_year if first_year is not None else train_first_year(plan, yd)
        else:
            prev = results[-1]
            new = graph.new_nodes(i)
            if plan.strategy == "static":
                outcome = _carry(prev.params)
                trained_ids = np.array([], dtype=np.int64)
            elif plan.strategy == "retrained":
                outcome = train_one_year(plan, prev.params, yd)
            elif plan.strategy == "expansible":
                if new:
                    sub = k_hop_subgraph(snap, new, plan.hops)
                    trained_ids = sub.node_ids
                    outcome = train_one_year(plan, prev.params, yd, trained_ids)
                else:
                    events.append("no new nodes: parameters carried forward")
                    outcome = _carry(prev.params)
                    trained_ids = np.array([], dtype=np.int64)
            else:
                seeds: set[int] = set(new) if plan.use_expand else set()
                if plan.use_detect or plan.use_replay:
                    jsd = score_nodes(prev.params, prev_yd.snapshot, snap, prev_yd.values, yd.values, yd.steps_per_week)
                    evolved = select_evolved(jsd, plan.evolved_fraction) if plan.use_detect else set()
                    seeds |= evolved
                    if plan.use_replay:
                        seeds |= select_replay(jsd, plan.replay_fraction, exclude=evolved)
                if seeds:
                    sub = k_hop_subgraph(snap, seeds, plan.hops)
                    trained_ids = sub.node_ids
                    anchor = (prev.params, prev.fisher) if plan.use_smooth and prev.fisher is not None else None
                    outcome = train_one_year(plan, prev.params, yd, trained_ids, anchor)
                else:
                    events.append("empty training set: parameters carried forward")
                    log.warning("year %s: empty training node set, carrying parameters forward", snap.year)
                    outcome = _carry(prev.params)
                    trained_ids = np.array([], dtype=np.int64)
        fisher = fisher_for(plan, outcome.params, yd) if wants_fisher else None
        outcome.fisher = fisher
        wall = time.perf_counter() - t0

        report = YearReport(
            year=snap.year,
            metrics=evaluate(outcome.params, yd),
            total_seconds=outcome.total_seconds,
            seconds_per_epoch=outcome.seconds_per_epoch,
            epochs=outcome.epochs_run,
            trained_nodes=int(len(trained_ids)),
            strategy=plan.strategy,
            switches=plan.switches,
            wall_seconds=wall,
            events=events,
        )
        res = YearResult(snap.year, outcome.params, outcome, report, fisher, jsd, np.asarray(trained_ids), events)
        results.append(res)
        if out_dir is not None:
            write_year_outputs(Path(out_dir), res)
        prev_yd = yd
    return results


def write_year_outputs(run_dir: Path, res: YearResult) -> Path:
    ydir = Path(run_dir) / f"year_{res.year}"
    ydir.mkdir(parents=True, exist_ok=True)
    save_params(ydir / "params.bin", res.params)
    if res.fisher is not None:
        save_fisher(ydir / "fisher.bin", res.params, res.fisher)
    if res.jsd is not None:
        res.jsd.to_csv(ydir / "jsd.csv")
    r = res.report
    timing = {
        "total_seconds": r.total_seconds,
        "seconds_per_epoch": r.seconds_per_epoch,
        "wall_seconds": r.wall_seconds,
        "epochs": r.epochs,
        "best_epoch": res.outcome.best_epoch,
        "trained_nodes": r.trained_nodes,
    }
    (ydir / "timing.txt").write_text("".join(f"{k}={v!r}\n" for k, v in timing.items()))
    m = r.metrics
    lines = [f"mae_all={m.mae_all!r}"]
    for s in sorted(m.mae):
        lines += [f"mae_{s}={m.mae[s]!r}", f"rmse_{s}={m.rmse[s]!r}", f"mape_{s}={m.mape[s]!r}"]
    (ydir / "metrics.txt").write_text("\n".join(lines) + "\n")
    np.savetxt(ydir / "trained_nodes.txt", np.asarray(res.trained_ids, dtype=np.int64), fmt="%d")
    if res.events:
        (ydir / "events.txt").write_text("\n".join(res.events) + "\n")
    return ydir


def strategy_static(graph, flows, plan: TrainPlan | None = None, **kw) -> list[YearResult]:
    return run_strategy(replace(plan or TrainPlan(), strategy="static"), graph, flows, **kw)


def strategy_expansible(graph, flows, plan: TrainPlan | None = None, **kw) -> list[YearResult]:
    return run_strategy(replace(plan or TrainPlan(), strategy="expansible"), graph, flows, **kw)


def strategy_retrained(graph, flows, plan: TrainPlan | None = None, **kw) -> list[YearResult]:
    return run_strategy(replace(plan or TrainPlan(), strategy="retrained"), graph, flows, **kw)


def strategy_trafficstream(graph, flows, plan: TrainPlan | None = None, **kw) -> list[YearResult]:
    return run_strategy(replace(plan or TrainPlan(), strategy="trafficstream"), graph, flows, **kw)
