"""Command-line entry point.

    streamgnn synth --out corpus/ --seed 7
    streamgnn run --corpus corpus/ --strategy trafficstream --no-replay --out runs/a
    streamgnn run --config runs/a/run_config.json --out runs/b
    streamgnn bench --corpus corpus/ --out runs/bench
    streamgnn ablate --corpus corpus/ --out runs/ablate
    streamgnn selfcheck

Without --out, outputs go under $STREAMGNN_OUT (default ./runs).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import __version__
from .data import CorpusError, ValidationError, load_corpus, write_corpus
from .graph import EPSILON, SIGMA_D
from .metrics import assemble_report, write_comparison
from .model import ModelConfig
from .synth import SynthConfig, synthesize_stream
from .train import ABLATIONS, STRATEGIES, TrainPlan, prepare_year, run_strategy, train_first_year

log = logging.getLogger("streamgnn")

OUT_ENV = "STREAMGNN_OUT"
CONFIG_NAME = "run_config.json"


@dataclass
class RunConfig:
    """Everything needed to reproduce one run; written into the run directory."""

    plan: TrainPlan = field(default_factory=TrainPlan)
    corpus: str | None = None
    synth: SynthConfig | None = None
    synth_seed: int = 0
    sigma_d: float = SIGMA_D
    epsilon: float = EPSILON
    out: str = "runs"

    def to_dict(self) -> dict:
        return {
            "version": __version__,
            "plan": self.plan.to_dict(),
            "corpus": self.corpus,
            "synth": None if self.synth is None else self.synth.to_dict(),
            "synth_seed": self.synth_seed,
            "sigma_d": self.sigma_d,
            "epsilon": self.epsilon,
            "out": self.out,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        synth = d.get("synth")
        return cls(
            plan=TrainPlan.from_dict(d["plan"]),
            corpus=d.get("corpus"),
            synth=None if synth is None else SynthConfig(**synth),
            synth_seed=int(d.get("synth_seed", 0)),
            sigma_d=float(d.get("sigma_d", SIGMA_D)),
            epsilon=float(d.get("epsilon", EPSILON)),
            out=d.get("out", "runs"),
        )

    def save(self, run_dir) -> Path:
        path = Path(run_dir) / CONFIG_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def stream(self):
        """(graph, flows) from the corpus directory, or synthesized in memory."""
        if self.corpus is not None:
            return load_corpus(self.corpus, self.sigma_d, self.epsilon)
        cfg = self.synth or SynthConfig()
        s = synthesize_stream(replace(cfg, sigma_d=self.sigma_d, epsilon=self.epsilon), self.synth_seed)
        return s.graph, s.flows


def default_out(name: str) -> str:
    return str(Path(os.environ.get(OUT_ENV, "runs")) / name)


# -- argument groups ---------------------------------------------------------


def _add_synth_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("synthetic corpus")
    d = SynthConfig()
    g.add_argument("--years", type=int, default=d.years)
    g.add_argument("--nodes", type=int, default=d.initial_nodes, help="initial node count")
    g.add_argument("--growth", type=int, default=d.growth, help="new nodes per year")
    g.add_argument("--drift", type=float, default=d.drift_fraction, help="fraction of existing nodes drifting per year")
    g.add_argument("--noise", type=float, default=d.noise_std)
    g.add_argument("--drift-scale", type=float, default=d.drift_scale, help="drift amplitude in noise units")
    g.add_argument("--timesteps", type=int, default=d.timesteps, help="steps per year")
    g.add_argument("--features", type=int, default=d.features)
    g.add_argument("--synth-seed", type=int, default=0)


def _synth_config(a) -> SynthConfig:
    return SynthConfig(
        years=a.years,
        initial_nodes=a.nodes,
        growth=a.growth,
        drift_fraction=a.drift,
        noise_std=a.noise,
        drift_scale=a.drift_scale,
        timesteps=a.timesteps,
        features=a.features,
        sigma_d=a.sigma_d,
        epsilon=a.epsilon,
    )


def _add_graph_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--sigma-d", type=float, default=SIGMA_D, help="distance kernel width")
    p.add_argument("--epsilon", type=float, default=EPSILON, help="adjacency distance threshold")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    d = TrainPlan()
    m = ModelConfig()
    g = p.add_argument_group("training")
    g.add_argument("--lr", type=float, default=d.lr)
    g.add_argument("--weight-decay", type=float, default=d.weight_decay)
    g.add_argument("--batch-size", type=int, default=d.batch_size)
    g.add_argument("--epochs", type=int, default=d.epochs)
    g.add_argument("--patience", type=int, default=d.patience)
    g.add_argument("--lambda", dest="lam", type=float, default=d.lam, help="EWC strength")
    g.add_argument("--evolved-fraction", type=float, default=d.evolved_fraction)
    g.add_argument("--replay-fraction", type=float, default=d.replay_fraction)
    g.add_argument("--hops", type=int, default=d.hops)
    g.add_argument("--fisher-samples", type=int, default=d.fisher_samples)
    g.add_argument("--c1", type=int, default=m.c1)
    g.add_argument("--c2", type=int, default=m.c2)
    g.add_argument("--c3", type=int, default=m.c3)
    g.add_argument("--kernel", type=int, default=m.kernel)
    g.add_argument("--seed", type=int, default=d.seed)


def _add_switch_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("ablation switches")
    g.add_argument("--no-expand", action="store_true", help="skip new-node subgraph training")
    g.add_argument("--no-detect", action="store_true", help="skip evolved-node detection")
    g.add_argument("--no-replay", action="store_true", help="skip replay of stable nodes")
    g.add_argument("--no-smooth", action="store_true", help="skip the EWC penalty")


def _plan(a, features: int, strategy: str = "trafficstream") -> TrainPlan:
    model = ModelConfig(features=features, c1=a.c1, c2=a.c2, c3=a.c3, kernel=a.kernel)
    return TrainPlan(
        strategy=strategy,
        use_expand=not getattr(a, "no_expand", False),
        use_detect=not getattr(a, "no_detect", False),
        use_replay=not getattr(a, "no_replay", False),
        use_smooth=not getattr(a, "no_smooth", False),
        epochs=a.epochs,
        patience=a.patience,
        batch_size=a.batch_size,
        lr=a.lr,
        weight_decay=a.weight_decay,
        evolved_fraction=a.evolved_fraction,
        replay_fraction=a.replay_fraction,
        lam=a.lam,
        hops=a.hops,
        seed=a.seed,
        fisher_samples=a.fisher_samples,
        model=model,
    )


def _features_of(a) -> int:
    if a.corpus is not None:
        from .data import read_manifest

        return read_manifest(Path(a.corpus))[0][3]
    return a.features


def _config_from_args(a, out: str, strategy: str = "trafficstream") -> RunConfig:
    return RunConfig(
        plan=_plan(a, _features_of(a), strategy),
        corpus=None if a.corpus is None else str(a.corpus),
        synth=None if a.corpus is not None else _synth_config(a),
        synth_seed=a.synth_seed,
        sigma_d=a.sigma_d,
        epsilon=a.epsilon,
        out=out,
    )


# -- commands ----------------------------------------------------------------


def cmd_synth(a) -> int:
    cfg = _synth_config(a)
    cfg.validate()
    s = synthesize_stream(cfg, a.seed)
    out = Path(a.out or default_out("corpus"))
    write_corpus(out, s.graph, s.flows)
    with open(out / "drifted.csv", "w") as fh:
        fh.write("year,node_id\n")
        for snap, ids in zip(s.graph, s.drifted):
            fh.writelines(f"{snap.year},{i}\n" for i in sorted(ids))
    (out / "synth_config.json").write_text(json.dumps({"seed": a.seed, **cfg.to_dict()}, indent=2, sort_keys=True) + "\n")
    sizes = " -> ".join(str(snap.num_nodes) for snap in s.graph)
    print(f"wrote {len(s.graph)}-year corpus to {out} (nodes {sizes})")
    return 0


def execute(cfg: RunConfig, run_dir=None, first_year=None, stream=None) -> dict:
    """Run one strategy; writes config, per-year files and the report. Returns the average row."""
    run_dir = Path(run_dir or cfg.out)
    cfg.save(run_dir)
    graph, flows = stream if stream is not None else cfg.stream()
    results = run_strategy(cfg.plan, graph, flows, run_dir, first_year=first_year)
    avg = assemble_report([r.report for r in results], run_dir)
    avg["mae_all"] = sum(r.report.metrics.mae_all for r in results) / len(results)
    avg["wall_s"] = sum(r.report.wall_seconds for r in results)
    return avg


def cmd_run(a) -> int:
    if a.config is not None:
        cfg = RunConfig.load(a.config)
        if a.out is not None:
            cfg.out = a.out
    else:
        cfg = _config_from_args(a, a.out or default_out(a.strategy), a.strategy)
    avg = execute(cfg)
    print(f"{cfg.plan.strategy}: averaged MAE {avg['mae_all']:.4f} (15/30/60 min: "
          f"{avg['mae_15']:.3f}/{avg['mae_30']:.3f}/{avg['mae_60']:.3f}), report in {cfg.out}")
    return 0


def _shared_first_year(cfg: RunConfig, stream):
    graph, flows = stream
    yd = prepare_year(graph[0], flows[0], cfg.plan.model)
    return train_first_year(cfg.plan, yd)


def _suite(a, variants: dict[str, TrainPlan], name: str) -> int:
    out = Path(a.out or default_out(name))
    base = _config_from_args(a, str(out))
    stream = base.stream()
    t0 = time.perf_counter()
    first = _shared_first_year(base, stream)
    log.info("shared first year trained in %.1fs", time.perf_counter() - t0)
    rows = {}
    for label, plan in variants.items():
        cfg = replace(base, plan=plan, out=str(out / label))
        rows[label] = execute(cfg, first_year=first, stream=stream)
        log.info("%s: MAE %.4f, wall %.1fs", label, rows[label]["mae_all"], rows[label]["wall_s"])
    path = write_comparison(rows, out / "comparison.csv")
    width = max(len(k) for k in rows)
    for label, avg in rows.items():
        print(f"{label:<{width}}  mae {avg['mae_all']:.4f}  mae15 {avg['mae_15']:.3f}  "
              f"rmse15 {avg['rmse_15']:.3f}  total {avg['total_s']:.1f}s")
    print(f"comparison table: {path}")
    return 0


def cmd_bench(a) -> int:
    base = _plan(a, _features_of(a))
    return _suite(a, {s: replace(base, strategy=s) for s in STRATEGIES}, "bench")


def cmd_ablate(a) -> int:
    base = _plan(a, _features_of(a))
    variants = {"trafficstream": base}
    variants.update({k: replace(base, **v) for k, v in ABLATIONS.items()})
    return _suite(a, variants, "ablate")


def cmd_selfcheck(a) -> int:
    from .selfcheck import run_all

    t0 = time.perf_counter()
    results = run_all(a.seed)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {time.perf_counter() - t0:.1f}s")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="streamgnn", description="Continual traffic forecasting on growing sensor graphs")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic multi-year corpus")
    _add_synth_flags(s)
    _add_graph_flags(s)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_synth)

    for name, func, helptext in (
        ("run", cmd_run, "run one strategy year by year"),
        ("bench", cmd_bench, "run all four strategies with a shared first year"),
        ("ablate", cmd_ablate, "run the full method and its five ablations"),
    ):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("--corpus", help="corpus directory; synthesized in memory when omitted")
        c.add_argument("--out")
        _add_synth_flags(c)
        _add_graph_flags(c)
        _add_train_flags(c)
        if name == "run":
            c.add_argument("--strategy", choices=STRATEGIES, default="trafficstream")
            c.add_argument("--config", help="rerun from a saved run_config.json")
            _add_switch_flags(c)
        c.set_defaults(func=func)

    c = sub.add_parser("selfcheck", help="gradient and divergence checks")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CorpusError, ValidationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
