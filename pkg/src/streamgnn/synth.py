"""Synthetic expanding road networks with drifting traffic patterns.

Sensors sit along straight corridors, roughly one distance unit apart, so
neighbouring sensors on a corridor usually fall inside the adjacency
threshold and the graph is road-like.  A node's flow is a two-peak daily
profile, damped on weekends, plus an optional short-period wave.  Each
year one new corridor is grown out of an existing sensor, and a fraction
of existing sensors drift.  Both carry that year's novel pattern: a wave
whose period is specific to the year and whose amplitude is at least
``drift_scale`` noise units, on top of shifted daily peaks.  One
adjacency-weighted smoothing pass correlates neighbours before noise is
added.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import FlowTensor, ValidationError
from .graph import EPSILON, SIGMA_D, GraphSnapshot, StreamingGraph, build_adjacency, pairwise_distances

STEPS_PER_DAY_5MIN = 288
# novel waves last 5..12 steps, short enough to be seen inside one input window
WAVE_PERIODS = (5, 12)


@dataclass(frozen=True)
class SynthConfig:
    years: int = 5
    initial_nodes: int = 80
    growth: int = 8
    drift_fraction: float = 0.05
    noise_std: float = 5.0
    # minimum amplitude of the novel wave, in units of noise_std
    drift_scale: float = 4.0
    timesteps: int = 2016
    features: int = 1
    timestep_minutes: int = 5
    corridor_length: int = 10
    smoothing: float = 0.3
    first_year: int = 1
    sigma_d: float = SIGMA_D
    epsilon: float = EPSILON

    def validate(self) -> None:
        if self.years < 1:
            raise ValidationError("need at least one year")
        if self.initial_nodes < 2:
            raise ValidationError("need at least two initial nodes")
        if self.growth < 0:
            raise ValidationError("growth must be >= 0")
        if not 0.0 <= self.drift_fraction <= 1.0:
            raise ValidationError("drift_fraction must lie in [0, 1]")
        if self.noise_std < 0 or self.drift_scale < 0:
            raise ValidationError("noise_std and drift_scale must be >= 0")
        if self.timesteps < 1 or self.features < 1 or self.timestep_minutes < 1:
            raise ValidationError("timesteps, features and timestep_minutes must be positive")
        if (24 * 60) % self.timestep_minutes:
            raise ValidationError("timestep_minutes must divide a day")
        if not 0.0 <= self.smoothing < 1.0:
            raise ValidationError("smoothing must lie in [0, 1)")
        if self.corridor_length < 1:
            raise ValidationError("corridor_length must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticStream:
    graph: StreamingGraph
    flows: list[FlowTensor]
    drifted: list[set[int]]  # per year, sensors whose profile changed that year
    config: SynthConfig
    profiles: list[dict[int, dict]] = field(default_factory=list, repr=False)


def _corridor(rng, start, direction, count):
    pts = []
    p = np.asarray(start, dtype=np.float64)
    normal = np.array([-direction[1], direction[0]])
    for _ in range(count):
        p = p + direction * rng.uniform(0.6, 1.05)
        pts.append(p + normal * rng.uniform(-0.05, 0.05))
    return pts


def _unit(angle):
    return np.array([math.cos(angle), math.sin(angle)])


def _base_profile(rng) -> dict:
    return {
        "am": rng.normal(8.0, 0.4),
        "pm": rng.normal(17.5, 0.4),
        "kappa": rng.uniform(1.5, 2.5),
        "w_am": rng.uniform(0.4, 0.6),
        "amp": rng.uniform(60.0, 100.0),
        "base": rng.uniform(10.0, 30.0),
        "wave_amp": 0.0,
        "wave_period": 1.0,
        "wave_phase": 0.0,
    }


def _novel_profile(rng, period: float, wave_amp: float, like: dict | None = None) -> dict:
    """Shifted, sharper daily peaks plus a wave of the given period (in steps)."""
    if like is None:
        p = {
            "am": rng.uniform(5.0, 11.0),
            "pm": rng.uniform(13.0, 21.0),
            "kappa": rng.uniform(4.0, 8.0),
            "w_am": rng.uniform(0.1, 0.9),
            "amp": rng.uniform(60.0, 100.0),
        }
    else:
        # corridor members share the corridor's pattern up to small jitter
        p = {k: like[k] for k in ("am", "pm", "kappa", "w_am", "amp")}
        p["am"] += rng.normal(0, 0.2)
        p["pm"] += rng.normal(0, 0.2)
        p["amp"] *= rng.uniform(0.9, 1.1)
    p["base"] = rng.uniform(10.0, 30.0)
    p["wave_amp"] = wave_amp * rng.uniform(1.0, 1.5)
    p["wave_period"] = float(period)
    p["wave_phase"] = rng.uniform(0.0, 2 * np.pi)
    return p


def _signal(prof: dict, hours: np.ndarray, weekend: np.ndarray, steps: np.ndarray) -> np.ndarray:
    def bump(mu):
        return np.exp(prof["kappa"] * (np.cos(2 * np.pi * (hours - mu) / 24.0) - 1.0))

    daily = prof["w_am"] * bump(prof["am"]) + (1.0 - prof["w_am"]) * bump(prof["pm"])
    scale = np.where(weekend, 0.6, 1.0)
    wave = prof["wave_amp"] * np.sin(2 * np.pi * steps / prof["wave_period"] + prof["wave_phase"])
    return prof["base"] + prof["amp"] * scale * daily + wave


def synthesize_stream(config: SynthConfig = SynthConfig(), seed: int = 0) -> SyntheticStream:
    config.validate()
    rng = np.random.default_rng(seed)

    n0 = config.initial_nodes
    side = 2.0 * math.sqrt(n0)
    positions: list[np.ndarray] = []
    while len(positions) < n0:
        count = min(config.corridor_length, n0 - len(positions))
        start = rng.uniform(0.0, side, size=2)
        positions.extend(_corridor(rng, start, _unit(rng.uniform(0, 2 * np.pi)), count))
    profiles = {i: _base_profile(rng) for i in range(n0)}

    steps_per_day = 24 * 60 // config.timestep_minutes
    t = np.arange(config.timesteps)
    hours = (t % steps_per_day) * (24.0 / steps_per_day)
    weekend = ((t // steps_per_day) % 7) >= 5

    # one wave period per later year, distinct while the pool lasts
    pool = rng.permutation(np.arange(WAVE_PERIODS[0], WAVE_PERIODS[1] + 1))
    wave_amp = config.drift_scale * config.noise_std

    snapshots, flows, drifted, history = [], [], [], []
    for y in range(config.years):
        changed: set[int] = set()
        if y > 0:
            period = pool[(y - 1) % pool.size]
            existing = sorted(profiles)
            n_drift = int(round(config.drift_fraction * len(existing)))
            if n_drift:
                picks = rng.choice(existing, size=n_drift, replace=False)
                for nid in sorted(int(i) for i in picks):
                    new = _novel_profile(rng, period, wave_amp)
                    new["base"] = profiles[nid]["base"]
                    profiles[nid] = new
                    changed.add(nid)
            if config.growth:
                anchor = positions[int(rng.integers(len(positions)))]
                pts = _corridor(rng, anchor, _unit(rng.uniform(0, 2 * np.pi)), config.growth)
                pattern = _novel_profile(rng, period, wave_amp)
                for p in pts:
                    profiles[len(positions)] = _novel_profile(rng, period, wave_amp, like=pattern)
                    positions.append(p)
        drifted.append(changed)
        history.append({k: dict(v) for k, v in profiles.items()})

        n = len(positions)
        pos = np.array(positions)
        adj = build_adjacency(pairwise_distances(pos), config.sigma_d, config.epsilon)
        ids = np.arange(n, dtype=np.int64)
        snapshots.append(GraphSnapshot(config.first_year + y, ids, adj, pos))

        clean = np.stack([_signal(profiles[i], hours, weekend, t) for i in range(n)])
        deg = adj.sum(axis=1, keepdims=True)
        neighbour_mean = np.divide(adj @ clean, deg, out=clean.copy(), where=deg > 0)
        clean = (1.0 - config.smoothing) * clean + config.smoothing * neighbour_mean

        feats = [clean + rng.normal(0.0, config.noise_std, size=clean.shape)]
        for f in range(1, config.features):
            # auxiliary channels: noisy monotone transforms of the flow
            feats.append(clean / (f + 1.0) + rng.normal(0.0, config.noise_std, size=clean.shape))
        values = np.round(np.maximum(np.stack(feats, axis=-1), 0.0), 2)
        flows.append(FlowTensor(values, ids, config.timestep_minutes))

    return SyntheticStream(StreamingGraph(tuple(snapshots)), flows, drifted, config, history)
