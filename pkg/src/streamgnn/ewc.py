"""Diagonal Fisher importance and the elastic weight consolidation penalty."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .data import WindowBatch
from .model import ModelParams, _read_container, loss_and_grad, save_params


@dataclass(frozen=True, eq=False)
class FisherDiagonal:
    values: np.ndarray
    sample_count: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ValueError("Fisher diagonal must be a flat vector")
        if np.any(v < 0):
            raise ValueError("Fisher entries must be nonnegative")
        object.__setattr__(self, "values", v)


def estimate_fisher(params: ModelParams, adjacency, batches: Iterable[WindowBatch], max_samples: int | None = None) -> FisherDiagonal:
    """Mean over single windows of the squared loss gradient.

    Windows are visited in the order the batches yield them; with
    ``max_samples`` set, an evenly spaced subset of that many is used.
    """
    inputs, targets = [], []
    for batch in batches:
        inputs.append(batch.inputs)
        targets.append(batch.targets)
    if not inputs:
        raise ValueError("Fisher estimation needs at least one batch")
    inputs = np.concatenate(inputs)
    targets = np.concatenate(targets)
    picks = np.arange(len(inputs))
    if max_samples is not None and max_samples < picks.size:
        picks = np.unique(np.linspace(0, picks.size - 1, max_samples).round().astype(int))
    acc = np.zeros(params.size)
    for i in picks:
        _, g = loss_and_grad(params, adjacency, inputs[i : i + 1], targets[i : i + 1])
        acc += g * g
    return FisherDiagonal(acc / picks.size, int(picks.size))


def ewc_penalty(current, anchor, fisher: FisherDiagonal, lam: float) -> tuple[float, np.ndarray]:
    """lam * sum_i F_i (theta_i - anchor_i)^2 and its gradient.

    ``current`` and ``anchor`` may be ModelParams or flat vectors.
    """
    cur = current.flatten() if isinstance(current, ModelParams) else np.asarray(current, dtype=np.float64)
    ref = anchor.flatten() if isinstance(anchor, ModelParams) else np.asarray(anchor, dtype=np.float64)
    if cur.shape != ref.shape or cur.shape != fisher.values.shape:
        raise ValueError(f"misaligned EWC inputs: {cur.shape}, {ref.shape}, {fisher.values.shape}")
    delta = cur - ref
    weighted = fisher.values * delta
    return float(lam * np.dot(weighted, delta)), 2.0 * lam * weighted


def save_fisher(path, anchor: ModelParams, fisher: FisherDiagonal):
    """Anchor parameters plus their Fisher section in one container."""
    return save_params(path, anchor, fisher)


def load_fisher(path) -> tuple[ModelParams, FisherDiagonal]:
    params, fisher = _read_container(path)
    if fisher is None:
        raise ValueError(f"{path} has no Fisher section")
    values, samples = fisher
    return params, FisherDiagonal(values, int(samples))
