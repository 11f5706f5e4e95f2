"""Yearly snapshots of an expanding sensor network."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

SIGMA_D = 10.0
EPSILON = 1.0


class StreamIntegrityError(ValueError):
    """Node sets of consecutive snapshots are not nested."""


def pairwise_distances(positions) -> np.ndarray:
    pos = np.asarray(positions, dtype=np.float64)
    diff = pos[:, None, :] - pos[None, :, :]
    return np.hypot(diff[..., 0], diff[..., 1])


def build_adjacency(distances, sigma_d: float = SIGMA_D, epsilon: float = EPSILON) -> np.ndarray:
    """Thresholded Gaussian kernel: exp(-d^2/sigma_d^2) for d <= epsilon, zero diagonal.

    Non-finite distances (unknown pairs) yield no edge.
    """
    d = np.asarray(distances, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ValueError(f"distance matrix must be square, got {d.shape}")
    if np.any(d < 0):
        raise ValueError("distances must be nonnegative")
    with np.errstate(invalid="ignore"):
        near = np.isfinite(d) & (d <= epsilon)
    adj = np.where(near, np.exp(-np.square(np.where(near, d, 0.0)) / sigma_d**2), 0.0)
    np.fill_diagonal(adj, 0.0)
    return np.maximum(adj, adj.T)


@dataclass(frozen=True, eq=False)
class GraphSnapshot:
    year: int
    node_ids: np.ndarray
    adjacency: np.ndarray
    positions: np.ndarray | None = None
    _index: dict = field(init=False, repr=False)

    def __post_init__(self):
        ids = np.asarray(self.node_ids, dtype=np.int64)
        adj = np.asarray(self.adjacency, dtype=np.float64)
        if adj.shape != (ids.size, ids.size):
            raise ValueError(f"adjacency {adj.shape} does not match {ids.size} nodes")
        if np.any(np.diag(adj) != 0):
            raise ValueError("adjacency diagonal must be zero")
        if np.any(adj < 0) or np.any(adj > 1):
            raise ValueError("adjacency weights must lie in [0, 1]")
        index = {int(n): i for i, n in enumerate(ids)}
        if len(index) != ids.size:
            raise ValueError("duplicate node ids")
        object.__setattr__(self, "node_ids", ids)
        object.__setattr__(self, "adjacency", adj)
        object.__setattr__(self, "_index", index)

    @property
    def num_nodes(self) -> int:
        return int(self.node_ids.size)

    @property
    def num_edges(self) -> int:
        return int(np.count_nonzero(np.triu(self.adjacency, 1)))

    def indices(self, ids: Iterable[int]) -> np.ndarray:
        try:
            return np.array([self._index[int(i)] for i in ids], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"node {exc.args[0]} not in snapshot for year {self.year}") from None

    def restrict(self, ids: Sequence[int]) -> np.ndarray:
        """Adjacency restricted to ``ids`` in the given order."""
        idx = self.indices(ids)
        return self.adjacency[np.ix_(idx, idx)]


def new_nodes(prev: GraphSnapshot, curr: GraphSnapshot) -> set[int]:
    before = set(prev.node_ids.tolist())
    after = set(curr.node_ids.tolist())
    if not before <= after:
        missing = sorted(before - after)[:5]
        raise StreamIntegrityError(f"nodes {missing} vanish between year {prev.year} and {curr.year}")
    return after - before


@dataclass(frozen=True)
class StreamingGraph:
    snapshots: tuple[GraphSnapshot, ...]

    def __post_init__(self):
        snaps = tuple(self.snapshots)
        object.__setattr__(self, "snapshots", snaps)
        for a, b in zip(snaps, snaps[1:]):
            if b.year <= a.year:
                raise StreamIntegrityError(f"years not increasing: {a.year} then {b.year}")
            new_nodes(a, b)

    def __len__(self) -> int:
        return len(self.snapshots)

    def __getitem__(self, i: int) -> GraphSnapshot:
        return self.snapshots[i]

    def __iter__(self):
        return iter(self.snapshots)

    def new_nodes(self, i: int) -> set[int]:
        """Ids first appearing in snapshot ``i`` (all nodes for the first one)."""
        if i == 0:
            return set(self.snapshots[0].node_ids.tolist())
        return new_nodes(self.snapshots[i - 1], self.snapshots[i])


@dataclass(frozen=True, eq=False)
class SubgraphView:
    positions: np.ndarray
    node_ids: np.ndarray
    adjacency: np.ndarray

    @property
    def num_nodes(self) -> int:
        return int(self.node_ids.size)


def k_hop_subgraph(snapshot: GraphSnapshot, seeds: Iterable[int], k: int) -> SubgraphView:
    """Seeds plus every node within ``k`` hops over nonzero-weight edges.

    Kept nodes are listed in the parent's order.
    """
    if k < 0:
        raise ValueError("hop count must be >= 0")
    start = snapshot.indices(sorted(set(int(s) for s in seeds)))
    nbrs = snapshot.adjacency != 0
    depth = np.full(snapshot.num_nodes, -1, dtype=np.int64)
    depth[start] = 0
    queue = deque(start.tolist())
    while queue:
        u = queue.popleft()
        if depth[u] == k:
            continue
        for v in np.flatnonzero(nbrs[u]):
            if depth[v] < 0:
                depth[v] = depth[u] + 1
                queue.append(int(v))
    kept = np.flatnonzero(depth >= 0)
    return SubgraphView(kept, snapshot.node_ids[kept], snapshot.adjacency[np.ix_(kept, kept)])
