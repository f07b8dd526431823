"""Exact k-nearest-neighbor graphs over minutiae and embedding batches.

All graphs are built by brute-force all-pairs comparison (the working sets
are at most a few hundred vertices), sorted by ascending distance with ties
broken by ascending vertex index. Neighbor lists are stored per vertex, in
distance order, and each vertex aggregates from its own list.

Dilated selection widens a layer's receptive field: from the ``k * rate``
nearest candidates it keeps every ``rate``-th one (ranks rate, 2*rate, ...,
k*rate). With ``rate == 1`` this is the plain k-NN graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ScatterPlan
from .errors import DataError, ShapeError, ValidationError

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class Minutia:
    """A ridge feature: normalized position (x, y) plus orientation in radians.

    The orientation is wrapped into [0, 2*pi) on construction.
    """

    x: float
    y: float
    d: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.d)):
            raise DataError("minutia components must be finite")
        object.__setattr__(self, "d", self.d % TWO_PI)

    def as_triple(self) -> list[float]:
        return [self.x, self.y, self.d]


def minutia_distance(a: Minutia, b: Minutia) -> float:
    """Spatial Euclidean distance; orientation is a feature, not a coordinate."""
    return math.hypot(a.x - b.x, a.y - b.y)


def minutiae_to_array(minutiae: list[Minutia]) -> np.ndarray:
    return np.array([[m.x, m.y, m.d] for m in minutiae], dtype=np.float64)


class NeighborGraph:
    """Per-vertex neighbor index lists in ascending-distance order."""

    def __init__(self, vertex_count: int, neighbor_lists: list[np.ndarray]):
        if len(neighbor_lists) != vertex_count:
            raise ShapeError("one neighbor list per vertex required")
        for v, lst in enumerate(neighbor_lists):
            if lst.size and (lst.min() < 0 or lst.max() >= vertex_count):
                raise ShapeError(f"neighbor index out of range at vertex {v}")
            if np.any(lst == v):
                raise ValidationError(f"self-loop at vertex {v}")
        self.vertex_count = vertex_count
        self.neighbor_lists = [np.asarray(l, dtype=np.intp) for l in neighbor_lists]
        self._cache: dict = {}

    @property
    def fan_outs(self) -> np.ndarray:
        return np.array([l.size for l in self.neighbor_lists], dtype=np.intp)

    @property
    def edge_count(self) -> int:
        return int(self.fan_outs.sum())

    @property
    def flat_neighbors(self) -> np.ndarray:
        """Neighbor ids of all directed edges, ordered by (vertex, rank)."""
        if "flat" not in self._cache:
            if self.neighbor_lists:
                self._cache["flat"] = np.concatenate(self.neighbor_lists)
            else:
                self._cache["flat"] = np.empty(0, dtype=np.intp)
        return self._cache["flat"]

    @property
    def flat_centers(self) -> np.ndarray:
        """Center-vertex id of each directed edge, same ordering."""
        if "centers" not in self._cache:
            self._cache["centers"] = np.repeat(
                np.arange(self.vertex_count, dtype=np.intp), self.fan_outs)
        return self._cache["centers"]

    @property
    def edge_slots(self) -> np.ndarray:
        """(N, max_fan) edge-row ids per vertex, -1 padded, for max aggregation."""
        if "slots" not in self._cache:
            fans = self.fan_outs
            max_fan = int(fans.max()) if fans.size else 0
            if fans.size and fans.min() == max_fan:
                slots = np.arange(self.vertex_count * max_fan,
                                  dtype=np.intp).reshape(self.vertex_count, max_fan)
            else:
                slots = np.full((self.vertex_count, max_fan), -1, dtype=np.intp)
                offsets = np.concatenate([[0], np.cumsum(fans)])
                for v in range(self.vertex_count):
                    slots[v, :fans[v]] = np.arange(offsets[v], offsets[v + 1])
            self._cache["slots"] = slots
        return self._cache["slots"]

    def neighbor_plan(self, n_rows: int) -> ScatterPlan:
        key = ("nplan", n_rows)
        if key not in self._cache:
            self._cache[key] = ScatterPlan(self.flat_neighbors, n_rows)
        return self._cache[key]

    def center_plan(self, n_rows: int) -> ScatterPlan:
        key = ("cplan", n_rows)
        if key not in self._cache:
            self._cache[key] = ScatterPlan(self.flat_centers, n_rows)
        return self._cache[key]

    def __eq__(self, other) -> bool:
        if not isinstance(other, NeighborGraph):
            return NotImplemented
        return (self.vertex_count == other.vertex_count
                and all(np.array_equal(a, b) for a, b in
                        zip(self.neighbor_lists, other.neighbor_lists)))


def _pairwise_sq_distances(points: np.ndarray) -> np.ndarray:
    n, dim = points.shape
    if dim <= 4:
        diff = points[:, None, :] - points[None, :, :]
        return np.einsum("ijk,ijk->ij", diff, diff)
    sq = np.sum(points * points, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (points @ points.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


def neighbor_ranking(points: np.ndarray, pool: int) -> np.ndarray:
    """The ``pool`` nearest neighbors of every point, nearest first.

    Ties in distance are broken by ascending vertex index (stable sort).
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n < 1:
        raise ValidationError("need at least one point")
    pool = min(pool, n - 1)
    d2 = _pairwise_sq_distances(points)
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :pool].astype(np.intp)


def knn_graph(points, k: int) -> NeighborGraph:
    """Exact k-NN graph under Euclidean distance; k clamps to n-1."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 1:
        raise ValidationError("knn_graph needs a non-empty 2-D point array")
    if k < 1:
        raise ValidationError("k must be at least 1")
    ranking = neighbor_ranking(points, k)
    return NeighborGraph(points.shape[0], [ranking[v] for v in range(points.shape[0])])


def dilated_from_ranking(ranking: np.ndarray, k: int, rate: int) -> NeighborGraph:
    """Select ranks rate, 2*rate, ..., k*rate (1-based) from a neighbor ranking.

    The candidate pool is whatever the ranking holds (already clamped at
    n-1); selection truncates when the pool runs out.
    """
    if rate < 1:
        raise ValidationError("dilation rate must be at least 1")
    n = ranking.shape[0]
    lists = [ranking[v, rate - 1:k * rate:rate] for v in range(n)]
    return NeighborGraph(n, lists)


def dilated_neighbors(points, k: int, rate: int) -> NeighborGraph:
    """Dilated k-NN: every rate-th neighbor from the k*rate nearest."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 1:
        raise ValidationError("dilated_neighbors needs a non-empty point array")
    if k < 1:
        raise ValidationError("k must be at least 1")
    if rate < 1:
        raise ValidationError("dilation rate must be at least 1")
    ranking = neighbor_ranking(points, k * rate)
    return dilated_from_ranking(ranking, k, rate)


def fingerprint_graph(embeddings, k: int) -> NeighborGraph:
    """k-NN graph over a batch of embedding vectors (batch size >= 2)."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2 or embeddings.shape[0] < 2:
        raise ValidationError(
            "a fingerprint graph needs a batch of at least 2 embeddings")
    return knn_graph(embeddings, k)


def dilation_rates(layer_count: int, step: int = 4) -> list[int]:
    """Per-layer dilation rate ceil(l / step) for layers l = 1..layer_count."""
    if layer_count < 1:
        raise ValidationError("layer_count must be at least 1")
    return [math.ceil(l / step) for l in range(1, layer_count + 1)]


@dataclass
class GraphStack:
    """One graph per layer, derived from a shared neighbor ranking."""

    per_layer: list[NeighborGraph] = field(default_factory=list)

    @staticmethod
    def build(points: np.ndarray, k: int, rates: list[int],
              ranking: np.ndarray | None = None) -> "GraphStack":
        max_rate = max(rates)
        if ranking is None:
            ranking = neighbor_ranking(points, k * max_rate)
        graphs: dict[int, NeighborGraph] = {}
        for rate in rates:
            if rate not in graphs:
                graphs[rate] = dilated_from_ranking(ranking, k, rate)
        return GraphStack([graphs[r] for r in rates])


def merge_graphs(parts: list[NeighborGraph]) -> NeighborGraph:
    """Disjoint union of several graphs, vertex ids offset block by block."""
    if not parts:
        raise ValidationError("merge_graphs needs at least one graph")
    lists: list[np.ndarray] = []
    offset = 0
    for g in parts:
        for lst in g.neighbor_lists:
            lists.append(lst + offset)
        offset += g.vertex_count
    return NeighborGraph(offset, lists)


def block_indptr(sizes: list[int]) -> np.ndarray:
    """Row boundaries of consecutive blocks of the given sizes."""
    return np.concatenate([[0], np.cumsum(np.asarray(sizes, dtype=np.intp))])
