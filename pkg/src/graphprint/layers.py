"""Graph convolution layers: edge convolution, stacked GCN blocks, feed-forward.

The edge convolution computes, for each directed edge (i <- j),

    e_ij = GeLU((x_j - x_i) @ theta + x_i @ phi)

aggregates per vertex with a channelwise max over its edges, concatenates
the aggregate with the vertex's own feature, and applies a linear update.
The difference term is evaluated as gather(x@theta) so the expensive matrix
products run over vertices instead of edges; this is algebraically identical
to the per-edge form.

A GCN block stacks L such layers, each followed by batch normalization and
GeLU, with optional vertex-wise residual connections. The feed-forward
module is a two-layer perceptron with GeLU, applied with its own residual,
used to keep vertex features from collapsing in deep stacks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import BatchNorm, Tensor, concat_cols, matmul, neighbor_max, parameter
from .errors import ShapeError, ValidationError
from .graphs import NeighborGraph


@dataclass
class EdgeConvParams:
    """Learnable arrays of one edge-convolution layer.

    theta, phi: (c_in, c_mid); update_w: (c_in + c_mid, c_out).
    Residual use requires c_out == c_in.
    """

    theta: Tensor
    phi: Tensor
    update_w: Tensor

    @staticmethod
    def init(c_in: int, c_mid: int, c_out: int, rng: np.random.Generator) -> "EdgeConvParams":
        return EdgeConvParams(
            theta=parameter(_glorot(rng, c_in, c_mid)),
            phi=parameter(_glorot(rng, c_in, c_mid)),
            update_w=parameter(_glorot(rng, c_in + c_mid, c_out)),
        )

    def tensors(self) -> dict[str, Tensor]:
        return {"theta": self.theta, "phi": self.phi, "update_w": self.update_w}


@dataclass
class FeedForwardParams:
    """Two fully-connected layers whose round trip preserves the width."""

    w1: Tensor
    w2: Tensor

    @staticmethod
    def init(channels: int, hidden: int, rng: np.random.Generator) -> "FeedForwardParams":
        return FeedForwardParams(
            w1=parameter(_glorot(rng, channels, hidden)),
            w2=parameter(_glorot(rng, hidden, channels)),
        )

    def tensors(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "w2": self.w2}


@dataclass
class GCNBlockConfig:
    layer_count: int
    width: int
    fan_out: int
    dilation_rates: list[int] = field(default_factory=list)
    residual: bool = True

    def __post_init__(self):
        if self.layer_count < 1 or self.width < 1:
            raise ValidationError("GCN block needs layer_count >= 1 and width >= 1")
        if not self.dilation_rates:
            self.dilation_rates = [1] * self.layer_count
        if len(self.dilation_rates) != self.layer_count:
            raise ValidationError("one dilation rate per layer required")


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    scale = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, scale, size=(fan_in, fan_out))


def edge_features(x: Tensor, graph: NeighborGraph, params: EdgeConvParams) -> Tensor:
    """Per-edge features GeLU((x_j - x_i) @ theta + x_i @ phi), ordered by
    (center vertex, neighbor rank)."""
    if graph.vertex_count != x.rows:
        raise ShapeError(
            f"graph has {graph.vertex_count} vertices but features have {x.rows} rows")
    if params.theta.rows != x.cols or params.phi.rows != x.cols:
        raise ShapeError(
            f"edge parameters expect {params.theta.rows} channels, got {x.cols}")
    xt = matmul(x, params.theta)
    xp = matmul(x, params.phi)
    mixed = xp - xt                       # edge term = gather_j(xt) + gather_i(xp - xt)
    neighbors = xt.gather_rows(graph.flat_neighbors, graph.neighbor_plan(x.rows))
    centers = mixed.gather_rows(graph.flat_centers, graph.center_plan(x.rows))
    return (neighbors + centers).gelu()


def edge_conv(x: Tensor, graph: NeighborGraph, params: EdgeConvParams) -> Tensor:
    """EdgeConv: concat(x_i, max_j e_ij) @ update_w, rowwise per vertex."""
    edges = edge_features(x, graph, params)
    aggregated = neighbor_max(edges, graph.edge_slots)
    combined = concat_cols(x, aggregated)
    if params.update_w.rows != combined.cols:
        raise ShapeError(
            f"update weight expects {params.update_w.rows} inputs, got {combined.cols}")
    return matmul(combined, params.update_w)


def gcn_block(x: Tensor, graphs: list[NeighborGraph], convs: list[EdgeConvParams],
              norms: list[BatchNorm], mode: str, residual: bool,
              indptr: np.ndarray | None = None,
              collect_snapshots: bool = False) -> tuple[Tensor, list[np.ndarray]]:
    """Stack of EdgeConv -> batchnorm -> GeLU layers with optional residuals.

    ``graphs`` holds one (possibly dilated) graph per layer. ``indptr``
    carries the block boundaries when several independent graphs share the
    rows. Returns the final features and, when requested, a copy of the
    feature matrix after every layer for over-smoothing diagnostics.
    """
    if not (len(graphs) == len(convs) == len(norms)):
        raise ValidationError("gcn_block needs one graph, conv, and norm per layer")
    snapshots: list[np.ndarray] = []
    for graph, conv, norm in zip(graphs, convs, norms):
        y = norm(edge_conv(x, graph, conv), mode, indptr).gelu()
        x = y + x if residual else y
        if collect_snapshots:
            snapshots.append(x.data.copy())
    return x, snapshots


def feed_forward(x: Tensor, params: FeedForwardParams) -> Tensor:
    """GeLU(x @ w1) @ w2 + x; the residual keeps the map width-preserving."""
    if params.w1.rows != x.cols:
        raise ShapeError(
            f"feed_forward expects {params.w1.rows} channels, got {x.cols}")
    if params.w2.cols != x.cols:
        raise ShapeError("feed_forward round trip must preserve the width")
    return matmul(matmul(x, params.w1).gelu(), params.w2) + x
