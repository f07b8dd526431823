"""Two-level embedding model: minutia-level encoder and batch-level refiner.

The minutia stage turns one fingerprint's minutia set into a fixed-length
local embedding: stem projection of the (x, y, orientation) features, a
stack of edge-convolution layers over the minutia k-NN graph (with per-layer
dilation), a linear head with GeLU, normalization, an optional feed-forward
module, and a channelwise max-pool over the vertices. Max-pooling on top of
permutation-equivariant layers makes the result independent of minutia
order.

The batch stage refines a batch of local embeddings over a k-NN graph built
across the batch and L2-normalizes the rows, so every final embedding has
unit norm and inner products behave like cosine similarities.

Several fingerprints are encoded in one recorded computation by merging
their graphs into a disjoint union; per-fingerprint batch-norm segments keep
the semantics identical to encoding each fingerprint alone.
"""

from __future__ import annotations

import numpy as np

from .autodiff import BatchNorm, Tensor, constant, matmul, parameter, segment_max
from .config import ModelConfig
from .errors import DataError, ValidationError
from .graphs import (GraphStack, Minutia, block_indptr, dilation_rates,
                     merge_graphs, minutiae_to_array)
from .layers import EdgeConvParams, FeedForwardParams, _glorot, feed_forward, gcn_block
from .rng import stream


def _sorted_mean(rows: np.ndarray) -> np.ndarray:
    # Order-invariant column means: summing sorted columns keeps the stem
    # features bit-identical under minutia permutations.
    return np.sort(rows, axis=0).sum(axis=0) / rows.shape[0]


class ModelParams:
    """All learnable arrays and running statistics of the two-level model."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        c, d = cfg.width, cfg.embed_dim
        hidden = cfg.ffm_expansion * d

        self.stem_w = parameter(_glorot(rng, 3, c))
        self.stem_b = parameter(np.zeros((1, c)))

        self.local_convs = [EdgeConvParams.init(c, c, c, rng)
                            for _ in range(cfg.trm_layers)]
        self.local_norms = [BatchNorm(c) for _ in range(cfg.trm_layers)]
        self.local_head_w = parameter(_glorot(rng, c, d))
        self.local_head_b = parameter(np.zeros((1, d)))
        self.local_head_norm = BatchNorm(d)
        self.local_ffw = FeedForwardParams.init(d, hidden, rng)

        self.batch_convs = [EdgeConvParams.init(d, d, d, rng)
                            for _ in range(cfg.cam_layers)]
        self.batch_norms = [BatchNorm(d) for _ in range(cfg.cam_layers)]
        self.batch_lin1_w = parameter(_glorot(rng, d, d))
        self.batch_lin1_b = parameter(np.zeros((1, d)))
        self.batch_mid_norm = BatchNorm(d)
        self.batch_lin2_w = parameter(_glorot(rng, d, d))
        self.batch_lin2_b = parameter(np.zeros((1, d)))
        self.batch_ffw = FeedForwardParams.init(d, hidden, rng)

    @staticmethod
    def init(cfg: ModelConfig, seed: int) -> "ModelParams":
        return ModelParams(cfg, stream(seed, "model-init"))

    # -- enumeration ---------------------------------------------------------

    def _norm_blocks(self) -> dict[str, BatchNorm]:
        blocks = {}
        for i, norm in enumerate(self.local_norms):
            blocks[f"local.norm{i}"] = norm
        blocks["local.head_norm"] = self.local_head_norm
        for i, norm in enumerate(self.batch_norms):
            blocks[f"batch.norm{i}"] = norm
        blocks["batch.mid_norm"] = self.batch_mid_norm
        return blocks

    def named_parameters(self) -> dict[str, Tensor]:
        named: dict[str, Tensor] = {
            "stem.w": self.stem_w, "stem.b": self.stem_b,
            "local.head.w": self.local_head_w, "local.head.b": self.local_head_b,
            "local.ffw.w1": self.local_ffw.w1, "local.ffw.w2": self.local_ffw.w2,
            "batch.lin1.w": self.batch_lin1_w, "batch.lin1.b": self.batch_lin1_b,
            "batch.lin2.w": self.batch_lin2_w, "batch.lin2.b": self.batch_lin2_b,
            "batch.ffw.w1": self.batch_ffw.w1, "batch.ffw.w2": self.batch_ffw.w2,
        }
        for prefix, convs in (("local", self.local_convs), ("batch", self.batch_convs)):
            for i, conv in enumerate(convs):
                named[f"{prefix}.conv{i}.theta"] = conv.theta
                named[f"{prefix}.conv{i}.phi"] = conv.phi
                named[f"{prefix}.conv{i}.update"] = conv.update_w
        for name, norm in self._norm_blocks().items():
            named[f"{name}.gamma"] = norm.gamma
            named[f"{name}.beta"] = norm.beta
        return dict(sorted(named.items()))

    def named_stats(self) -> dict[str, np.ndarray]:
        stats: dict[str, np.ndarray] = {}
        for name, norm in self._norm_blocks().items():
            stats[f"{name}.running_mean"] = norm.running_mean
            stats[f"{name}.running_var"] = norm.running_var
        return dict(sorted(stats.items()))

    def load_stats(self, stats: dict[str, np.ndarray]) -> None:
        for name, norm in self._norm_blocks().items():
            norm.running_mean = np.array(stats[f"{name}.running_mean"], dtype=np.float64)
            norm.running_var = np.array(stats[f"{name}.running_var"], dtype=np.float64)


def _trm_rates(cfg: ModelConfig) -> list[int]:
    return dilation_rates(cfg.trm_layers) if cfg.dilation else [1] * cfg.trm_layers


def _cam_rates(cfg: ModelConfig) -> list[int]:
    return dilation_rates(cfg.cam_layers) if cfg.dilation else [1] * cfg.cam_layers


def minutia_ranking_pool(cfg: ModelConfig) -> int:
    return cfg.k_minutia * max(_trm_rates(cfg))


def encode_minutiae_batch(fingerprints: list[list[Minutia]], cfg: ModelConfig,
                          params: ModelParams, mode: str,
                          rankings: list[np.ndarray] | None = None) -> Tensor:
    """Minutia-level embeddings for a list of fingerprints, one row each.

    ``rankings`` may carry precomputed neighbor rankings (pool size
    ``minutia_ranking_pool(cfg)``) for each fingerprint; they are re-derived
    from the coordinates when absent.
    """
    if not fingerprints:
        raise ValidationError("need at least one fingerprint")
    rates = _trm_rates(cfg)
    feature_blocks: list[np.ndarray] = []
    stacks: list[GraphStack] = []
    sizes: list[int] = []
    for idx, minutiae in enumerate(fingerprints):
        if len(minutiae) < 2:
            raise DataError(
                f"fingerprint {idx} has {len(minutiae)} minutiae; "
                "at least 2 are required to build a graph")
        feats = minutiae_to_array(minutiae)
        coords = feats[:, :2]
        ranking = rankings[idx] if rankings is not None else None
        stacks.append(GraphStack.build(coords, cfg.k_minutia, rates, ranking))
        if cfg.centering:
            feats = feats.copy()
            feats[:, :2] -= _sorted_mean(coords)
        feature_blocks.append(feats)
        sizes.append(len(minutiae))

    indptr = block_indptr(sizes)
    merged = [merge_graphs([s.per_layer[l] for s in stacks])
              for l in range(cfg.trm_layers)]

    x = constant(np.concatenate(feature_blocks, axis=0))
    x = matmul(x, params.stem_w).add_bias(params.stem_b)
    x, _ = gcn_block(x, merged, params.local_convs, params.local_norms,
                     mode, cfg.residual, indptr)
    h = matmul(x, params.local_head_w).add_bias(params.local_head_b).gelu()
    h = params.local_head_norm(h, mode, indptr)
    if cfg.ffm:
        h = feed_forward(h, params.local_ffw)
    return segment_max(h, indptr)


def encode_minutiae(minutiae: list[Minutia], cfg: ModelConfig,
                    params: ModelParams, mode: str) -> Tensor:
    """Local embedding (1 x embed_dim) of a single fingerprint."""
    return encode_minutiae_batch([minutiae], cfg, params, mode)


def refine_batch(local_embeddings, cfg: ModelConfig, params: ModelParams,
                 mode: str) -> Tensor:
    """Batch-level refinement producing unit-norm embeddings, order preserved."""
    x = local_embeddings if isinstance(local_embeddings, Tensor) \
        else constant(np.asarray(local_embeddings, dtype=np.float64))
    if x.rows < 2:
        raise ValidationError(
            "batch refinement needs at least 2 embeddings; use "
            "embed_with_gallery for single queries")
    stack = GraphStack.build(x.data, cfg.k_fingerprint, _cam_rates(cfg))
    x, _ = gcn_block(x, stack.per_layer, params.batch_convs, params.batch_norms,
                     mode, cfg.residual)
    x = matmul(x, params.batch_lin1_w).add_bias(params.batch_lin1_b).gelu()
    x = params.batch_mid_norm(x, mode)
    x = matmul(x, params.batch_lin2_w).add_bias(params.batch_lin2_b)
    if cfg.ffm:
        x = feed_forward(x, params.batch_ffw)
    return x.l2_normalize_rows()


def embed_batch(fingerprints: list[list[Minutia]], cfg: ModelConfig,
                params: ModelParams, mode: str,
                rankings: list[np.ndarray] | None = None) -> Tensor:
    """End-to-end embeddings for a batch of fingerprints (batch size >= 2)."""
    if len(fingerprints) < 2:
        raise ValidationError("embed_batch needs at least 2 fingerprints")
    local = encode_minutiae_batch(fingerprints, cfg, params, mode, rankings)
    return refine_batch(local, cfg, params, mode)


def embed_with_gallery(query: list[Minutia], gallery_locals: np.ndarray,
                       cfg: ModelConfig, params: ModelParams) -> np.ndarray:
    """Embed a single query against stored minutia-level gallery embeddings.

    The query's batch-stage neighborhood is formed from its k nearest
    gallery local embeddings; refinement runs on that small set and only the
    query's row is returned (unit norm).
    """
    gallery_locals = np.asarray(gallery_locals, dtype=np.float64)
    if gallery_locals.ndim != 2 or gallery_locals.shape[0] < cfg.k_fingerprint:
        raise ValidationError(
            f"gallery must hold at least k_fingerprint={cfg.k_fingerprint} "
            "local embeddings")
    local = encode_minutiae(query, cfg, params, "infer").data
    gaps = gallery_locals - local
    d2 = np.einsum("ij,ij->i", gaps, gaps)
    nearest = np.argsort(d2, kind="stable")[:cfg.k_fingerprint]
    subset = np.concatenate([local, gallery_locals[nearest]], axis=0)
    refined = refine_batch(subset, cfg, params, "infer")
    return refined.data[0].copy()
