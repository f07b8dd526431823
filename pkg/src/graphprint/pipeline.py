"""Operational glue: end-to-end evaluation, the gradient-check suite, sweeps.

These functions sit between the library modules and the CLI so that tests
can exercise the exact code paths the commands run.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .autodiff import BatchNorm, Tensor, constant, grad_check, matmul, parameter
from .config import ModelConfig, RunConfig
from .errors import ValidationError
from .graphs import Minutia, knn_graph
from .layers import (EdgeConvParams, FeedForwardParams, edge_conv, edge_features,
                     feed_forward, gcn_block)
from .metrics import ScoreSet, eer, tar_at_far, topk_accuracy
from .model import (ModelParams, embed_batch, embed_with_gallery,
                    encode_minutiae_batch, refine_batch)
from .rng import stream
from .synth import FingerprintRecord, split_dataset
from .training import batch_triplet_loss, mine_triplets, train

GRADCHECK_TOLERANCE = 1e-5


# -- evaluation -----------------------------------------------------------------

def evaluate(gallery: list[FingerprintRecord], probes: list[FingerprintRecord],
             model_cfg: ModelConfig, params: ModelParams, far_target: float,
             ks: list[int]) -> dict:
    """Embed gallery in batch and probes against it; compute all metrics."""
    if not gallery or not probes:
        raise ValidationError("evaluation needs non-empty gallery and probe sets")
    gallery_labels = np.array([r.identity_id for r in gallery])
    probe_labels = np.array([r.identity_id for r in probes])

    local_gallery = encode_minutiae_batch(
        [r.minutiae for r in gallery], model_cfg, params, "infer").data
    refined_gallery = refine_batch(local_gallery, model_cfg, params, "infer").data
    probe_embeddings = np.stack([
        embed_with_gallery(r.minutiae, local_gallery, model_cfg, params)
        for r in probes])

    sims = probe_embeddings @ refined_gallery.T
    genuine_mask = probe_labels[:, None] == gallery_labels[None, :]
    scores = ScoreSet(genuine=sims[genuine_mask].tolist(),
                      impostor=sims[~genuine_mask].tolist())
    tar, threshold = tar_at_far(scores, far_target)
    topk = topk_accuracy(probe_embeddings, probe_labels,
                         refined_gallery, gallery_labels, ks)
    return {
        "tar_at_far": {"far": far_target, "tar": tar, "threshold": threshold},
        "eer": eer(scores),
        "topk": {str(k): v for k, v in sorted(topk.items())},
        "score_counts": {"genuine": len(scores.genuine),
                         "impostor": len(scores.impostor)},
    }


def split_gallery_probes(records: list[FingerprintRecord], gallery_per_identity: int,
                         probes_per_identity: int) -> tuple[list[FingerprintRecord],
                                                            list[FingerprintRecord]]:
    by_identity: dict[int, list[FingerprintRecord]] = {}
    for rec in records:
        by_identity.setdefault(rec.identity_id, []).append(rec)
    gallery: list[FingerprintRecord] = []
    probes: list[FingerprintRecord] = []
    for identity in sorted(by_identity):
        group = sorted(by_identity[identity], key=lambda r: r.impression_id)
        need = gallery_per_identity + probes_per_identity
        if len(group) < need:
            raise ValidationError(
                f"identity {identity} has {len(group)} impressions, "
                f"needs {need} for a {gallery_per_identity}/{probes_per_identity} split")
        gallery.extend(group[:gallery_per_identity])
        probes.extend(group[gallery_per_identity:need])
    return gallery, probes


# -- gradient-check suite ----------------------------------------------------------

def _faulty_identity(x: Tensor) -> Tensor:
    # Identity forward with a sign-flipped backward; used to prove the
    # checker notices a wrong gradient.
    out = Tensor(x.data.copy(), requires_grad=x.requires_grad, _prev=(x,),
                 _op="faulty_identity")
    if out.requires_grad:
        def backward():
            x._accumulate(-out.grad)
        out._backward = backward
    return out


def _random_minutiae(rng: np.random.Generator, count: int) -> list[Minutia]:
    pts = rng.random((count, 2)) * 0.8 + 0.1
    angles = rng.uniform(0, 2 * np.pi, count)
    return [Minutia(float(x), float(y), float(d))
            for (x, y), d in zip(pts, angles)]


def gradcheck_suite(seed: int = 0, inject_fault: bool = False,
                    h: float = 1e-6) -> list[tuple[str, float]]:
    """Finite-difference checks for every layer type and the full model.

    Returns (component, max relative error) pairs; tiny random instances
    keep the coordinate sweep fast.
    """
    rng = stream(seed, "gradcheck")
    results: list[tuple[str, float]] = []

    n, c_in, c_mid, c_out = 6, 5, 4, 5
    pts = rng.random((n, 2))
    graph = knn_graph(pts, 3)
    x0 = rng.normal(size=(n, c_in))
    probe_e = constant(rng.normal(size=(c_mid, 1)))
    probe_v = constant(rng.normal(size=(c_out, 1)))

    conv = EdgeConvParams.init(c_in, c_mid, c_out, rng)
    x_param = parameter(x0)

    def build_edge_features():
        e = edge_features(x_param, graph, conv)
        if inject_fault:
            e = _faulty_identity(e)
        return matmul(e, probe_e).sum()

    results.append(("edge_features", grad_check(
        build_edge_features, [x_param, conv.theta, conv.phi], h)))

    def build_edge_conv():
        return matmul(edge_conv(x_param, graph, conv), probe_v).sum()

    results.append(("edge_conv", grad_check(
        build_edge_conv, [x_param, *conv.tensors().values()], h)))

    block_convs = [EdgeConvParams.init(c_in, c_in, c_in, rng) for _ in range(3)]
    block_norms = [BatchNorm(c_in) for _ in range(3)]
    probe_b = constant(rng.normal(size=(c_in, 1)))

    def build_block():
        out, _ = gcn_block(x_param, [graph] * 3, block_convs, block_norms,
                           "train", residual=True)
        return matmul(out, probe_b).sum()

    block_params = [x_param]
    for bc in block_convs:
        block_params.extend(bc.tensors().values())
    for bn in block_norms:
        block_params.extend([bn.gamma, bn.beta])
    results.append(("gcn_block", grad_check(build_block, block_params, h)))

    ffw = FeedForwardParams.init(c_in, 2 * c_in, rng)

    def build_ffw():
        return matmul(feed_forward(x_param, ffw), probe_b).sum()

    results.append(("ffm", grad_check(build_ffw, [x_param, ffw.w1, ffw.w2], h)))

    bn = BatchNorm(c_in)

    def build_bn():
        return matmul(bn(x_param, "train"), probe_b).sum()

    results.append(("batchnorm", grad_check(
        build_bn, [x_param, bn.gamma, bn.beta], h)))

    def build_l2norm():
        return matmul(x_param.l2_normalize_rows(), probe_b).sum()

    results.append(("normalization", grad_check(build_l2norm, [x_param], h)))

    emb_param = parameter(rng.normal(size=(6, 4)))
    labels = [0, 0, 1, 1, 2, 2]
    frozen = mine_triplets(emb_param.data, labels, 0.5)

    def build_loss_head():
        loss, _ = batch_triplet_loss(emb_param, frozen, 0.5)
        return loss

    results.append(("triplet_loss", grad_check(build_loss_head, [emb_param], h)))

    tiny = ModelConfig(width=6, embed_dim=8, trm_layers=2, cam_layers=1,
                       k_minutia=2, k_fingerprint=2, ffm_expansion=2)
    model_params = ModelParams.init(tiny, seed + 1)
    fingerprints = [_random_minutiae(rng, 5) for _ in range(4)]
    model_labels = [0, 0, 1, 1]
    first = embed_batch(fingerprints, tiny, model_params, "train")
    model_triplets = mine_triplets(first.data, model_labels, 0.5)

    def build_model():
        emb = embed_batch(fingerprints, tiny, model_params, "train")
        loss, _ = batch_triplet_loss(emb, model_triplets, 0.5)
        return loss

    results.append(("full_model", grad_check(
        build_model, list(model_params.named_parameters().values()), h)))
    return results


# -- sweeps ---------------------------------------------------------------------

def sweep(param: str, values: list[int], records: list[FingerprintRecord],
          cfg: RunConfig, far_target: float = 0.01) -> list[dict]:
    """Train and evaluate once per swept value with a shared seed."""
    if param not in ("layers", "neighbors"):
        raise ValidationError("sweep --param must be 'layers' or 'neighbors'")
    rows: list[dict] = []
    for value in values:
        if value < 1:
            raise ValidationError(f"swept value {value} must be >= 1")
        if param == "layers":
            model_cfg = dataclasses.replace(cfg.model, trm_layers=int(value))
        else:
            model_cfg = dataclasses.replace(cfg.model, k_minutia=int(value),
                                            k_fingerprint=int(value))
        run_cfg = dataclasses.replace(cfg, model=model_cfg)
        run_cfg.validate()
        train_recs, test_recs = split_dataset(records, run_cfg.train.holdout)
        result = train(train_recs, run_cfg)
        gallery = train_recs
        metrics = evaluate(gallery, test_recs, model_cfg, result.params,
                           far_target, ks=[1])
        rows.append({
            "value": int(value),
            "tar_at_far": metrics["tar_at_far"]["tar"],
            "eer": metrics["eer"],
        })
    return rows
