"""Recognition and indexing metrics over genuine/impostor similarity scores.

Scores are inner products of unit-norm embeddings, so they live in [-1, 1]
and relate to L2 distance by ||a - b||^2 = 2 - 2*sim. The threshold sweep
conventions are explicit: a score equal to the threshold counts as an
accept, and the equal-error rate interpolates linearly between the two
adjacent observed thresholds where FAR - FRR changes sign.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


@dataclass
class ScoreSet:
    genuine: list[float] = field(default_factory=list)
    impostor: list[float] = field(default_factory=list)


def similarity(a, b) -> float:
    """Inner product of two unit-norm embeddings."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValidationError("similarity needs embeddings of equal length")
    for name, v in (("first", a), ("second", b)):
        norm = float(np.linalg.norm(v))
        if abs(norm - 1.0) > 1e-6:
            raise ValidationError(
                f"{name} embedding is not unit norm (|v| = {norm:.9f})")
    return float(a @ b)


def tar_at_far(scores: ScoreSet, far_target: float) -> tuple[float, float]:
    """True-accept rate at the smallest threshold meeting the FAR target.

    The threshold is the smallest observed score t with
    fraction(impostor >= t) <= far_target; scores tied with the threshold
    count as accepts. Returns (tar, threshold); the threshold is +inf when
    no observed score satisfies the target.
    """
    if not scores.genuine or not scores.impostor:
        raise ValidationError("tar_at_far needs non-empty genuine and impostor scores")
    if not (0.0 <= far_target <= 1.0):
        raise ValidationError("far_target must be a fraction in [0, 1]")
    imp = np.sort(np.asarray(scores.impostor, dtype=np.float64))
    gen = np.sort(np.asarray(scores.genuine, dtype=np.float64))
    if far_target > 0 and imp.size < 1.0 / far_target:
        warnings.warn(
            f"only {imp.size} impostor scores for FAR target {far_target}; "
            "the estimate is coarse", RuntimeWarning, stacklevel=2)
    candidates = np.unique(np.concatenate([gen, imp]))
    # fraction of impostors >= t, per candidate threshold t
    far = (imp.size - np.searchsorted(imp, candidates, side="left")) / imp.size
    ok = np.flatnonzero(far <= far_target)
    if ok.size == 0:
        return 0.0, float("inf")
    threshold = float(candidates[ok[0]])
    tar = float((gen.size - np.searchsorted(gen, threshold, side="left")) / gen.size)
    return tar, threshold


def eer(scores: ScoreSet) -> float:
    """Equal-error rate from a sweep over all distinct observed scores.

    At each threshold t: FAR = fraction(impostor >= t), FRR =
    fraction(genuine < t). Returns the interpolated common value where
    FAR - FRR changes sign; when it never does, (FAR + FRR) / 2 at the
    threshold minimizing |FAR - FRR|.
    """
    if not scores.genuine or not scores.impostor:
        raise ValidationError("eer needs non-empty genuine and impostor scores")
    imp = np.sort(np.asarray(scores.impostor, dtype=np.float64))
    gen = np.sort(np.asarray(scores.genuine, dtype=np.float64))
    candidates = np.unique(np.concatenate([gen, imp]))
    far = (imp.size - np.searchsorted(imp, candidates, side="left")) / imp.size
    frr = np.searchsorted(gen, candidates, side="left") / gen.size
    diff = far - frr
    exact = np.flatnonzero(diff == 0.0)
    if exact.size:
        i = exact[0]
        return float((far[i] + frr[i]) / 2.0)
    sign_change = np.flatnonzero(diff[:-1] * diff[1:] < 0.0)
    if sign_change.size:
        i = int(sign_change[0])
        alpha = diff[i] / (diff[i] - diff[i + 1])
        return float(far[i] + alpha * (far[i + 1] - far[i]))
    i = int(np.argmin(np.abs(diff)))
    return float((far[i] + frr[i]) / 2.0)


def topk_accuracy(probe_embeddings, probe_labels, gallery_embeddings,
                  gallery_labels, ks: list[int]) -> dict[int, float]:
    """Closed-set identification accuracy at the requested ranks.

    Gallery entries are ranked per probe by descending similarity, ties by
    ascending gallery index. Every probe identity must appear in the
    gallery.
    """
    probes = np.asarray(probe_embeddings, dtype=np.float64)
    gallery = np.asarray(gallery_embeddings, dtype=np.float64)
    probe_labels = np.asarray(probe_labels)
    gallery_labels = np.asarray(gallery_labels)
    if probes.ndim != 2 or gallery.ndim != 2:
        raise ValidationError("embeddings must be 2-D arrays")
    missing = sorted(set(probe_labels.tolist()) - set(gallery_labels.tolist()))
    if missing:
        raise ValidationError(
            f"closed-set indexing requires every probe identity in the "
            f"gallery; missing {missing[:5]}")
    for k in ks:
        if not (1 <= k <= gallery.shape[0]):
            raise ValidationError(f"k={k} outside [1, gallery size]")
    sims = probes @ gallery.T
    order = np.argsort(-sims, axis=1, kind="stable")
    ranked_labels = gallery_labels[order]
    hits = ranked_labels == probe_labels[:, None]
    first_hit = hits.argmax(axis=1)          # a hit always exists (closed set)
    return {int(k): float((first_hit < k).mean()) for k in ks}


def oversmoothing_curve(snapshots: list[np.ndarray]) -> list[float]:
    """Mean pairwise vertex distance per layer snapshot (feature diversity)."""
    curve = []
    for layer_idx, snap in enumerate(snapshots):
        snap = np.asarray(snap, dtype=np.float64)
        n = snap.shape[0]
        if n < 2:
            raise ValidationError(
                f"snapshot {layer_idx} has a single vertex; diversity undefined")
        diff = snap[:, None, :] - snap[None, :, :]
        d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        curve.append(float(d[np.triu_indices(n, k=1)].mean()))
    return curve
