"""Triplet mining and loss, AdamW with cosine schedule, and the training loop.

Mining follows the hardest-pair scheme: per identity in the batch, the
anchor-positive pair is the closest same-label pair, and the negative is the
different-label sample closest to the anchor (ties by ascending index). A
classic semi-hard variant — negatives inside the margin band
d(a,p) < d(a,n) < d(a,p) + margin — is available behind ``mining="semi-hard"``
and falls back to the hardest negative when the band is empty.

The loop samples batches as P identities x Q impressions, augments each
fingerprint with a rigid rotation/translation (which leaves its minutia
graph unchanged), embeds the batch end-to-end, and minimizes the mean hinge
loss max(d(a,p) - d(a,n) + margin, 0) over the mined triplets.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .config import RunConfig, TrainConfig
from .errors import NumericError, ValidationError
from .graphs import Minutia, minutiae_to_array, neighbor_ranking
from .model import ModelParams, embed_batch, minutia_ranking_pool
from .rng import stream
from .synth import FingerprintRecord, rotate_about_centroid

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Triplet:
    anchor: int
    positive: int
    negative: int


def pairwise_distances(embeddings: np.ndarray) -> np.ndarray:
    """Symmetric L2 distance matrix with a zero diagonal."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2 or embeddings.shape[0] < 2:
        raise ValidationError("pairwise_distances needs at least 2 embeddings")
    diff = embeddings[:, None, :] - embeddings[None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    np.fill_diagonal(d, 0.0)
    return d


def mine_triplets(embeddings: np.ndarray, labels, margin: float,
                  mode: str = "hardest") -> list[Triplet]:
    """One triplet per identity that has >= 2 impressions in the batch."""
    labels = np.asarray(labels)
    dist = pairwise_distances(embeddings)
    n = labels.shape[0]
    triplets: list[Triplet] = []
    for label in sorted(set(labels.tolist())):
        members = np.flatnonzero(labels == label)
        if members.size < 2:
            continue
        others = np.flatnonzero(labels != label)
        if others.size == 0:
            continue
        # Closest same-label pair; ties resolved by ascending (i, j).
        best = None
        for ai in range(members.size - 1):
            for pi in range(ai + 1, members.size):
                i, j = int(members[ai]), int(members[pi])
                key = (dist[i, j], i, j)
                if best is None or key < best:
                    best = key
        _, anchor, positive = best
        row = dist[anchor, others]
        if mode == "semi-hard":
            d_ap = dist[anchor, positive]
            band = np.flatnonzero((row > d_ap) & (row < d_ap + margin))
            pool = others[band] if band.size else others
            row = dist[anchor, pool]
        else:
            pool = others
        negative = int(pool[int(np.argmin(row))])   # argmin keeps lowest index on ties
        triplets.append(Triplet(anchor, positive, negative))
    return triplets


def triplet_loss(anchor, positive, negative, margin: float) -> float:
    """Hinge max(d(a,p) - d(a,n) + margin, 0) for plain vectors."""
    a = np.asarray(anchor, dtype=np.float64).ravel()
    p = np.asarray(positive, dtype=np.float64).ravel()
    n = np.asarray(negative, dtype=np.float64).ravel()
    d_ap = float(np.linalg.norm(a - p))
    d_an = float(np.linalg.norm(a - n))
    return max(d_ap - d_an + margin, 0.0)


def batch_triplet_loss(embeddings: Tensor, triplets: list[Triplet],
                       margin: float) -> tuple[Tensor, np.ndarray]:
    """Mean hinge loss over mined triplets, on the tape.

    Also returns the per-triplet hinge values (for the active fraction).
    """
    if not triplets:
        raise ValidationError("batch_triplet_loss needs at least one triplet")
    a = embeddings.gather_rows([t.anchor for t in triplets])
    p = embeddings.gather_rows([t.positive for t in triplets])
    n = embeddings.gather_rows([t.negative for t in triplets])
    d_ap = (a - p).square().row_sums().sqrt()
    d_an = (a - n).square().row_sums().sqrt()
    hinge = (d_ap - d_an).shift(margin).relu()
    loss = hinge.sum() * (1.0 / len(triplets))
    return loss, hinge.data.ravel().copy()


def cosine_lr(step: int, cfg: TrainConfig, horizon: int) -> float:
    """Cosine decay from cfg.lr to cfg.lr_min over ``horizon`` steps."""
    if step < 0:
        raise ValidationError("step must be nonnegative")
    if horizon <= 0 or step >= horizon:
        return cfg.lr_min
    return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (
        1.0 + math.cos(math.pi * step / horizon))


class AdamW:
    """Adam with bias correction and decoupled weight decay.

    Decay is applied as ``param *= 1 - lr * wd`` before the adaptive update.
    A step with any non-finite gradient is skipped entirely and reported.
    """

    def __init__(self, params: dict[str, Tensor], weight_decay: float = 0.01,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.weight_decay = float(weight_decay)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, lr: float) -> bool:
        """Apply one update from the gradients stored on the parameters.

        Returns False (and leaves everything untouched) when a gradient is
        missing finiteness.
        """
        grads = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                log.warning("skipping optimizer step: non-finite gradient in %s", name)
                return False
            grads[name] = g
        self.step_count += 1
        t = self.step_count
        correct1 = 1.0 - self.beta1 ** t
        correct2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / correct1) / (np.sqrt(v / correct2) + self.eps)
        return True

    def state_dict(self) -> dict:
        return {
            "step_count": self.step_count,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step_count"])
        for k in self.m:
            self.m[k] = np.array(state["m"][k], dtype=np.float64)
            self.v[k] = np.array(state["v"][k], dtype=np.float64)


def augment(minutiae: list[Minutia], rotation_deg: float, translation: float,
            rng: np.random.Generator) -> list[Minutia]:
    """One global rotation + translation; the minutia graph is unaffected."""
    arr = minutiae_to_array(minutiae)
    coords, orient = arr[:, :2], arr[:, 2]
    theta_max = math.radians(rotation_deg)
    if theta_max > 0.0:
        angle = float(rng.uniform(-theta_max, theta_max))
        coords, orient = rotate_about_centroid(coords, orient, angle)
    if translation > 0.0:
        coords = coords + rng.uniform(-translation, translation, size=2)
    return [Minutia(float(x), float(y), float(d))
            for (x, y), d in zip(coords, orient)]


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    lr: float
    active_triplet_fraction: float

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "mean_loss": self.mean_loss, "lr": self.lr,
                "active_triplet_fraction": self.active_triplet_fraction}


@dataclass
class TrainResult:
    params: ModelParams
    log: list[EpochRecord] = field(default_factory=list)
    aborted: bool = False
    global_step: int = 0
    epochs_done: int = 0


def _group_by_identity(records: list[FingerprintRecord]) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for idx, rec in enumerate(records):
        groups.setdefault(rec.identity_id, []).append(idx)
    return groups


def train(records: list[FingerprintRecord], cfg: RunConfig,
          params: ModelParams | None = None,
          optimizer: AdamW | None = None,
          start_epoch: int = 0,
          augment_rotation_deg: float | None = None,
          augment_translation: float | None = None) -> TrainResult:
    """Run the full training loop over already-split training records.

    Batches are P identities x Q impressions. Each epoch visits every
    identity once (in a seeded shuffle); the cosine schedule spans
    epochs * steps_per_epoch optimizer steps. Deterministic under
    cfg.train.seed. Non-finite loss aborts, returning the last good state.
    """
    cfg.validate()
    tcfg = cfg.train
    groups = _group_by_identity(records)
    eligible = sorted(groups)
    if len(eligible) < 2:
        raise ValidationError("training needs at least 2 identities")
    if tcfg.impressions_per_batch < 2 and max(len(v) for v in groups.values()) < 2:
        raise ValidationError(
            "training needs positives: >= 2 impressions per identity in a batch")

    if params is None:
        params = ModelParams.init(cfg.model, tcfg.seed)
    named = params.named_parameters()
    if optimizer is None:
        optimizer = AdamW(named, weight_decay=tcfg.weight_decay)
    rot = (augment_rotation_deg if augment_rotation_deg is not None
           else cfg.data.perturb.rotation_deg)
    shift = (augment_translation if augment_translation is not None
             else cfg.data.perturb.translation)

    p_ids = tcfg.identities_per_batch
    q_imps = tcfg.impressions_per_batch
    steps_per_epoch = max(1, math.ceil(len(eligible) / p_ids))
    horizon = tcfg.epochs * steps_per_epoch

    # Neighbor rankings depend only on coordinates up to rigid motion, so
    # they are computed once per record and reused across augmented epochs.
    pool = minutia_ranking_pool(cfg.model)
    rankings = [neighbor_ranking(minutiae_to_array(r.minutiae)[:, :2], pool)
                for r in records]

    result = TrainResult(params=params)
    global_step = start_epoch * steps_per_epoch
    for epoch in range(start_epoch + 1, tcfg.epochs + 1):
        order_rng = stream(tcfg.seed, "epoch-order", epoch)
        shuffled = list(order_rng.permutation(eligible))
        losses: list[float] = []
        active = 0
        mined_total = 0
        for step_idx in range(steps_per_epoch):
            chunk = shuffled[step_idx * p_ids:(step_idx + 1) * p_ids]
            deficit = p_ids - len(chunk)
            if deficit > 0:
                chunk = chunk + shuffled[:deficit]
            batch_rng = stream(tcfg.seed, "batch", epoch, step_idx)
            batch_indices: list[int] = []
            labels: list[int] = []
            for identity in chunk:
                member_rows = groups[identity]
                replace = len(member_rows) < q_imps
                picks = batch_rng.choice(len(member_rows), size=q_imps, replace=replace)
                for pick in picks:
                    batch_indices.append(member_rows[int(pick)])
                    labels.append(identity)

            aug_rng = stream(tcfg.seed, "augment", epoch, step_idx)
            fingerprints = [augment(records[i].minutiae, rot, shift, aug_rng)
                            for i in batch_indices]
            batch_rankings = [rankings[i] for i in batch_indices]

            lr = cosine_lr(global_step, tcfg, horizon)
            embeddings = embed_batch(fingerprints, cfg.model, params, "train",
                                     rankings=batch_rankings)
            triplets = mine_triplets(embeddings.data, labels, tcfg.margin,
                                     tcfg.mining)
            if not triplets:
                log.info("epoch %d step %d: no qualifying triplets; skipping",
                         epoch, step_idx)
                global_step += 1
                continue
            loss, hinges = batch_triplet_loss(embeddings, triplets, tcfg.margin)
            if not np.isfinite(loss.data[0, 0]):
                log.error("non-finite loss at epoch %d step %d; aborting",
                          epoch, step_idx)
                result.aborted = True
                result.global_step = global_step
                result.epochs_done = epoch - 1
                return result
            for p in named.values():
                p.grad = None
            loss.backward()
            optimizer.step(lr)
            losses.append(float(loss.data[0, 0]))
            active += int((hinges > 0).sum())
            mined_total += len(triplets)
            global_step += 1

        record = EpochRecord(
            epoch=epoch,
            mean_loss=float(np.mean(losses)) if losses else 0.0,
            lr=cosine_lr(global_step - 1, tcfg, horizon),
            active_triplet_fraction=(active / mined_total) if mined_total else 0.0,
        )
        result.log.append(record)
        result.epochs_done = epoch
    result.global_step = global_step
    return result
