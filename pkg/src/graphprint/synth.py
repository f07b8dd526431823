"""Synthetic labeled minutia sets: identities, perturbed impressions, datasets.

An identity is a template point set with a minimum pairwise spacing;
impressions are noisy views of the template (global rotation about the
centroid with a matching orientation shift, global translation, positional
and orientation jitter, random dropout, spurious additions, final clamp to
the unit square). All randomness flows through named Philox streams derived
from the dataset seed, identity index, and impression index, so generation
is reproducible and parallelizable per identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import DataConfig, PerturbConfig
from .errors import DataError
from .graphs import TWO_PI, Minutia
from .rng import stream

MIN_SPACING = 0.02
_MAX_POINT_ATTEMPTS = 1000
_MAX_REDRAWS = 100


@dataclass
class IdentityTemplate:
    identity_id: int
    minutiae: list[Minutia]


@dataclass
class FingerprintRecord:
    identity_id: int
    impression_id: int
    minutiae: list[Minutia]


def gen_identity(rng: np.random.Generator, identity_id: int,
                 min_minutiae: int, max_minutiae: int) -> IdentityTemplate:
    """Sample a template with pairwise spacing >= MIN_SPACING (rejection).

    Raises DataError when the requested density cannot be met within the
    per-point attempt budget.
    """
    count = int(rng.integers(min_minutiae, max_minutiae + 1))
    placed = np.empty((0, 2))
    for _ in range(count):
        for attempt in range(_MAX_POINT_ATTEMPTS):
            candidate = rng.random(2)
            if placed.size == 0:
                break
            gaps = placed - candidate
            if np.min(np.einsum("ij,ij->i", gaps, gaps)) >= MIN_SPACING ** 2:
                break
        else:
            raise DataError(
                f"could not place {count} minutiae with spacing {MIN_SPACING}; "
                "requested density is unsatisfiable")
        placed = np.vstack([placed, candidate])
    orientations = rng.uniform(0.0, TWO_PI, size=count)
    minutiae = [Minutia(float(x), float(y), float(d))
                for (x, y), d in zip(placed, orientations)]
    return IdentityTemplate(identity_id, minutiae)


def rotate_about_centroid(coords: np.ndarray, orientations: np.ndarray,
                          angle: float) -> tuple[np.ndarray, np.ndarray]:
    """Rigid rotation of the point set; orientations shift by the same angle."""
    if angle == 0.0:
        return coords, orientations
    centroid = coords.mean(axis=0)
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, s], [-s, c]])
    return (coords - centroid) @ rot + centroid, (orientations + angle) % TWO_PI


def gen_impression(template: IdentityTemplate, perturb: PerturbConfig,
                   rng: np.random.Generator) -> list[Minutia]:
    """One noisy view of a template; always keeps at least 2 true minutiae."""
    base_coords = np.array([[m.x, m.y] for m in template.minutiae])
    base_orient = np.array([m.d for m in template.minutiae])
    n = base_coords.shape[0]
    theta_max = math.radians(perturb.rotation_deg)
    orient_sigma = math.radians(perturb.orientation_jitter_deg)

    for attempt in range(_MAX_REDRAWS + 1):
        coords, orient = base_coords, base_orient
        if theta_max > 0.0:
            angle = float(rng.uniform(-theta_max, theta_max))
            coords, orient = rotate_about_centroid(coords, orient, angle)
        if perturb.translation > 0.0:
            coords = coords + rng.uniform(-perturb.translation,
                                          perturb.translation, size=2)
        if perturb.jitter_sigma > 0.0:
            coords = coords + rng.normal(0.0, perturb.jitter_sigma, size=coords.shape)
        if orient_sigma > 0.0:
            orient = (orient + rng.normal(0.0, orient_sigma, size=n)) % TWO_PI
        if perturb.dropout > 0.0:
            keep = rng.random(n) >= perturb.dropout
            if keep.sum() < 2:
                if attempt < _MAX_REDRAWS:
                    continue
                # Pathological dropout (e.g. 1.0): force two survivors.
                forced = rng.choice(n, size=2, replace=False)
                keep = np.zeros(n, dtype=bool)
                keep[forced] = True
            coords, orient = coords[keep], orient[keep]
        spurious = int(rng.integers(perturb.spurious_min, perturb.spurious_max + 1)) \
            if perturb.spurious_max > 0 else 0
        if spurious:
            coords = np.vstack([coords, rng.random((spurious, 2))])
            orient = np.concatenate([orient, rng.uniform(0.0, TWO_PI, size=spurious)])
        coords = np.clip(coords, 0.0, 1.0)
        return [Minutia(float(x), float(y), float(d))
                for (x, y), d in zip(coords, orient)]
    raise AssertionError("unreachable")


def gen_dataset(spec: DataConfig) -> list[FingerprintRecord]:
    """identity_count x impressions labeled records, deterministic under seed."""
    spec.validate()
    records: list[FingerprintRecord] = []
    for i in range(spec.identities):
        template = gen_identity(stream(spec.seed, "identity", i), i,
                                spec.min_minutiae, spec.max_minutiae)
        for j in range(spec.impressions):
            minutiae = gen_impression(template, spec.perturb,
                                      stream(spec.seed, "impression", i, j))
            records.append(FingerprintRecord(i, j, minutiae))
    return records


def split_dataset(records: list[FingerprintRecord],
                  holdout_per_identity: int) -> tuple[list[FingerprintRecord],
                                                      list[FingerprintRecord]]:
    """Per identity, hold out the last impressions (by impression_id)."""
    by_identity: dict[int, list[FingerprintRecord]] = {}
    for rec in records:
        by_identity.setdefault(rec.identity_id, []).append(rec)
    train: list[FingerprintRecord] = []
    test: list[FingerprintRecord] = []
    for identity in sorted(by_identity):
        group = sorted(by_identity[identity], key=lambda r: r.impression_id)
        if holdout_per_identity >= len(group):
            raise DataError(
                f"identity {identity} has {len(group)} impressions; cannot "
                f"hold out {holdout_per_identity}")
        cut = len(group) - holdout_per_identity
        train.extend(group[:cut])
        test.extend(group[cut:])
    return train, test
