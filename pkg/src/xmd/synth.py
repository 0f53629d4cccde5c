"""Seeded synthetic scenes with self-similar, imbalanced superpixel classes.

Frozen "2D" superpixel features sit around class means on scaled coordinate
axes. Point features carry the same per-superpixel content through a random
orthogonal embedding into a larger point space, plus modality-specific
nuisance that the image side never sees and per-point noise.
"""

from __future__ import annotations

import logging
import warnings
import zlib
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .correspond import PairSet

logger = logging.getLogger(__name__)

NUSCENES_CLASSES = (
    "driveable_surface",
    "vegetation",
    "manmade",
    "terrain",
    "sidewalk",
    "car",
    "barrier",
    "other_flat",
    "truck",
    "traffic_cone",
    "trailer",
    "construction_vehicle",
    "bus",
    "pedestrian",
    "motorcycle",
    "bicycle",
)

# fixed shares of the preset; the remaining classes are log-spaced
_ROAD_AND_VEGETATION = 0.45
_VEGETATION = 0.2219
_PEDESTRIAN = 0.0025
_MOTORCYCLE_AND_BICYCLE = 0.0005
_LOG_SPACING_RATIO = 0.6


def nuscenes_like_proportions() -> np.ndarray:
    """16-class superpixel distribution skewed like an outdoor driving dataset."""
    p = dict.fromkeys(NUSCENES_CLASSES, 0.0)
    p["vegetation"] = _VEGETATION
    p["driveable_surface"] = _ROAD_AND_VEGETATION - _VEGETATION
    p["pedestrian"] = _PEDESTRIAN
    p["motorcycle"] = p["bicycle"] = _MOTORCYCLE_AND_BICYCLE / 2
    rest = [c for c in NUSCENES_CLASSES if p[c] == 0.0]
    shares = _LOG_SPACING_RATIO ** np.arange(len(rest))
    shares *= (1.0 - sum(p.values())) / shares.sum()
    for c, s in zip(rest, shares):
        p[c] = float(s)
    return np.array([p[c] for c in NUSCENES_CLASSES])


def _stream(seed: int, purpose: str, index: int = 0) -> np.random.Generator:
    """Independent counter-based substream for (seed, purpose, index)."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(zlib.crc32(purpose.encode()), index))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class Scenario:
    num_classes: int = 16
    class_proportions: tuple[float, ...] = field(default_factory=lambda: tuple(nuscenes_like_proportions()))
    feature_dim: int = 32
    point_dim: int = 48
    cluster_separation: float = 1.0
    within_class_spread: float = 0.04
    superpixels_per_batch: int = 256
    points_per_superpixel: tuple[int, int] = (2, 6)
    point_noise: float = 0.05
    nuisance_scale: float = 0.5
    seed: int = 0

    def __post_init__(self):
        props = np.asarray(self.class_proportions, dtype=np.float64)
        if props.shape != (self.num_classes,):
            raise ValueError("need one proportion per class")
        if abs(props.sum() - 1.0) > 1e-9 or props.min() <= 0:
            raise ValueError("class proportions must be positive and sum to 1")
        if not self.cluster_separation > 0 or self.within_class_spread < 0:
            raise ValueError("need cluster_separation > 0 and within_class_spread >= 0")
        if self.feature_dim < self.num_classes:
            raise ValueError("feature_dim must be >= num_classes (one axis per class)")
        lo, hi = self.points_per_superpixel
        if not 1 <= lo <= hi:
            raise ValueError("points_per_superpixel must satisfy 1 <= lo <= hi")
        object.__setattr__(self, "class_proportions", tuple(float(x) for x in props))
        object.__setattr__(self, "points_per_superpixel", (int(lo), int(hi)))

    @property
    def proportions(self) -> np.ndarray:
        return np.asarray(self.class_proportions)

    def balanced(self) -> "Scenario":
        """Same geometry, uniform class mix (used for evaluation batches)."""
        return replace(self, class_proportions=tuple(np.full(self.num_classes, 1.0 / self.num_classes)))


@dataclass(frozen=True)
class Geometry:
    class_means: np.ndarray  # num_classes x C
    embed: np.ndarray  # D_in x C, feature space -> point space
    nuisance_basis: np.ndarray  # D_in x (D_in - C), zero columns if D_in <= C


@dataclass(frozen=True)
class SyntheticBatch:
    superpixel_features: np.ndarray
    point_features: np.ndarray
    pair_set: PairSet
    class_labels: np.ndarray


@lru_cache(maxsize=32)
def _geometry(seed: int, num_classes: int, c: int, d_in: int, separation: float) -> Geometry:
    rng = _stream(seed, "geometry")
    means = np.zeros((num_classes, c))
    means[np.arange(num_classes), np.arange(num_classes)] = separation / np.sqrt(2.0)
    basis, _ = np.linalg.qr(rng.standard_normal((max(d_in, c), max(d_in, c))))
    if d_in >= c:
        embed = basis[:, :c]
        nuisance = basis[:, c:]
    else:
        embed = basis[:d_in, :]
        nuisance = np.zeros((d_in, 0))
    for a in (means, embed, nuisance):
        a.setflags(write=False)
    return Geometry(means, embed, nuisance)


def geometry(scenario: Scenario) -> Geometry:
    return _geometry(
        scenario.seed, scenario.num_classes, scenario.feature_dim,
        scenario.point_dim, scenario.cluster_separation,
    )


def generate_batch(scenario: Scenario, index: int = 0, purpose: str = "batch") -> SyntheticBatch:
    """Draw batch ``index`` of the scenario; identical arguments give identical arrays."""
    geo = geometry(scenario)
    rng = _stream(scenario.seed, purpose, index)
    m = scenario.superpixels_per_batch
    labels = rng.choice(scenario.num_classes, size=m, p=scenario.proportions)
    present = np.unique(labels).size
    if m < 2 * present:
        warnings.warn(f"only {m} superpixels for {present} classes", stacklevel=2)
    feats = geo.class_means[labels] + scenario.within_class_spread * rng.standard_normal(
        (m, scenario.feature_dim)
    )
    lo, hi = scenario.points_per_superpixel
    sizes = rng.integers(lo, hi + 1, size=m)
    owner = np.repeat(np.arange(m), sizes)
    content = feats @ geo.embed.T
    nuisance = scenario.nuisance_scale * rng.standard_normal((m, geo.nuisance_basis.shape[1]))
    per_superpixel = content + nuisance @ geo.nuisance_basis.T
    points = per_superpixel[owner] + scenario.point_noise * rng.standard_normal(
        (owner.size, scenario.point_dim)
    )
    pairs = PairSet.singletons(m, sizes.tolist())
    return SyntheticBatch(feats, points, pairs, labels)


def to_point_granularity(batch: SyntheticBatch, max_pairs: int | None = None,
                         seed: int = 0, index: int = 0) -> SyntheticBatch:
    """Pair every point with its own copy of its superpixel's feature row.

    With ``max_pairs`` the pairs are subsampled uniformly without replacement.
    """
    members, owner = batch.pair_set.point_labels()
    keep = np.arange(members.size)
    if max_pairs is not None and max_pairs < keep.size:
        keep = np.sort(_stream(seed, "point-pairs", index).choice(keep.size, size=max_pairs, replace=False))
    members, owner = members[keep], owner[keep]
    pixel_of = np.array([g[0] for g in batch.pair_set.pixel_groups])[owner]
    n = keep.size
    pairs = PairSet([members[i:i + 1] for i in range(n)], [np.array([i]) for i in range(n)], "point")
    return SyntheticBatch(batch.superpixel_features[pixel_of], batch.point_features, pairs,
                          batch.class_labels[owner])


def false_negative_rate(batch: SyntheticBatch) -> float:
    """Fraction of (anchor, negative) pairs that share the anchor's class."""
    labels = np.asarray(batch.class_labels)
    m = labels.size
    counts = np.bincount(labels)
    same = int((counts * (counts - 1)).sum())
    return same / (m * (m - 1))


def class_counts(batch: SyntheticBatch, num_classes: int) -> np.ndarray:
    return np.bincount(batch.class_labels, minlength=num_classes)
