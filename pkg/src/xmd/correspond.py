"""Point to pixel correspondences and pooling into matched (Q, K) pairs."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .matcore import as_matrix, segment_mean_pool

logger = logging.getLogger(__name__)

Granularity = Literal["superpixel", "point"]


@dataclass(frozen=True)
class CameraModel:
    intrinsics: np.ndarray  # 3x3, pixels
    extrinsics: np.ndarray  # 4x4, LiDAR frame -> camera frame
    width: int
    height: int

    def __post_init__(self):
        k = np.asarray(self.intrinsics, dtype=np.float64)
        e = np.asarray(self.extrinsics, dtype=np.float64)
        if k.shape != (3, 3) or e.shape != (4, 4):
            raise ValueError("intrinsics must be 3x3 and extrinsics 4x4")
        rot = e[:3, :3]
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-9, rtol=0):
            raise ValueError("extrinsic rotation block is not orthonormal")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        object.__setattr__(self, "intrinsics", k)
        object.__setattr__(self, "extrinsics", e)

    @classmethod
    def read(cls, path) -> "CameraModel":
        # 9 intrinsics, 16 extrinsics (row-major), width, height; line breaks are free.
        tokens = Path(path).read_text().split()
        if len(tokens) != 27:
            raise ValueError(f"{path}: expected 27 values, found {len(tokens)}")
        vals = [float(t) for t in tokens]
        return cls(
            intrinsics=np.array(vals[:9]).reshape(3, 3),
            extrinsics=np.array(vals[9:25]).reshape(4, 4),
            width=int(vals[25]),
            height=int(vals[26]),
        )

    def write(self, path) -> None:
        lines = [" ".join(repr(float(v)) for v in row) for row in self.intrinsics]
        lines += [" ".join(repr(float(v)) for v in row) for row in self.extrinsics]
        lines.append(f"{self.width} {self.height}")
        Path(path).write_text("\n".join(lines) + "\n")


@dataclass(frozen=True)
class SegmentMap:
    width: int
    height: int
    ids: np.ndarray  # flat, row-major

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        if ids.size != self.width * self.height:
            raise ValueError("segment map size does not match width*height")
        if ids.size and ids.min() < 0:
            raise ValueError("segment ids must be nonnegative")
        object.__setattr__(self, "ids", ids)

    @property
    def num_segments(self) -> int:
        return int(self.ids.max()) + 1 if self.ids.size else 0

    @classmethod
    def read(cls, path) -> "SegmentMap":
        lines = Path(path).read_text().split("\n")
        height, width, num_segments = (int(t) for t in lines[0].split())
        ids = np.array([int(t) for t in " ".join(lines[1:]).split()], dtype=np.int64)
        seg = cls(width=width, height=height, ids=ids)
        if seg.num_segments > num_segments:
            raise ValueError(f"{path}: ids exceed declared segment count {num_segments}")
        return seg

    def write(self, path) -> None:
        grid = self.ids.reshape(self.height, self.width)
        lines = [f"{self.height} {self.width} {self.num_segments}"]
        lines += [" ".join(str(int(v)) for v in row) for row in grid]
        Path(path).write_text("\n".join(lines) + "\n")


@dataclass(frozen=True)
class Projection:
    """Visible points: parallel arrays of point index, pixel row and pixel column."""

    point: np.ndarray
    row: np.ndarray
    col: np.ndarray

    def __len__(self) -> int:
        return int(self.point.size)

    def __iter__(self):
        return zip(self.point.tolist(), self.row.tolist(), self.col.tolist())


@dataclass(frozen=True)
class PairSet:
    point_groups: list[np.ndarray]
    pixel_groups: list[np.ndarray]
    granularity: Granularity = "superpixel"
    segment_ids: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if len(self.point_groups) != len(self.pixel_groups):
            raise ValueError("point and pixel group counts differ")
        for g, (p, x) in enumerate(zip(self.point_groups, self.pixel_groups)):
            if len(p) == 0 or len(x) == 0:
                raise ValueError(f"group {g} is empty")
            if self.granularity == "point" and (len(p) != 1 or len(x) != 1):
                raise ValueError("point granularity requires singleton groups")

    @property
    def num_groups(self) -> int:
        return len(self.point_groups)

    @classmethod
    def singletons(cls, num_groups: int, points_per_group: Sequence[int] | None = None) -> "PairSet":
        """Pixel group g is pixel g; point groups are consecutive runs of the given sizes."""
        if points_per_group is None:
            points_per_group = [1] * num_groups
        bounds = np.concatenate([[0], np.cumsum(points_per_group)])
        point_groups = [np.arange(bounds[g], bounds[g + 1]) for g in range(num_groups)]
        pixel_groups = [np.array([g]) for g in range(num_groups)]
        gran = "point" if all(n == 1 for n in points_per_group) else "superpixel"
        return cls(point_groups, pixel_groups, gran)

    def point_labels(self) -> tuple[np.ndarray, np.ndarray]:
        """Flattened (member index, group id) arrays for the point side."""
        return _flatten(self.point_groups)

    def pixel_labels(self) -> tuple[np.ndarray, np.ndarray]:
        return _flatten(self.pixel_groups)


def _flatten(groups: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    sizes = [len(g) for g in groups]
    members = np.concatenate([np.asarray(g, dtype=np.int64) for g in groups])
    labels = np.repeat(np.arange(len(groups)), sizes)
    return members, labels


def project_points(points, camera: CameraModel) -> Projection:
    """Pinhole projection of LiDAR points; points behind the camera or off-image are dropped."""
    pts = as_matrix(points)
    if pts.shape[1] != 3:
        raise ValueError("points must be N x 3")
    homo = np.hstack([pts, np.ones((pts.shape[0], 1))])
    cam = homo @ camera.extrinsics.T
    depth = cam[:, 2]
    front = depth > 0
    uvw = np.zeros((pts.shape[0], 3))
    uvw[front] = (cam[front, :3] / depth[front, None]) @ camera.intrinsics.T
    u, v = uvw[:, 0], uvw[:, 1]
    visible = front & (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
    idx = np.flatnonzero(visible)
    return Projection(
        point=idx,
        row=np.floor(v[idx]).astype(np.int64),
        col=np.floor(u[idx]).astype(np.int64),
    )


def build_pairs(
    projections: Projection,
    segment_map: SegmentMap,
    granularity: Granularity = "superpixel",
    max_pairs: int | None = None,
    seed: int | None = None,
) -> PairSet:
    """Group visible points by superpixel, or pair them one-to-one with their pixel.

    At superpixel granularity, segments that received no points are dropped and
    the rest are renumbered densely in increasing segment-id order. At point
    granularity ``max_pairs`` caps the number of pairs by uniform sampling
    without replacement under ``seed``.
    """
    if len(projections) == 0:
        raise ValueError("empty batch")
    rows, cols = projections.row, projections.col
    if (rows.min() < 0 or cols.min() < 0 or rows.max() >= segment_map.height
            or cols.max() >= segment_map.width):
        raise ValueError("projection outside the segment map")
    pixel = rows * segment_map.width + cols

    if granularity == "point":
        keep = np.arange(len(projections))
        if max_pairs is not None and max_pairs < keep.size:
            rng = np.random.Generator(np.random.Philox(seed))
            keep = np.sort(rng.choice(keep.size, size=max_pairs, replace=False))
        point_groups = [projections.point[i:i + 1] for i in keep]
        pixel_groups = [pixel[i:i + 1] for i in keep]
        return PairSet(point_groups, pixel_groups, "point")
    if granularity != "superpixel":
        raise ValueError(f"unknown granularity {granularity!r}")

    seg_of_point = segment_map.ids[pixel]
    occupied = np.unique(seg_of_point)
    order = np.argsort(seg_of_point, kind="stable")
    splits = np.searchsorted(seg_of_point[order], occupied[1:])
    point_groups = np.split(projections.point[order], splits)
    pix_order = np.argsort(segment_map.ids, kind="stable")
    sorted_ids = segment_map.ids[pix_order]
    lo = np.searchsorted(sorted_ids, occupied, side="left")
    hi = np.searchsorted(sorted_ids, occupied, side="right")
    pixel_groups = [pix_order[a:b] for a, b in zip(lo, hi)]
    dropped = segment_map.num_segments - occupied.size
    if dropped:
        logger.debug("dropped %d superpixels without points", dropped)
    return PairSet(point_groups, pixel_groups, "superpixel", segment_ids=occupied)


def concat_pair_sets(pair_sets: Sequence[PairSet], pixel_offsets: Sequence[int]) -> PairSet:
    """Merge per-camera pair sets; pixel indices of camera c are shifted by ``pixel_offsets[c]``."""
    if len(pair_sets) != len(pixel_offsets):
        raise ValueError("need one pixel offset per pair set")
    grans = {ps.granularity for ps in pair_sets}
    if len(grans) != 1:
        raise ValueError("cannot mix granularities")
    point_groups, pixel_groups = [], []
    for ps, off in zip(pair_sets, pixel_offsets):
        point_groups += list(ps.point_groups)
        pixel_groups += [g + off for g in ps.pixel_groups]
    return PairSet(point_groups, pixel_groups, grans.pop())


def pool_pair_embeddings(point_emb, pixel_emb, pairs: PairSet) -> tuple[np.ndarray, np.ndarray]:
    """Mean-pool point and pixel embeddings per group into (Q, K)."""
    point_emb = as_matrix(point_emb)
    pixel_emb = as_matrix(pixel_emb)
    q = _pool(point_emb, *pairs.point_labels(), pairs.num_groups)
    k = _pool(pixel_emb, *pairs.pixel_labels(), pairs.num_groups)
    return q, k


def _pool(emb: np.ndarray, members: np.ndarray, labels: np.ndarray, num_groups: int) -> np.ndarray:
    if members.size and (members.min() < 0 or members.max() >= emb.shape[0]):
        raise IndexError(f"group member index out of range for {emb.shape[0]} embeddings")
    return segment_mean_pool(emb[members], labels, num_groups)


def pool_backward(grad_pooled: np.ndarray, members: np.ndarray, labels: np.ndarray, num_rows: int) -> np.ndarray:
    """Scatter a pooled gradient back to member rows, each receiving 1/|group| of it."""
    sizes = np.bincount(labels, minlength=grad_pooled.shape[0]).astype(np.float64)
    out = np.zeros((num_rows, grad_pooled.shape[1]))
    np.add.at(out, members, grad_pooled[labels] / sizes[labels, None])
    return out
