"""Region-partitioned images and point clouds with per-element features.

Regions are disjoint by construction: each pixel or point carries a single
label in 0..count-1, or NONE_LABEL for unsegmented background.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Intrinsics, Pose, project_many

NONE_LABEL = -1


@dataclass(frozen=True)
class RegionSet2D:
    """Image partition: labels (H,W) int, features (H,W,c) float."""

    labels: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        feats = np.asarray(self.features, dtype=float)
        if labels.ndim != 2:
            raise ValueError("labels must be (H,W)")
        if feats.shape[:2] != labels.shape:
            raise ValueError("features must be (H,W,c) matching labels")
        count = int(labels.max()) + 1 if labels.size and labels.max() >= 0 else 0
        present = np.unique(labels[labels >= 0])
        if count and not np.array_equal(present, np.arange(count)):
            raise ValueError("region indices must be contiguous from 0 and nonempty")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "_count", count)

    @property
    def count(self) -> int:
        return self._count

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def channels(self) -> int:
        return self.features.shape[2]

    def mask(self, i: int) -> set:
        """Pixel set {(u, v)} of region i."""
        vs, us = np.nonzero(self.labels == i)
        return set(zip(us.tolist(), vs.tolist()))

    def pixel_indices(self, i: int) -> np.ndarray:
        """(m_i, 2) int array of (u, v) pixels of region i, scan order."""
        vs, us = np.nonzero(self.labels == i)
        return np.stack([us, vs], axis=1)


@dataclass(frozen=True)
class RegionSet3D:
    """Point-cloud partition: points (A,3), labels (A,) int, features (A,c)."""

    points: np.ndarray
    labels: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        labels = np.asarray(self.labels)
        feats = np.asarray(self.features, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError("points must be (A,3)")
        if labels.shape != (len(pts),) or feats.shape[0] != len(pts):
            raise ValueError("labels and features must have one row per point")
        count = int(labels.max()) + 1 if labels.size and labels.max() >= 0 else 0
        present = np.unique(labels[labels >= 0])
        if count and not np.array_equal(present, np.arange(count)):
            raise ValueError("region indices must be contiguous from 0 and nonempty")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "_count", count)

    @property
    def count(self) -> int:
        return self._count

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def point_indices(self, j: int) -> np.ndarray:
        return np.nonzero(self.labels == j)[0]

    def region_points(self, j: int) -> np.ndarray:
        return self.points[self.labels == j]


def pool_region_features(rs) -> np.ndarray:
    """Mean feature per region: (count, c).

    Works for both RegionSet2D (pixels) and RegionSet3D (points).
    """
    if isinstance(rs, RegionSet2D):
        labels = rs.labels.reshape(-1)
        feats = rs.features.reshape(-1, rs.channels)
    else:
        labels = rs.labels
        feats = rs.features
    out = np.zeros((rs.count, feats.shape[1]))
    for i in range(rs.count):
        out[i] = feats[labels == i].mean(axis=0)
    return out


def region_centers(rs) -> np.ndarray:
    """Mean pixel coordinate (count,2) for 2D, mean position (count,3) for 3D."""
    if isinstance(rs, RegionSet2D):
        out = np.zeros((rs.count, 2))
        for i in range(rs.count):
            out[i] = rs.pixel_indices(i).mean(axis=0)
        return out
    out = np.zeros((rs.count, 3))
    for j in range(rs.count):
        out[j] = rs.region_points(j).mean(axis=0)
    return out


def iou_2d(mask_a: set, mask_b: set) -> float:
    """Intersection over union of two pixel sets; 0 when the union is empty."""
    union = len(mask_a | mask_b)
    if union == 0:
        return 0.0
    return len(mask_a & mask_b) / union


def project_region(region_points: np.ndarray, pose: Pose, k: Intrinsics) -> set:
    """Project 3D points and round to the nearest integer pixel.

    Returns the set {(u, v)} of hit pixels; invisible points are dropped,
    as are pixels that rounding pushes out of the image.
    """
    pts = np.asarray(region_points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        return set()
    uv, ok = project_many(pts, pose, k)
    if not ok.any():
        return set()
    pix = np.rint(uv[ok]).astype(int)
    keep = (pix[:, 0] >= 0) & (pix[:, 0] < k.width) & (pix[:, 1] >= 0) & (pix[:, 1] < k.height)
    return set(map(tuple, pix[keep].tolist()))
