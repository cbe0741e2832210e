"""Correspondence extraction and graph-consistency pruning.

Matching is coarse-to-fine: the strongest predicted region pairs gate a
mutual-nearest-neighbor search in refined feature space. Pruning estimates
a seed pose from region centers and keeps a correspondence when either the
adjacency/reprojection test or the relative-position cosine test accepts it.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import EmptyMatch, InsufficientCorrespondences
from .geometry import Intrinsics, Pose, RansacConfig, project_raw, solve_pnp
from .mpmining import EDGE_EPS
from .regions import RegionSet2D, RegionSet3D, region_centers

DEFAULT_DELTA_REJ = 15.0  # px; reprojection acceptance radius of criterion I
DEFAULT_KEEP_FRACTION = 0.85  # criterion II keeps this cosine-ranked share
DEFAULT_TOP_K = 8  # region pairs searched by the fine matcher

FLAG_UNKNOWN = "unknown"
FLAG_KEPT = "kept"
FLAG_PRUNED = "pruned"


@dataclass(frozen=True)
class Correspondence:
    pixel: tuple  # (u, v), integer pixel
    point: tuple  # (x, y, z) meters
    score: float  # feature similarity that produced the match
    inlier_flag: str = FLAG_UNKNOWN
    point_index: int = -1  # row into the scene's point array

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError("score must be finite")
        if self.inlier_flag not in (FLAG_UNKNOWN, FLAG_KEPT, FLAG_PRUNED):
            raise ValueError(f"bad inlier flag {self.inlier_flag!r}")


class CorrespondenceSet:
    """Ordered collection of correspondences with pruning flags."""

    def __init__(self, corrs):
        self.corrs = tuple(corrs)

    def __iter__(self):
        return iter(self.corrs)

    def __len__(self):
        return len(self.corrs)

    def __getitem__(self, i):
        return self.corrs[i]

    def kept(self) -> "CorrespondenceSet":
        return CorrespondenceSet(c for c in self.corrs if c.inlier_flag != FLAG_PRUNED)

    def pairs(self):
        """(pixel, point) tuples of non-pruned correspondences, solver-ready."""
        return [
            (np.asarray(c.pixel, dtype=float), np.asarray(c.point, dtype=float))
            for c in self.corrs
            if c.inlier_flag != FLAG_PRUNED
        ]


@dataclass(frozen=True)
class PruneConfig:
    delta_rej: float = DEFAULT_DELTA_REJ
    keep_fraction: float = DEFAULT_KEEP_FRACTION
    ransac: RansacConfig = field(default_factory=RansacConfig)

    def __post_init__(self):
        if self.delta_rej <= 0:
            raise ValueError("delta_rej must be positive")
        if not (0.0 < self.keep_fraction <= 1.0):
            raise ValueError("keep_fraction must lie in (0, 1]")


def _cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine similarities between rows of a and rows of b; zero rows give 0."""
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    return (a / np.maximum(na, 1e-30)) @ (b / np.maximum(nb, 1e-30)).T


def match_features(g_img: np.ndarray, g_cld: np.ndarray, e_hat: np.ndarray,
                   rs2d: RegionSet2D, rs3d: RegionSet3D,
                   top_k: int = DEFAULT_TOP_K) -> CorrespondenceSet:
    """Mutual nearest neighbors inside the top-k strongest region pairs.

    g_img: refined (H, W, c) features; g_cld: refined (A, c) features.
    Matches from later (weaker) region pairs never displace an earlier
    match at the same pixel unless strictly better; raises EmptyMatch when
    no region pair carries weight above EDGE_EPS.
    """
    w = np.asarray(e_hat, dtype=float)
    order = np.argsort(-w, axis=None, kind="stable")
    pairs = [
        divmod(int(o), w.shape[1])
        for o in order[: max(0, top_k)]
        if w.flat[o] > EDGE_EPS
    ]
    if not pairs:
        raise EmptyMatch("no region pair has edge weight above threshold")

    best: dict = {}
    for rank, (i, j) in enumerate(pairs):
        pix = rs2d.pixel_indices(i)
        pidx = rs3d.point_indices(j)
        f2 = g_img[pix[:, 1], pix[:, 0]]
        f3 = g_cld[pidx]
        sim = _cosine_matrix(f2, f3)
        fwd = np.argmax(sim, axis=1)
        bwd = np.argmax(sim, axis=0)
        mutual = np.nonzero(bwd[fwd] == np.arange(len(pix)))[0]
        for p in mutual:
            q = fwd[p]
            key = (int(pix[p, 0]), int(pix[p, 1]))
            score = float(sim[p, q])
            cand = (score, -rank, int(pidx[q]))
            if key not in best or cand[:2] > best[key][:2]:
                best[key] = (score, -rank, int(pidx[q]))
    corrs = [
        Correspondence(
            pixel=key,
            point=tuple(rs3d.points[rec[2]].tolist()),
            score=rec[0],
            point_index=rec[2],
        )
        for key, rec in sorted(best.items(), key=lambda kv: (kv[0][1], kv[0][0]))
    ]
    return CorrespondenceSet(corrs)


def seed_pose(e_hat: np.ndarray, rs2d: RegionSet2D, rs3d: RegionSet3D,
              k: Intrinsics, ransac: RansacConfig = RansacConfig()) -> Pose:
    """Initial pose from region centers linked by the predicted edges.

    Every (2D center, 3D center) pair with edge weight above EDGE_EPS
    enters one RANSAC PnP solve; exact duplicates collapse to one pair.
    """
    c2 = region_centers(rs2d)
    c3 = region_centers(rs3d)
    w = np.asarray(e_hat, dtype=float)
    seen = set()
    pairs = []
    for i in range(w.shape[0]):
        for j in range(w.shape[1]):
            if w[i, j] > EDGE_EPS:
                key = (tuple(c2[i]), tuple(c3[j]))
                if key not in seen:
                    seen.add(key)
                    pairs.append((c2[i], c3[j]))
    if len(pairs) < 4:
        raise InsufficientCorrespondences(
            f"only {len(pairs)} center pairs carry edge weight"
        )
    pose, _ = solve_pnp(pairs, k, ransac)
    return pose


def prune_criterion_one(c: Correspondence, e_hat: np.ndarray,
                        rs2d: RegionSet2D, rs3d: RegionSet3D,
                        t_pose: Pose, k: Intrinsics,
                        delta_rej: float = DEFAULT_DELTA_REJ) -> bool:
    """Adjacency or reprojection acceptance.

    True when the pixel's region and the point's region share a predicted
    edge, or when the point reprojects under the seed pose within
    delta_rej pixels of the pixel.
    """
    u, v = int(round(c.pixel[0])), int(round(c.pixel[1]))
    region_2d = int(rs2d.labels[v, u]) if 0 <= v < rs2d.height and 0 <= u < rs2d.width else -1
    region_3d = int(rs3d.labels[c.point_index]) if 0 <= c.point_index < len(rs3d.points) else -1
    if region_2d >= 0 and region_3d >= 0 and e_hat[region_2d, region_3d] > EDGE_EPS:
        return True
    uv, _ = project_raw(np.asarray(c.point), t_pose, k)
    if uv is None:
        return False
    return float(np.hypot(uv[0] - c.pixel[0], uv[1] - c.pixel[1])) <= delta_rej


def _projected_center_anchors(e_hat: np.ndarray, rs2d: RegionSet2D,
                              rs3d: RegionSet3D, t_pose: Pose, k: Intrinsics):
    """Per-2D-region anchors: edge-weighted mixes of the projected 3D
    centers, plus a validity mask for rows without edge weight."""
    c3 = region_centers(rs3d)
    proj = np.zeros((rs3d.count, 2))
    for j in range(rs3d.count):
        uv, _ = project_raw(c3[j], t_pose, k)
        if uv is not None:
            proj[j] = uv
    anchors = np.asarray(e_hat, dtype=float) @ proj
    valid = np.asarray(e_hat, dtype=float).sum(axis=1) > EDGE_EPS
    return anchors, valid


def prune_criterion_two(c: Correspondence, e_hat: np.ndarray,
                        rs2d: RegionSet2D, rs3d: RegionSet3D,
                        t_pose: Pose, k: Intrinsics,
                        _anchors=None) -> float:
    """Cosine consistency of relative-position vectors.

    The pixel's offsets to every 2D region center are compared against the
    projected point's offsets to the edge-predicted anchors of those
    centers; returns the cosine in [-1, 1], or 0 when a norm vanishes or
    the point is behind the camera. Rows without edge weight are zeroed on
    both sides.
    """
    if _anchors is None:
        _anchors = _projected_center_anchors(e_hat, rs2d, rs3d, t_pose, k)
    anchors, valid = _anchors
    uv, _ = project_raw(np.asarray(c.point), t_pose, k)
    if uv is None:
        return 0.0
    c2 = region_centers(rs2d)
    s = (np.asarray(c.pixel, dtype=float) - c2) * valid[:, None]
    t = (uv - anchors) * valid[:, None]
    ns = np.linalg.norm(s)
    nt = np.linalg.norm(t)
    if ns == 0.0 or nt == 0.0:
        return 0.0
    return float(np.clip(np.dot(s.ravel(), t.ravel()) / (ns * nt), -1.0, 1.0))


def hc_prune(cs: CorrespondenceSet, e_hat: np.ndarray,
             rs2d: RegionSet2D, rs3d: RegionSet3D,
             t_pose: Pose, k: Intrinsics,
             cfg: PruneConfig = PruneConfig(),
             criteria=("one", "two")) -> CorrespondenceSet:
    """Flag correspondences kept by either criterion; never deletes.

    Criterion II is adaptive: correspondences are ranked by descending
    cosine and the top keep_fraction share passes. `criteria` restricts
    which tests run (ablation switch).
    """
    n = len(cs)
    if n == 0:
        return CorrespondenceSet(())
    pass_one = np.zeros(n, dtype=bool)
    if "one" in criteria:
        for idx, c in enumerate(cs):
            pass_one[idx] = prune_criterion_one(
                c, e_hat, rs2d, rs3d, t_pose, k, cfg.delta_rej
            )
    pass_two = np.zeros(n, dtype=bool)
    if "two" in criteria:
        anchors = _projected_center_anchors(e_hat, rs2d, rs3d, t_pose, k)
        cosines = np.array([
            prune_criterion_two(c, e_hat, rs2d, rs3d, t_pose, k, _anchors=anchors)
            for c in cs
        ])
        n_pass = int(np.floor(cfg.keep_fraction * n))
        order = np.argsort(-cosines, kind="stable")
        pass_two[order[:n_pass]] = True
    keep = pass_one | pass_two
    return CorrespondenceSet(
        replace(c, inlier_flag=FLAG_KEPT if keep[idx] else FLAG_PRUNED)
        for idx, c in enumerate(cs)
    )


def final_pose(cs: CorrespondenceSet, k: Intrinsics,
               ransac: RansacConfig = RansacConfig()) -> Pose:
    """RANSAC PnP over the non-pruned correspondences."""
    pairs = cs.pairs()
    if len(pairs) < 4:
        raise InsufficientCorrespondences(
            f"only {len(pairs)} kept correspondences"
        )
    pose, _ = solve_pnp(pairs, k, ransac)
    return pose
