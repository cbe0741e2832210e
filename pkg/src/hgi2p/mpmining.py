"""Cross-modal edge prediction from multi-path adjacency relations.

Products of the intra-modal adjacency matrices with the initial cross-modal
affinity give three path-relation matrices (one per traversal pattern); a
learned mixing matrix plus single-head attention turns them into the
predicted cross-modal edge matrix, which is then center-masked, clamped,
and row-normalized.

All forward functions route through the autodiff helpers, so they accept
plain arrays (inference) or tape variables (training) interchangeably.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .errors import ShapeMismatch
from .geometry import Intrinsics, Pose, project_raw
from .hetgraph import HeteroGraph
from .regions import RegionSet2D, RegionSet3D, region_centers

DEFAULT_TAU_2D = 16.0  # px; center-distance gate for edge sparsity
EDGE_EPS = 1e-6  # entries above this count as graph adjacency

_TINY = 1e-30


@dataclass
class MpParams:
    """Learnable matrices of the edge-prediction head.

    w_mix: (3*K, K) with K = m_max*n_max, mixes the three flattened path
    matrices into one correlation feature vector; w_query/w_key/w_value:
    (K, K) projections feeding the attention layer.
    """

    w_mix: object
    w_query: object
    w_key: object
    w_value: object
    m_max: int
    n_max: int

    def __post_init__(self):
        k = self.m_max * self.n_max
        shapes = {
            "w_mix": (3 * k, k),
            "w_query": (k, k),
            "w_key": (k, k),
            "w_value": (k, k),
        }
        for name, want in shapes.items():
            arr = ad.val(getattr(self, name))
            if arr.shape != want:
                raise ValueError(f"{name} must have shape {want}, got {arr.shape}")
            if isinstance(getattr(self, name), np.ndarray) and not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")

    @classmethod
    def identity_init(cls, m_max: int, n_max: int) -> "MpParams":
        """Start as the mean of the three path matrices passed through
        identity projections, approximating the plain multi-path average."""
        k = m_max * n_max
        eye = np.eye(k)
        w_mix = np.vstack([eye, eye, eye]) / 3.0
        return cls(w_mix, eye.copy(), eye.copy(), eye.copy(), m_max, n_max)


class PathMatrices(NamedTuple):
    """Adjacency relations along the three traversal patterns, each (M, N)."""

    via_image: np.ndarray  # image hop then cross
    via_cloud: np.ndarray  # cross then cloud hop
    via_both: np.ndarray  # image hop, cross, cloud hop


def path_matrices(g: HeteroGraph) -> PathMatrices:
    """Multi-path relation matrices from the graph's adjacency structure."""
    e1 = g.image_adj @ g.cross
    e2 = g.cross @ g.cloud_adj
    e3 = g.image_adj @ g.cross @ g.cloud_adj
    return PathMatrices(e1, e2, e3)


def attention(q, k, v):
    """Scaled dot-product attention: Softmax(q k^T / sqrt(d)) v.

    q: (a, d), k: (b, d), v: (b, e); each softmax row sums to 1.
    """
    d = ad.val(q).shape[1]
    scores = ad.div(ad.matmul(q, ad.transpose(k)), float(np.sqrt(d)))
    return ad.matmul(ad.softmax_rows(scores), v)


def _pad(mat, m_max: int, n_max: int):
    m, n = ad.val(mat).shape
    if m == m_max and n == n_max:
        return mat
    buf = np.zeros((m_max, n_max))
    if isinstance(mat, ad.Var):
        # traced path never needs padding today; keep the constant case fast
        raise NotImplementedError("padding of traced matrices is unsupported")
    buf[:m, :n] = mat
    return buf


def predict_edges(g: HeteroGraph, p: MpParams):
    """Predicted cross-modal edge matrix (M, N), unmasked and unnormalized.

    The three path matrices are zero-padded to the configured maximum
    sizes, flattened row-major, mixed by w_mix, projected to query, key,
    and value, reshaped to m_max tokens of dimension n_max, passed through
    attention, and cropped back to (M, N).
    """
    m, n = g.m, g.n
    if m > p.m_max or n > p.n_max:
        raise ShapeMismatch(
            f"scene has ({m},{n}) regions but the model was created for "
            f"({p.m_max},{p.n_max})"
        )
    pm = path_matrices(g)
    flat = np.concatenate(
        [
            _pad(pm.via_image, p.m_max, p.n_max).ravel(),
            _pad(pm.via_cloud, p.m_max, p.n_max).ravel(),
            _pad(pm.via_both, p.m_max, p.n_max).ravel(),
        ]
    )
    feat = ad.matmul(ad.transpose(p.w_mix), flat)
    q = ad.reshape(ad.matmul(feat, p.w_query), (p.m_max, p.n_max))
    k = ad.reshape(ad.matmul(feat, p.w_key), (p.m_max, p.n_max))
    v = ad.reshape(ad.matmul(feat, p.w_value), (p.m_max, p.n_max))
    out = attention(q, k, v)
    if m != p.m_max or n != p.n_max:
        out = out[:m, :n]
    return out


def center_mask(rs2d: RegionSet2D, rs3d: RegionSet3D, k: Intrinsics, tau_2d: float = DEFAULT_TAU_2D) -> np.ndarray:
    """(M, N) boolean gate: keep pairs whose 2D region center lies within
    tau_2d pixels of the identity-pose projection of the 3D region center.

    Relies on the near-identity pose prior; 3D centers behind the camera
    are gated out.
    """
    if tau_2d <= 0:
        raise ValueError("tau_2d must be positive")
    centers_2d = region_centers(rs2d)
    centers_3d = region_centers(rs3d)
    identity = Pose.identity()
    mask = np.zeros((rs2d.count, rs3d.count), dtype=bool)
    for j in range(rs3d.count):
        uv, _ = project_raw(centers_3d[j], identity, k)
        if uv is None:
            continue
        dist = np.linalg.norm(centers_2d - uv, axis=1)
        mask[:, j] = dist <= tau_2d
    return mask


def mask_and_normalize(e_hat, rs2d: RegionSet2D, rs3d: RegionSet3D, k: Intrinsics, tau_2d: float = DEFAULT_TAU_2D):
    """Clamp predicted edges at zero, apply the center-distance mask, and
    L1-normalize each nonzero row; all-zero rows stay zero."""
    gate = center_mask(rs2d, rs3d, k, tau_2d).astype(float)
    clamped = ad.maximum(0.0, e_hat)
    gated = ad.mul(clamped, gate)
    row_sum = ad.summ(gated, axis=1, keepdims=True)
    return ad.div(gated, ad.maximum(row_sum, _TINY))
