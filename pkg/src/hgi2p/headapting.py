"""Edge-guided refinement of per-pixel and per-point features.

Message generation pools cross-modal vertex features along the predicted
edges and passes them through learned value maps; message interaction lets
every element of a region attend over itself concatenated with its region's
message, blended with the original features by beta.

Functions accept plain arrays or tape variables (see autodiff).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .mpmining import EDGE_EPS, attention
from .regions import RegionSet2D, RegionSet3D

DEFAULT_BETA = 0.1  # blend strength; larger over-mixes and hurts discriminability

_TINY = 1e-30


@dataclass
class HeParams:
    """Learnable matrices of feature adaptation.

    w_msg_img / w_msg_cld: (c, c) value maps used in message generation;
    w_query_img, w_key_img, w_value_img and the cloud triple: (2c, c)
    projections for per-region interaction attention; beta in [0, 1]
    balances original and adapted features.
    """

    w_msg_img: object
    w_msg_cld: object
    w_query_img: object
    w_key_img: object
    w_value_img: object
    w_query_cld: object
    w_key_cld: object
    w_value_cld: object
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        if not (0.0 <= self.beta <= 1.0):
            raise ValueError("beta must lie in [0, 1]")
        c = ad.val(self.w_msg_img).shape[0]
        square = ("w_msg_img", "w_msg_cld")
        tall = (
            "w_query_img", "w_key_img", "w_value_img",
            "w_query_cld", "w_key_cld", "w_value_cld",
        )
        for name in square + tall:
            arr = ad.val(getattr(self, name))
            want = (c, c) if name in square else (2 * c, c)
            if arr.shape != want:
                raise ValueError(f"{name} must have shape {want}, got {arr.shape}")
            if isinstance(getattr(self, name), np.ndarray) and not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")

    @property
    def channels(self) -> int:
        return ad.val(self.w_msg_img).shape[0]

    @classmethod
    def identity_init(cls, c: int, beta: float = DEFAULT_BETA) -> "HeParams":
        """Value maps start as identity and the interaction projections as
        [identity; 0] stacks, so the untrained layer approximates identity."""
        eye = np.eye(c)
        stack = np.vstack([np.eye(c), np.zeros((c, c))])
        return cls(
            w_msg_img=eye.copy(),
            w_msg_cld=eye.copy(),
            w_query_img=stack.copy(),
            w_key_img=stack.copy(),
            w_value_img=stack.copy(),
            w_query_cld=stack.copy(),
            w_key_cld=stack.copy(),
            w_value_cld=stack.copy(),
            beta=beta,
        )


class PooledNeighbors(NamedTuple):
    """Edge-weighted neighbor means plus validity flags for zero rows."""

    cloud_for_image: object  # (M, c): pooled 3D vertex features per 2D region
    image_for_cloud: object  # (N, c): pooled 2D vertex features per 3D region
    image_has_neighbors: np.ndarray  # (M,) bool
    cloud_has_neighbors: np.ndarray  # (N,) bool


def pooled_neighbor_features(e_hat, image_feats, cloud_feats) -> PooledNeighbors:
    """Weighted neighbor pooling along the cross-modal edges.

    Row i of cloud_for_image is sum_j e_hat[i,j] * cloud_feats[j] divided by
    the row weight; rows (or columns) with zero total weight produce zero
    vectors and are flagged invalid.
    """
    row_w = ad.summ(e_hat, axis=1, keepdims=True)
    col_w = ad.reshape(ad.summ(e_hat, axis=0), (-1, 1))
    pooled_cloud = ad.div(ad.matmul(e_hat, cloud_feats), ad.maximum(row_w, _TINY))
    pooled_image = ad.div(
        ad.matmul(ad.transpose(e_hat), image_feats), ad.maximum(col_w, _TINY)
    )
    return PooledNeighbors(
        cloud_for_image=pooled_cloud,
        image_for_cloud=pooled_image,
        image_has_neighbors=ad.detach(row_w).reshape(-1) > _TINY,
        cloud_has_neighbors=ad.detach(col_w).reshape(-1) > _TINY,
    )


class Messages(NamedTuple):
    to_image: object  # (M, c)
    to_cloud: object  # (N, c)


def generate_messages(image_feats, cloud_feats, pooled: PooledNeighbors, p: HeParams,
                      unpooled: bool = False, e_hat=None) -> Messages:
    """Cross-modal messages per region.

    Literal form: the pooled neighbor feature is the single key/value
    token, so attention collapses to the value projection and the message
    is pooled @ value_map regardless of the query. With unpooled=True the
    key/value set is instead the un-pooled neighbor vertex features
    (neighbors = edge weight > EDGE_EPS in e_hat), which keeps the query
    meaningful; this variant is off by default.
    """
    if not unpooled:
        return Messages(
            to_image=ad.matmul(pooled.cloud_for_image, p.w_msg_cld),
            to_cloud=ad.matmul(pooled.image_for_cloud, p.w_msg_img),
        )
    if e_hat is None:
        raise ValueError("unpooled message generation needs e_hat")
    weights = ad.detach(e_hat)
    m, n = weights.shape
    c = ad.val(image_feats).shape[1]
    to_image = []
    for i in range(m):
        nbr = np.nonzero(weights[i] > EDGE_EPS)[0]
        if len(nbr) == 0:
            to_image.append(np.zeros((1, c)))
            continue
        q = ad.matmul(ad.reshape(image_feats[i], (1, c)), p.w_msg_img)
        kv = ad.matmul(ad.take(cloud_feats, nbr), p.w_msg_cld)
        to_image.append(attention(q, kv, kv))
    to_cloud = []
    for j in range(n):
        nbr = np.nonzero(weights[:, j] > EDGE_EPS)[0]
        if len(nbr) == 0:
            to_cloud.append(np.zeros((1, c)))
            continue
        q = ad.matmul(ad.reshape(cloud_feats[j], (1, c)), p.w_msg_cld)
        kv = ad.matmul(ad.take(image_feats, nbr), p.w_msg_img)
        to_cloud.append(attention(q, kv, kv))
    return Messages(
        to_image=ad.concat(to_image, axis=0),
        to_cloud=ad.concat(to_cloud, axis=0),
    )


def _region_blocks_2d(rs: RegionSet2D):
    """Flat row indices per region plus the unlabeled remainder."""
    flat_labels = rs.labels.reshape(-1)
    blocks = [np.nonzero(flat_labels == i)[0] for i in range(rs.count)]
    rest = np.nonzero(flat_labels < 0)[0]
    return blocks, rest


def _region_blocks_3d(rs: RegionSet3D):
    blocks = [np.nonzero(rs.labels == j)[0] for j in range(rs.count)]
    rest = np.nonzero(rs.labels < 0)[0]
    return blocks, rest


def interact_messages(rs, msgs, p: HeParams, side: str | None = None):
    """Refine per-element features by attending over [feature | message].

    For each region, elements attend within the region over the channel
    concatenation of their own feature and the region's message; the
    attention output is blended with the original features by beta.
    Unlabeled elements keep their original features. Output layout matches
    the input: (H, W, c) for images, (A, c) for clouds.
    """
    if side is None:
        side = "image" if isinstance(rs, RegionSet2D) else "cloud"
    if side == "image":
        if not isinstance(rs, RegionSet2D):
            raise ValueError("side='image' requires a RegionSet2D")
        feats = rs.features.reshape(-1, rs.channels)
        blocks, rest = _region_blocks_2d(rs)
        wq, wk, wv = p.w_query_img, p.w_key_img, p.w_value_img
    elif side == "cloud":
        if not isinstance(rs, RegionSet3D):
            raise ValueError("side='cloud' requires a RegionSet3D")
        feats = rs.features
        blocks, rest = _region_blocks_3d(rs)
        wq, wk, wv = p.w_query_cld, p.w_key_cld, p.w_value_cld
    else:
        raise ValueError("side must be 'image' or 'cloud'")

    if len(blocks) != ad.val(msgs).shape[0]:
        raise ValueError("one message row per region required")

    beta = p.beta
    if beta == 0.0:
        # exact identity pathway, bit for bit
        return rs.features

    parts = []
    order = []
    for r, idx in enumerate(blocks):
        f_r = feats[idx]
        h = ad.concat([f_r, ad.repeat_rows(msgs[r], len(idx))], axis=1)
        att = attention(ad.matmul(h, wq), ad.matmul(h, wk), ad.matmul(h, wv))
        parts.append(ad.add(ad.mul(1.0 - beta, f_r), ad.mul(beta, att)))
        order.append(idx)
    if len(rest):
        parts.append(feats[rest])
        order.append(rest)
    stacked = ad.concat(parts, axis=0)
    inverse = np.argsort(np.concatenate(order), kind="stable")
    out = ad.take(stacked, inverse)
    if side == "image":
        return ad.reshape(out, rs.features.shape)
    return out
