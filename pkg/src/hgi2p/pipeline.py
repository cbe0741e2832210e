"""End-to-end composition: graph construction, edge prediction, feature
refinement, matching, pruning, and pose estimation for one scene."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .errors import HgI2PError
from .geometry import Intrinsics, Pose, pose_error
from .headapting import HeParams, Messages, PooledNeighbors, generate_messages, interact_messages, pooled_neighbor_features
from .hetgraph import HeteroGraph, EdgeRole, build_graph
from .matchprune import CorrespondenceSet, PruneConfig, final_pose, hc_prune, match_features, seed_pose
from .model import Model
from .mpmining import MpParams, mask_and_normalize, predict_edges
from .regions import RegionSet2D, RegionSet3D
from .synthbench import Scene


class RefineResult(NamedTuple):
    graph: HeteroGraph
    raw_edges: object  # (M, N) before clamp/mask/normalize
    e_hat: object  # (M, N) final predicted edges
    pooled: PooledNeighbors
    messages: Messages
    refined_2d: object  # (H, W, c)
    refined_3d: object  # (A, c)


def refine_features(rs2d: RegionSet2D, rs3d: RegionSet3D, k: Intrinsics,
                    mp: MpParams, he: HeParams,
                    alpha: float, tau_2d: float,
                    unpooled: bool = False) -> RefineResult:
    """Differentiable core of the pipeline; mp/he entries may be tape vars."""
    graph = build_graph(rs2d, rs3d, alpha)
    raw = predict_edges(graph, mp)
    e_hat = mask_and_normalize(raw, rs2d, rs3d, k, tau_2d)
    pooled = pooled_neighbor_features(e_hat, graph.image_feats, graph.cloud_feats)
    msgs = generate_messages(
        graph.image_feats, graph.cloud_feats, pooled, he,
        unpooled=unpooled, e_hat=e_hat,
    )
    refined_2d = interact_messages(rs2d, msgs.to_image, he, "image")
    refined_3d = interact_messages(rs3d, msgs.to_cloud, he, "cloud")
    return RefineResult(graph, raw, e_hat, pooled, msgs, refined_2d, refined_3d)


@dataclass
class RegistrationResult:
    corrs: CorrespondenceSet  # flagged after pruning unless pruning is off
    initial_pose: Pose  # seeded from region centers
    pose: Pose  # final RANSAC PnP over kept correspondences
    e_hat: np.ndarray
    error: object  # PoseError against the scene's ground truth
    timings: dict  # stage name -> seconds


def _normalize_rows(mat: np.ndarray) -> np.ndarray:
    s = mat.sum(axis=1, keepdims=True)
    return mat / np.maximum(s, 1e-30)


def register_scene(scene: Scene, model: Model,
                   prune_cfg: PruneConfig = PruneConfig(),
                   no_prune: bool = False,
                   criteria=("one", "two"),
                   use_gt_edges: bool = False) -> RegistrationResult:
    """Run the full pipeline on one scene.

    no_prune skips HC-pruning (the ablation path); use_gt_edges replaces
    the predicted edge matrix with the row-normalized ground-truth edges.
    """
    timings = {}

    def stage(name, fn):
        t0 = time.perf_counter()
        try:
            out = fn()
        except HgI2PError as exc:
            raise type(exc)(f"[stage {name}] {exc}") from exc
        timings[name] = time.perf_counter() - t0
        return out

    res = stage("refine", lambda: refine_features(
        scene.rs2d, scene.rs3d, scene.k, model.mp, model.he,
        model.alpha, model.tau_2d,
    ))
    e_hat = ad.val(res.e_hat)
    if use_gt_edges:
        e_hat = _normalize_rows(np.asarray(scene.gt_edges, dtype=float))

    corrs = stage("match", lambda: match_features(
        ad.val(res.refined_2d), ad.val(res.refined_3d), e_hat,
        scene.rs2d, scene.rs3d, model.top_k,
    ))

    initial = stage("seed", lambda: seed_pose(
        e_hat, scene.rs2d, scene.rs3d, scene.k, prune_cfg.ransac
    ))
    if not no_prune:
        corrs = stage("prune", lambda: hc_prune(
            corrs, e_hat, scene.rs2d, scene.rs3d, initial, scene.k,
            prune_cfg, criteria,
        ))

    pose = stage("pose", lambda: final_pose(corrs, scene.k, prune_cfg.ransac))

    return RegistrationResult(
        corrs=corrs,
        initial_pose=initial,
        pose=pose,
        e_hat=e_hat,
        error=pose_error(pose, scene.gt_pose),
        timings=timings,
    )
