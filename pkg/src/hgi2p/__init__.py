"""Desk-scale image-to-point-cloud registration on a heterogeneous region
graph: edge prediction from multi-path relations, edge-guided feature
refinement, consistency-based correspondence pruning, and RANSAC PnP."""

from .errors import (
    DegenerateConfiguration,
    EmptyMatch,
    HgI2PError,
    InsufficientCorrespondences,
    NoPositives,
    NonFiniteLoss,
    RetryExhausted,
    SceneParseError,
    ShapeMismatch,
)
from .geometry import Intrinsics, Pose, PoseError, RansacConfig, pose_error, project, solve_pnp
from .hetgraph import HeteroGraph, build_gt_heterogeneous_edges, build_graph, build_homogeneous_edges, init_heterogeneous_edges
from .headapting import HeParams, generate_messages, interact_messages, pooled_neighbor_features
from .matchprune import Correspondence, CorrespondenceSet, PruneConfig, final_pose, hc_prune, match_features, prune_criterion_one, prune_criterion_two, seed_pose
from .model import Model, load_model, save_model
from .mpmining import MpParams, PathMatrices, attention, mask_and_normalize, path_matrices, predict_edges
from .pipeline import RegistrationResult, refine_features, register_scene
from .regions import RegionSet2D, RegionSet3D, iou_2d, pool_region_features, project_region, region_centers
from .synthbench import NoiseConfig, Scene, SceneConfig, generate_scene, inlier_ratio, registration_recall
from .training import CircleLossConfig, LossBreakdown, circle_loss, edge_loss, gradients, total_loss, train

__version__ = "0.1.0"
