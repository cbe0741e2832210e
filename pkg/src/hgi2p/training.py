"""Joint loss, gradients, and a small SGD loop.

The loss couples a circle loss over correspondence similarities with a
masked squared-error supervision of the predicted cross-modal edges.
Gradients come from the reverse-mode tape in autodiff; the test suite
holds them against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import NonFiniteLoss, NoPositives
from .model import Model
from .mpmining import EDGE_EPS
from .pipeline import refine_features
from .synthbench import Scene

DEFAULT_LAMBDA1 = 0.064  # edge-supervision weight
DEFAULT_MAX_POSITIVES = 96
DEFAULT_NEGATIVES_PER_POSITIVE = 16
DEFAULT_LEARNING_RATE = 1e-3
DEFAULT_MOMENTUM = 0.9

_NORM_EPS = 1e-24


@dataclass(frozen=True)
class CircleLossConfig:
    pos_margin: float = 0.1  # distance below which a positive is satisfied
    neg_margin: float = 1.4  # distance above which a negative is satisfied
    scale: float = 10.0
    pos_radius: float = 0.05  # meters; pairs closer than this are positives

    def __post_init__(self):
        if self.neg_margin <= self.pos_margin:
            raise ValueError("neg_margin must exceed pos_margin")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.pos_radius <= 0:
            raise ValueError("pos_radius must be positive")


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    corr: float
    edge: float
    lambda1: float


def edge_loss(e_hat, e_gt):
    """Sum of squared differences over the ground-truth support only;
    positions where e_gt is zero are ignored entirely."""
    gt = np.asarray(ad.val(e_gt), dtype=float)
    if ad.val(e_hat).shape != gt.shape:
        raise ValueError("edge matrices must share a shape")
    mask = (gt != 0.0).astype(float)
    diff = ad.sub(e_hat, gt)
    return ad.summ(ad.mul(ad.mul(diff, diff), mask))


def circle_loss_terms(pos_sims, neg_sims, cfg: CircleLossConfig):
    """Circle loss over cosine similarities.

    Similarities map to unit-vector distances d = sqrt(2 - 2s); each pair
    contributes a self-paced weighted exponential, with the weight
    max(0, d - pos_margin) (resp. max(0, neg_margin - d)) vanishing
    continuously once the pair satisfies its margin. Saturated-easy sets
    therefore give exactly zero loss.
    """
    loss_scale = cfg.scale

    def dist(sims):
        return ad.sqrt(ad.maximum(ad.sub(2.0, ad.mul(2.0, sims)), 1e-12))

    if ad.val(pos_sims).size:
        dp = dist(pos_sims)
        wp = ad.maximum(0.0, ad.sub(dp, cfg.pos_margin))
        sp = ad.summ(ad.mul(wp, ad.exp(ad.mul(loss_scale, ad.sub(dp, cfg.pos_margin)))))
    else:
        sp = 0.0
    if ad.val(neg_sims).size:
        dn = dist(neg_sims)
        wn = ad.maximum(0.0, ad.sub(cfg.neg_margin, dn))
        sn = ad.summ(ad.mul(wn, ad.exp(ad.mul(loss_scale, ad.sub(cfg.neg_margin, dn)))))
    else:
        sn = 0.0
    return ad.div(ad.log1p(ad.mul(sp, sn)), loss_scale)


def select_training_pairs(scene: Scene, edge_weights: np.ndarray | None,
                          cfg: CircleLossConfig,
                          max_positives: int = DEFAULT_MAX_POSITIVES,
                          negatives_per_positive: int = DEFAULT_NEGATIVES_PER_POSITIVE,
                          seed: int = 0):
    """Pick positive pixel/point pairs and hard negatives.

    Positives come from the scene's ground-truth pairs (filtered to the
    positive radius, subsampled deterministically). Negatives for a pixel
    are points inside its region's edge-linked 3D regions, at least
    pos_radius away from the exact lifting, ranked hardest-first by raw
    input-feature similarity. Raw features keep the selection independent
    of model parameters.

    Returns (pixels (P,2) int, point_idx (P,) int, neg_pixel_rows (Q,) int,
    neg_point_idx (Q,) int).
    """
    pairs = [
        (u, v, idx)
        for u, v, idx in scene.gt_pairs
        if np.linalg.norm(scene.rs3d.points[idx] - scene.lift((u, v))) <= cfg.pos_radius
    ]
    if not pairs:
        raise NoPositives("scene has no ground-truth pairs within pos_radius")
    rng = np.random.default_rng([seed, scene.seed])
    if len(pairs) > max_positives:
        sel = np.sort(rng.choice(len(pairs), size=max_positives, replace=False))
        pairs = [pairs[i] for i in sel]

    if edge_weights is None:
        adjacency = np.asarray(scene.gt_edges) > 0.0
    else:
        adjacency = np.asarray(ad.val(edge_weights)) > EDGE_EPS

    labels2d = scene.rs2d.labels
    labels3d = scene.rs3d.labels
    raw2d = scene.rs2d.features
    raw3d = scene.rs3d.features
    norm3d = raw3d / np.maximum(np.linalg.norm(raw3d, axis=1, keepdims=True), 1e-30)

    pix = np.array([(u, v) for u, v, _ in pairs], dtype=int)
    pos_idx = np.array([idx for _, _, idx in pairs], dtype=int)
    neg_pixel_rows = []
    neg_point_idx = []
    for row, (u, v, _) in enumerate(pairs):
        region = labels2d[v, u]
        if region < 0:
            continue
        linked = np.nonzero(adjacency[region])[0]
        if len(linked) == 0:
            continue
        cand = np.nonzero(np.isin(labels3d, linked))[0]
        lifted = scene.lift((u, v))
        far = np.linalg.norm(scene.rs3d.points[cand] - lifted, axis=1) > cfg.pos_radius
        cand = cand[far]
        if len(cand) == 0:
            continue
        anchor = raw2d[v, u]
        anchor = anchor / max(np.linalg.norm(anchor), 1e-30)
        sims = norm3d[cand] @ anchor
        hardest = cand[np.argsort(-sims, kind="stable")[:negatives_per_positive]]
        neg_pixel_rows.extend([row] * len(hardest))
        neg_point_idx.extend(hardest.tolist())
    return (
        pix,
        pos_idx,
        np.asarray(neg_pixel_rows, dtype=int),
        np.asarray(neg_point_idx, dtype=int),
    )


def _row_normalize(feats):
    sq = ad.summ(ad.mul(feats, feats), axis=1, keepdims=True)
    return ad.div(feats, ad.sqrt(ad.maximum(sq, _NORM_EPS)))


def circle_loss(refined_2d, refined_3d, scene: Scene, cfg: CircleLossConfig,
                edge_weights: np.ndarray | None = None,
                max_positives: int = DEFAULT_MAX_POSITIVES,
                negatives_per_positive: int = DEFAULT_NEGATIVES_PER_POSITIVE,
                seed: int = 0):
    """Circle loss over refined-feature similarities of selected pairs."""
    pix, pos_idx, neg_rows, neg_idx = select_training_pairs(
        scene, edge_weights, cfg, max_positives, negatives_per_positive, seed
    )
    h, w = scene.rs2d.labels.shape
    flat2d = ad.reshape(refined_2d, (h * w, -1))
    anchors = _row_normalize(ad.take(flat2d, pix[:, 1] * w + pix[:, 0]))
    points = _row_normalize(ad.take(refined_3d, pos_idx))
    pos_sims = ad.summ(ad.mul(anchors, points), axis=1)
    if len(neg_rows):
        neg_anchor = ad.take(anchors, neg_rows)
        neg_points = _row_normalize(ad.take(refined_3d, neg_idx))
        neg_sims = ad.summ(ad.mul(neg_anchor, neg_points), axis=1)
    else:
        neg_sims = np.zeros(0)
    return circle_loss_terms(pos_sims, neg_sims, cfg)


def _loss_parts(mp, he, model: Model, scene: Scene,
                lambda1: float, cfg: CircleLossConfig,
                max_positives: int, negatives_per_positive: int, seed: int):
    res = refine_features(
        scene.rs2d, scene.rs3d, scene.k, mp, he, model.alpha, model.tau_2d
    )
    # negatives are mined against ground-truth adjacency (edge_weights=None)
    # so that the selected set cannot flip when parameters move slightly
    corr = circle_loss(
        res.refined_2d, res.refined_3d, scene, cfg,
        edge_weights=None,
        max_positives=max_positives,
        negatives_per_positive=negatives_per_positive,
        seed=seed,
    )
    edge = edge_loss(res.e_hat, scene.gt_edges)
    total = ad.add(corr, ad.mul(lambda1, edge))
    return total, corr, edge


def total_loss(model: Model, scene: Scene, lambda1: float = DEFAULT_LAMBDA1,
               cfg: CircleLossConfig = CircleLossConfig(),
               max_positives: int = DEFAULT_MAX_POSITIVES,
               negatives_per_positive: int = DEFAULT_NEGATIVES_PER_POSITIVE,
               seed: int = 0) -> LossBreakdown:
    """Full forward pass and the two-term loss on plain arrays."""
    total, corr, edge = _loss_parts(
        model.mp, model.he, model, scene, lambda1, cfg,
        max_positives, negatives_per_positive, seed,
    )
    return LossBreakdown(
        total=float(ad.val(total)),
        corr=float(ad.val(corr)),
        edge=float(ad.val(edge)),
        lambda1=float(lambda1),
    )


def gradients(model: Model, scene: Scene, lambda1: float = DEFAULT_LAMBDA1,
              cfg: CircleLossConfig = CircleLossConfig(),
              max_positives: int = DEFAULT_MAX_POSITIVES,
              negatives_per_positive: int = DEFAULT_NEGATIVES_PER_POSITIVE,
              seed: int = 0):
    """Reverse-mode gradient of the total loss for every learnable entry.

    Returns (grads dict, LossBreakdown); raises NonFiniteLoss when the
    forward value is not finite.
    """
    tracked = {name: ad.Var(value) for name, value in model.param_dict().items()}
    traced = model.with_params(tracked)
    total, corr, edge = _loss_parts(
        traced.mp, traced.he, model, scene, lambda1, cfg,
        max_positives, negatives_per_positive, seed,
    )
    value = float(ad.val(total))
    if not np.isfinite(value):
        raise NonFiniteLoss(f"loss evaluated to {value}")
    if isinstance(total, ad.Var):
        total.backward()
        grads = {
            name: (var.grad if var.grad is not None else np.zeros_like(var.value))
            for name, var in tracked.items()
        }
    else:
        grads = {name: np.zeros_like(var.value) for name, var in tracked.items()}
    breakdown = LossBreakdown(
        total=value, corr=float(ad.val(corr)), edge=float(ad.val(edge)),
        lambda1=float(lambda1),
    )
    return grads, breakdown


def train(model: Model, scenes, epochs: int, lr: float = DEFAULT_LEARNING_RATE,
          seed: int = 0, momentum: float = DEFAULT_MOMENTUM,
          lambda1: float = DEFAULT_LAMBDA1,
          cfg: CircleLossConfig = CircleLossConfig(),
          max_positives: int = DEFAULT_MAX_POSITIVES,
          negatives_per_positive: int = DEFAULT_NEGATIVES_PER_POSITIVE):
    """Plain SGD with momentum over shuffled scenes.

    Returns (trained model, loss trace of length epochs + 1; entry 0 is
    the pre-training mean loss). Deterministic under (model, scenes, seed).
    """
    scenes = list(scenes)
    if not scenes:
        raise ValueError("need at least one training scene")
    params = {k: np.array(v, dtype=float) for k, v in model.param_dict().items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    rng = np.random.default_rng(seed)

    def eval_mean(cur: Model) -> float:
        vals = [
            total_loss(cur, s, lambda1, cfg, max_positives,
                       negatives_per_positive, seed).total
            for s in scenes
        ]
        return float(np.mean(vals))

    current = model.with_params(params)
    trace = [eval_mean(current)]
    for _ in range(epochs):
        order = rng.permutation(len(scenes))
        epoch_losses = []
        for idx in order:
            grads, breakdown = gradients(
                current, scenes[idx], lambda1, cfg,
                max_positives, negatives_per_positive, seed,
            )
            epoch_losses.append(breakdown.total)
            for name in params:
                velocity[name] = momentum * velocity[name] + grads[name]
                params[name] = params[name] - lr * velocity[name]
            current = current.with_params(params)
        trace.append(float(np.mean(epoch_losses)))
    return current, trace
