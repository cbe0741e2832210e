"""Scene file format: UTF-8 JSON with run-length-encoded region masks.

Keys: intrinsics, gt_pose (row-major 3x4), points (flat), point_labels,
point_features (flat), mask_rle (per 2D region, row-major start/length
pairs), pixel_features (flat, labeled pixels in scan order; optional),
gt_pairs, seed. Floats rely on repr round-tripping, so serialize ->
parse -> serialize is byte-identical.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import SceneParseError
from .geometry import Intrinsics, Pose
from .hetgraph import build_gt_heterogeneous_edges
from .regions import RegionSet2D, RegionSet3D
from .synthbench import Scene


def mask_to_rle(labels: np.ndarray, region: int) -> list:
    """Row-major [start, length, ...] runs of one region's mask."""
    flat = (labels.reshape(-1) == region).astype(np.int8)
    if not flat.any():
        return []
    padded = np.concatenate([[0], flat, [0]])
    edges = np.flatnonzero(np.diff(padded))
    starts = edges[0::2]
    ends = edges[1::2]
    out = []
    for s, e in zip(starts, ends):
        out.extend([int(s), int(e - s)])
    return out


def rle_to_indices(rle: list) -> np.ndarray:
    """Flat pixel indices covered by the run-length pairs."""
    idx = []
    for s, n in zip(rle[0::2], rle[1::2]):
        idx.extend(range(s, s + n))
    return np.asarray(idx, dtype=int)


def scene_to_json(scene: Scene) -> str:
    rs2d, rs3d = scene.rs2d, scene.rs3d
    labeled = rs2d.labels.reshape(-1) >= 0
    pixel_features = rs2d.features.reshape(-1, rs2d.channels)[labeled]
    doc = {
        "intrinsics": {
            "fx": scene.k.fx, "fy": scene.k.fy,
            "cx": scene.k.cx, "cy": scene.k.cy,
            "width": scene.k.width, "height": scene.k.height,
        },
        "gt_pose": np.hstack(
            [scene.gt_pose.rotation, scene.gt_pose.translation[:, None]]
        ).reshape(-1).tolist(),
        "points": rs3d.points.reshape(-1).tolist(),
        "point_labels": rs3d.labels.astype(int).tolist(),
        "point_features": rs3d.features.reshape(-1).tolist(),
        "mask_rle": [mask_to_rle(rs2d.labels, i) for i in range(rs2d.count)],
        "pixel_features": pixel_features.reshape(-1).tolist(),
        "gt_pairs": [[int(u), int(v), int(p)] for u, v, p in scene.gt_pairs],
        "seed": int(scene.seed),
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def save_scene(scene: Scene, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(scene_to_json(scene))
        fh.write("\n")


def _derive_pixel_features(labels2d, rs3d_points, point_features, gt_pairs, channels):
    """Fallback when pixel_features is absent: each region's signature is
    the mean feature of its GT-paired points, copied to every pixel."""
    count = int(labels2d.max()) + 1 if labels2d.size and labels2d.max() >= 0 else 0
    sums = np.zeros((count, channels))
    hits = np.zeros(count)
    for u, v, pi in gt_pairs:
        r = labels2d[v, u]
        if r >= 0:
            sums[r] += point_features[pi]
            hits[r] += 1
    sig = sums / np.maximum(hits, 1.0)[:, None]
    feats = np.zeros(labels2d.shape + (channels,))
    pos = labels2d >= 0
    feats[pos] = sig[labels2d[pos]]
    return feats


def scene_from_json(text: str, path="<string>") -> Scene:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneParseError(f"{path}: invalid JSON at byte {exc.pos}: {exc.msg}") from exc
    try:
        ki = doc["intrinsics"]
        k = Intrinsics(
            fx=float(ki["fx"]), fy=float(ki["fy"]),
            cx=float(ki["cx"]), cy=float(ki["cy"]),
            width=int(ki["width"]), height=int(ki["height"]),
        )
        mat = np.asarray(doc["gt_pose"], dtype=float).reshape(3, 4)
        pose = Pose(mat[:, :3], mat[:, 3])
        points = np.asarray(doc["points"], dtype=float).reshape(-1, 3)
        point_labels = np.asarray(doc["point_labels"], dtype=int)
        point_features = np.asarray(doc["point_features"], dtype=float).reshape(len(points), -1)
        channels = point_features.shape[1]

        labels2d = np.full((k.height, k.width), -1, dtype=int)
        for region, rle in enumerate(doc["mask_rle"]):
            idx = rle_to_indices(rle)
            labels2d.reshape(-1)[idx] = region

        gt_pairs = tuple((int(u), int(v), int(p)) for u, v, p in doc["gt_pairs"])

        if doc.get("pixel_features") is not None:
            flat = np.asarray(doc["pixel_features"], dtype=float).reshape(-1, channels)
            labeled = labels2d.reshape(-1) >= 0
            if flat.shape[0] != int(labeled.sum()):
                raise ValueError(
                    f"pixel_features rows {flat.shape[0]} do not match "
                    f"{int(labeled.sum())} labeled pixels"
                )
            feats2d = np.zeros((k.height * k.width, channels))
            feats2d[labeled] = flat
            feats2d = feats2d.reshape(k.height, k.width, channels)
        else:
            feats2d = _derive_pixel_features(
                labels2d, points, point_features, gt_pairs, channels
            )

        rs2d = RegionSet2D(labels=labels2d, features=feats2d)
        rs3d = RegionSet3D(points=points, labels=point_labels, features=point_features)
        gt_edges = build_gt_heterogeneous_edges(rs2d, rs3d, pose, k)
        return Scene(
            rs2d=rs2d, rs3d=rs3d, k=k, gt_pose=pose,
            gt_pairs=gt_pairs, gt_edges=gt_edges, seed=int(doc["seed"]),
        )
    except SceneParseError:
        raise
    except Exception as exc:
        raise SceneParseError(f"{path}: malformed scene: {exc}") from exc


def load_scene(path) -> Scene:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise SceneParseError(f"cannot read scene file {path}: {exc}") from exc
    return scene_from_json(text, path=path)
