"""Command-line surface: scene generation, training, registration, and
batch evaluation.

Every command is deterministic under fixed flags and seeds; wall-clock
timing goes to stderr so output files and stdout stay byte-identical.
Exit codes: 0 ok, 1 pipeline failure, 2 usage or IO trouble. The env var
HGI2P_THREADS caps eval parallelism (default 1).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .errors import HgI2PError, SceneParseError
from .geometry import pose_error
from .matchprune import PruneConfig
from .model import HARD_CAP, Model, load_model, save_model
from .pipeline import register_scene
from .sceneio import load_scene, save_scene
from .synthbench import (
    DEFAULT_TAU_IN,
    NOISE_PRESETS,
    RR_THRESHOLDS,
    SceneConfig,
    generate_scene,
    inlier_ratio,
)
from .training import DEFAULT_LAMBDA1, train

REPORT_COLUMNS = "scene,corr_count,kept_count,ir_pre,ir_post,rte,rre,status"

EXIT_OK = 0
EXIT_PIPELINE = 1
EXIT_USAGE = 2


def _pose_row_major(pose) -> list:
    return np.hstack([pose.rotation, pose.translation[:, None]]).reshape(-1).tolist()


def _parse_pair(text: str, name: str) -> tuple:
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"{name} wants MIN,MAX")
    return int(parts[0]), int(parts[1])


def cmd_gen(args) -> int:
    if args.noise_preset not in NOISE_PRESETS:
        print(f"unknown noise preset {args.noise_preset!r}", file=sys.stderr)
        return EXIT_USAGE
    cfg = SceneConfig(
        num_regions=args.regions,
        channels=args.channels,
        noise=NOISE_PRESETS[args.noise_preset],
    )
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"cannot create {out}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    names = []
    for i in range(args.num_scenes):
        scene = generate_scene(cfg, args.seed + i)
        name = f"scene_{i:04d}.json"
        try:
            save_scene(scene, out / name)
        except OSError as exc:
            print(f"cannot write {out / name}: {exc}", file=sys.stderr)
            return EXIT_USAGE
        names.append(name)
    manifest = {
        "config": {
            "channels": cfg.channels,
            "noise_preset": args.noise_preset,
            "num_scenes": args.num_scenes,
            "regions": list(args.regions),
            "seed": args.seed,
        },
        "scenes": names,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
    print(f"wrote {len(names)} scenes to {out}")
    return EXIT_OK


def _scene_files(directory: Path) -> list:
    manifest = directory / "manifest.json"
    if manifest.exists():
        with open(manifest, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        return [directory / name for name in doc["scenes"]]
    return sorted(p for p in directory.glob("*.json") if p.name != "manifest.json")


def cmd_train(args) -> int:
    directory = Path(args.scenes)
    files = _scene_files(directory)
    if not files:
        print(f"no scene files under {directory}", file=sys.stderr)
        return EXIT_USAGE
    try:
        scenes = [load_scene(p) for p in files]
    except SceneParseError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    m_max = max(s.rs2d.count for s in scenes)
    n_max = max(s.rs3d.count for s in scenes)
    if args.capacity is not None:
        m_max, n_max = args.capacity
    if m_max > HARD_CAP or n_max > HARD_CAP:
        print(f"scene region counts exceed the {HARD_CAP} cap", file=sys.stderr)
        return EXIT_USAGE
    channels = scenes[0].rs2d.channels
    model = Model.identity_init(m_max, n_max, channels, beta=args.beta)
    trained, trace = train(
        model, scenes, epochs=args.epochs, lr=args.lr,
        seed=args.seed, lambda1=args.lambda1,
    )
    try:
        save_model(trained, args.out)
        with open(str(args.out) + ".loss.csv", "w", encoding="utf-8") as fh:
            fh.write("epoch,mean_loss\n")
            for epoch, value in enumerate(trace):
                fh.write(f"{epoch},{value!r}\n")
    except OSError as exc:
        print(f"cannot write model: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(f"trained {args.epochs} epochs on {len(scenes)} scenes; "
          f"loss {trace[0]!r} -> {trace[-1]!r}")
    return EXIT_OK


def cmd_register(args) -> int:
    try:
        model = load_model(args.model)
        scene = load_scene(args.scene)
    except SceneParseError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    prune_cfg = PruneConfig(delta_rej=args.delta_rej, keep_fraction=args.keep_fraction)
    try:
        result = register_scene(
            scene, model, prune_cfg,
            no_prune=args.no_prune, use_gt_edges=args.gt_edges,
        )
    except HgI2PError as exc:
        print(f"pipeline failure: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    doc = {
        "correspondences": [
            {
                "flag": c.inlier_flag,
                "pixel": list(c.pixel),
                "point": list(c.point),
                "point_index": c.point_index,
                "score": c.score,
            }
            for c in result.corrs
        ],
        "final_pose": _pose_row_major(result.pose),
        "rre": result.error.rre,
        "rte": result.error.rte,
        "seed_pose": _pose_row_major(result.initial_pose),
    }
    try:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")
    except OSError as exc:
        print(f"cannot write {args.out}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    for name, seconds in result.timings.items():
        print(f"timing {name}: {seconds:.4f}s", file=sys.stderr)
    kept = sum(1 for c in result.corrs if c.inlier_flag != "pruned")
    print(f"{len(result.corrs)} correspondences ({kept} kept), "
          f"rte {result.error.rte!r} m, rre {result.error.rre!r} deg")
    return EXIT_OK


def _eval_one(path, scene, model, prune_cfg, tau_in):
    try:
        unpruned = register_scene(scene, model, prune_cfg, no_prune=True)
        pruned = register_scene(scene, model, prune_cfg, no_prune=False)
    except HgI2PError as exc:
        return {
            "scene": path.stem, "corr_count": 0, "kept_count": 0,
            "ir_pre": "", "ir_post": "", "rte": "", "rre": "",
            "status": f"error: {exc}",
        }
    kept = sum(1 for c in pruned.corrs if c.inlier_flag != "pruned")
    err = pose_error(pruned.pose, scene.gt_pose)
    return {
        "scene": path.stem,
        "corr_count": len(unpruned.corrs),
        "kept_count": kept,
        "ir_pre": inlier_ratio(unpruned.corrs, scene, tau_in),
        "ir_post": inlier_ratio(pruned.corrs, scene, tau_in),
        "rte": err.rte,
        "rre": err.rre,
        "status": "ok",
    }


def _svg_bar_chart(rows) -> str:
    """Pre/post inlier-ratio bars per scene; plain deterministic SVG."""
    ok = [r for r in rows if r["status"] == "ok"]
    bar_w, gap, h = 18, 14, 160
    width = 40 + len(ok) * (2 * bar_w + gap)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{h + 40}">',
        f'<text x="4" y="14" font-size="12">inlier ratio before (gray) and after (black) pruning</text>',
    ]
    x = 20
    for r in ok:
        for value, color in ((r["ir_pre"], "#999999"), (r["ir_post"], "#222222")):
            bh = int(round(h * float(value)))
            parts.append(
                f'<rect x="{x}" y="{20 + h - bh}" width="{bar_w}" height="{bh}" fill="{color}"/>'
            )
            x += bar_w
        parts.append(
            f'<text x="{x - 2 * bar_w}" y="{h + 34}" font-size="9">{r["scene"][-4:]}</text>'
        )
        x += gap
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_eval(args) -> int:
    try:
        model = load_model(args.model)
    except SceneParseError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    files = _scene_files(Path(args.scenes))
    if not files:
        print(f"no scene files under {args.scenes}", file=sys.stderr)
        return EXIT_USAGE
    thresholds = [float(t) for t in args.rr_threshold.split(",") if t]
    prune_cfg = PruneConfig(delta_rej=args.delta_rej, keep_fraction=args.keep_fraction)

    jobs = []
    for path in files:
        try:
            jobs.append((path, load_scene(path)))
        except SceneParseError as exc:
            jobs.append((path, exc))

    workers = max(1, int(os.environ.get("HGI2P_THREADS", "1")))

    def run(job):
        path, scene = job
        if isinstance(scene, SceneParseError):
            return {
                "scene": path.stem, "corr_count": 0, "kept_count": 0,
                "ir_pre": "", "ir_post": "", "rte": "", "rre": "",
                "status": f"error: {scene}",
            }
        return _eval_one(path, scene, model, prune_cfg, args.tau_in)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run, jobs))
    else:
        rows = [run(job) for job in jobs]
    rows.sort(key=lambda r: r["scene"])

    def cell(v):
        return repr(v) if isinstance(v, float) else str(v)

    try:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(REPORT_COLUMNS + "\n")
            for r in rows:
                status = r["status"].replace(",", ";").replace("\n", " ")
                fh.write(
                    f'{r["scene"]},{r["corr_count"]},{r["kept_count"]},'
                    f'{cell(r["ir_pre"])},{cell(r["ir_post"])},'
                    f'{cell(r["rte"])},{cell(r["rre"])},{status}\n'
                )
    except OSError as exc:
        print(f"cannot write {args.out}: {exc}", file=sys.stderr)
        return EXIT_USAGE

    ok = [r for r in rows if r["status"] == "ok"]
    print(f"scenes: {len(rows)} ({len(ok)} ok)")
    print(f"config: model={args.model} delta_rej={args.delta_rej} "
          f"keep_fraction={args.keep_fraction} tau_in={args.tau_in}")
    if ok:
        print(f"mean IR pre-prune:  {np.mean([r['ir_pre'] for r in ok])!r}")
        print(f"mean IR post-prune: {np.mean([r['ir_post'] for r in ok])!r}")
        print(f"mean RTE: {np.mean([r['rte'] for r in ok])!r} m")
        print(f"mean RRE: {np.mean([r['rre'] for r in ok])!r} deg")
    for tau in thresholds:
        hits = sum(1 for r in ok if r["rte"] <= tau)
        print(f"RR@{tau}: {hits / len(rows)!r}")
    if args.plot:
        try:
            with open(args.plot, "w", encoding="utf-8") as fh:
                fh.write(_svg_bar_chart(rows))
        except OSError as exc:
            print(f"cannot write {args.plot}: {exc}", file=sys.stderr)
            return EXIT_USAGE
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hgi2p",
        description="Region-graph image-to-point-cloud registration toolkit.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate synthetic scene files")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--num-scenes", type=int, default=8)
    gen.add_argument("--noise-preset", default="clean",
                     help=f"one of {sorted(NOISE_PRESETS)}")
    gen.add_argument("--regions", type=lambda s: _parse_pair(s, "--regions"),
                     default=(6, 10), help="MIN,MAX regions per scene")
    gen.add_argument("--channels", type=int, default=16)
    gen.add_argument("--out", required=True, help="output directory")
    gen.set_defaults(fn=cmd_gen)

    tr = sub.add_parser("train", help="train a model on scene files")
    tr.add_argument("--scenes", required=True)
    tr.add_argument("--epochs", type=int, default=50)
    tr.add_argument("--lr", type=float, default=1e-3)
    tr.add_argument("--lambda1", type=float, default=DEFAULT_LAMBDA1)
    tr.add_argument("--beta", type=float, default=0.1)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--capacity", type=lambda s: _parse_pair(s, "--capacity"),
                    default=None, help="M,N region capacity override")
    tr.add_argument("--out", required=True, help="model file path")
    tr.set_defaults(fn=cmd_train)

    reg = sub.add_parser("register", help="register one scene")
    reg.add_argument("--model", required=True)
    reg.add_argument("--scene", required=True)
    reg.add_argument("--no-prune", action="store_true",
                     help="skip correspondence pruning")
    reg.add_argument("--gt-edges", action="store_true",
                     help="use ground-truth edges instead of predictions")
    reg.add_argument("--delta-rej", type=float, default=15.0)
    reg.add_argument("--keep-fraction", type=float, default=0.85)
    reg.add_argument("--out", required=True, help="correspondence dump path")
    reg.set_defaults(fn=cmd_register)

    ev = sub.add_parser(
        "eval",
        help="evaluate a model over a scene directory",
        epilog=f"report CSV columns: {REPORT_COLUMNS}",
    )
    ev.add_argument("--model", required=True)
    ev.add_argument("--scenes", required=True)
    ev.add_argument("--rr-threshold", default=",".join(str(t) for t in RR_THRESHOLDS),
                    help="comma-separated RTE thresholds in meters")
    ev.add_argument("--tau-in", type=float, default=DEFAULT_TAU_IN)
    ev.add_argument("--delta-rej", type=float, default=15.0)
    ev.add_argument("--keep-fraction", type=float, default=0.85)
    ev.add_argument("--plot", default=None, help="optional SVG bar chart path")
    ev.add_argument("--out", required=True, help="report CSV path")
    ev.set_defaults(fn=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except HgI2PError as exc:
        print(f"pipeline failure: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
