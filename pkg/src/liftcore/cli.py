"""``liftcore`` command line: plan, synth, match, register, calibrate, train, render, eval.

Each failure exits with status 1 and one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("liftcore")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _threads():
    import torch

    from liftcore.core import thread_count

    n = thread_count()
    torch.set_num_threads(n)
    return n


def _emit(obj):
    print(json.dumps(obj, sort_keys=True))


def _config(args):
    from liftcore.config import default_config, load_config

    return load_config(args.config) if getattr(args, "config", None) else default_config()


# -- commands ----------------------------------------------------------------


def cmd_plan(args):
    from liftcore import io
    from liftcore.trajectory import plan_articulated

    cfg = _config(args).plan
    l = args.l if args.l is not None else cfg.l
    D = args.D if args.D is not None else cfg.D
    step = args.step if args.step is not None else cfg.step
    plan = plan_articulated(l, D, step, cfg.rot_step)
    io.write_json(args.out, plan.to_dict())
    _emit({"plan": str(args.out), "frames": len(plan.frames), "clips": len(plan.clips)})


def cmd_synth(args):
    from liftcore import io
    from liftcore.core import Intrinsics
    from liftcore.synth import DistortionSpec, default_scene, emit_dataset
    from liftcore.trajectory import TrajectoryPlan, plan_articulated

    if args.plan:
        plan = TrajectoryPlan.from_dict(io.read_json(args.plan))
    else:
        plan = plan_articulated(args.l, args.D, args.step)
    focal = args.focal if args.focal is not None else 0.9 * args.size
    K = Intrinsics(focal, args.size, args.size)
    spec = DistortionSpec(args.distortion, args.amplitude, args.frequency, args.seed)
    m = emit_dataset(default_scene(args.seed), plan, spec, args.out, K, args.seed)
    _emit({"dataset": str(args.out), "frames": len(m["frames"]), "heldout": len(m["heldout"])})


def cmd_match(args):
    from liftcore import io
    from liftcore.pipeline import match_dataset

    extra = args.extra_edges if args.extra_edges is not None else _config(args).matching.extra_edges
    m = match_dataset(args.data, extra_edges=extra)
    out = {
        "focal": m.intrinsics.focal,
        "width": m.intrinsics.width,
        "height": m.intrinsics.height,
        "graph": m.graph.to_dict(),
        "edges": {k: r.to_dict() for k, r in m.relative.items()},
    }
    io.write_json(args.out, out)
    _emit({"matches": str(args.out), "edges": len(m.relative), "focal": m.intrinsics.focal})


def cmd_register(args):
    from liftcore import io
    from liftcore.core import Intrinsics
    from liftcore.matching import MatchGraph, RelativePose, register
    from liftcore.pipeline import load_frames, load_pair, load_pointmap

    cfg = _config(args).matching
    raw = io.read_json(args.matches)
    graph = MatchGraph.from_dict(raw["graph"])
    rel = {k: RelativePose.from_dict(v) for k, v in raw["edges"].items()}
    K = Intrinsics(raw["focal"], raw["width"], raw["height"])
    frames = load_frames(args.data)
    pms = {f.frame_id: load_pointmap(args.data, f.frame_id) for f in frames}
    obs = {e.key: load_pair(args.data, e.ref, e.src, pms[e.src]) for e in graph.extra_edges} if graph.extra_edges else None
    if obs:
        obs.update({e.key: load_pair(args.data, e.ref, e.src, pms[e.src]) for e in graph.tree_edges})
    scene = register(graph, rel, pms, K, {f.frame_id: f.image for f in frames}, obs, cfg.refine_iters)
    out = Path(args.out)
    doc = io.poses_to_json(scene.poses, K.focal, K.width, K.height)
    doc["scales"] = {k: float(v) for k, v in scene.scales.items()}
    io.write_json(out / "poses.json", doc)
    io.write_points_ply(out / "points.ply", scene.points, scene.colors, scene.confidence, scene.source)
    for fid, d in scene.depths.items():
        io.write_pfm(out / "depth" / f"{fid}.pfm", d.data)
    _emit({"registered": str(out), "frames": len(scene.poses), "points": int(len(scene.points))})


def _load_scene(data, reg):
    from liftcore import io
    from liftcore.core import Intrinsics
    from liftcore.matching import assemble_scene
    from liftcore.pipeline import load_frames, load_pointmap

    doc = io.read_json(Path(reg) / "poses.json")
    poses, focal = io.poses_from_json(doc)
    K = Intrinsics(focal, doc["width"], doc["height"])
    frames = load_frames(data)
    pms = {f.frame_id: load_pointmap(data, f.frame_id) for f in frames}
    missing = [f.frame_id for f in frames if f.frame_id not in poses]
    if missing:
        raise ValueError(f"registration lacks poses for {len(missing)} frames (first: {missing[0]})")
    scene = assemble_scene([f.frame_id for f in frames], poses, doc["scales"], pms, K, {f.frame_id: f.image for f in frames})
    return frames, scene


def cmd_calibrate(args):
    from liftcore import io
    from liftcore.pipeline import calibrate_dataset, calibration_table

    _, scene = _load_scene(args.data, args.registered)
    priors, fits = calibrate_dataset(args.data, scene)
    out = Path(args.out)
    for fid, d in priors.items():
        io.write_pfm(out / f"{fid}.pfm", d.data)
    io.write_json(out / "calibration.json", calibration_table(fits))
    _emit({"calibrated": str(out), "frames": len(priors)})


def cmd_train(args):
    from liftcore import io
    from liftcore.core import DepthMap
    from liftcore.field import save_field
    from liftcore.train import train

    cfg = _config(args).train_config(
        seed=args.seed, vanilla_iters=args.vanilla_iters, field_iters=args.field_iters, max_points=args.max_points
    )
    frames, scene = _load_scene(args.data, args.registered)
    priors = {}
    if args.calibrated:
        for f in frames:
            p = Path(args.calibrated) / f"{f.frame_id}.pfm"
            if p.exists():
                priors[f.frame_id] = DepthMap(io.read_pfm(p).astype(np.float64), "calibrated")
    out = Path(args.out)
    g, fld, state = train(frames, scene, priors, cfg, out_dir=out)
    io.write_gaussians_ply(out / "gaussians.ply", g)
    if fld is not None:
        save_field(out / "field.bin", fld)
    io.write_json(out / "train_config.json", cfg.to_dict())
    last = state.history[-1] if state.history else {}
    _emit({"model": str(out / "gaussians.ply"), "gaussians": len(g), "iterations": state.iteration, "final_loss": last.get("total")})


def _render_poses(args):
    from liftcore import io
    from liftcore.core import Intrinsics, Pose

    if args.poses:
        doc = io.read_json(args.poses)
        poses, focal = io.poses_from_json(doc)
        width = args.width or doc.get("width")
        height = args.height or doc.get("height")
    else:
        poses, focal = {}, None
        width, height = args.width, args.height
    if args.pose:
        if args.pose == "identity":
            poses["identity"] = Pose.identity()
        else:
            vals = [float(v) for v in args.pose.split(",")]
            if len(vals) != 16:
                raise UsageError("--pose takes 'identity' or 16 comma-separated row-major values")
            poses["pose"] = Pose.from_matrix(np.array(vals).reshape(4, 4))
    if not poses:
        raise UsageError("no poses given (use --poses or --pose)")
    focal = args.focal if args.focal is not None else focal
    width = width or 64
    height = height or 64
    focal = focal if focal is not None else 0.9 * width
    return poses, Intrinsics(focal, int(width), int(height))


def cmd_render(args):
    from liftcore import io
    from liftcore.core import FrameStamp
    from liftcore.field import deform, load_field
    from liftcore.splat import render

    g = io.read_gaussians_ply(args.model)
    poses, K = _render_poses(args)
    if args.field and len(g):
        g, _ = deform(g, FrameStamp(*args.stamp), load_field(args.field))
    out = Path(args.out)
    for name, pose in poses.items():
        io.write_png(out / f"{name}.png", render(g, pose, K, background=tuple(args.background)).image())
    _emit({"rendered": str(out), "views": len(poses)})


def cmd_eval(args):
    from liftcore import io
    from liftcore.train import eval_test_view

    g = io.read_gaussians_ply(args.model)
    if len(g) == 0:
        raise ValueError("cannot evaluate an empty model")
    root = Path(args.data) / "heldout" if args.data else Path(args.images)
    doc = io.read_json(args.poses or root / "poses.json")
    poses, focal = io.poses_from_json(doc)
    from liftcore.core import Intrinsics

    extent = float(np.linalg.norm(g.centers.max(0) - g.centers.min(0)))
    views = {}
    for name, pose in poses.items():
        img = io.read_png(root / f"{name}.png")
        K = Intrinsics(focal, img.width, img.height)
        r = eval_test_view(g, img, pose, K, steps=args.steps, extent=extent, background=tuple(args.background))
        views[name] = {"psnr": r.psnr, "ssim": r.ssim, "pose": r.pose.matrix().tolist(), "diverged": r.diverged}
    res = {
        "views": views,
        "mean": {
            "psnr": float(np.mean([v["psnr"] for v in views.values()])),
            "ssim": float(np.mean([v["ssim"] for v in views.values()])),
        },
    }
    io.write_json(args.out, res)
    _emit({"metrics": str(args.out), **res["mean"]})


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="liftcore", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("plan", help="articulated trajectory plan")
    s.add_argument("--l", type=int)
    s.add_argument("--D", type=int)
    s.add_argument("--step", type=float)
    s.add_argument("--config")
    s.add_argument("--out", default="plan.json")
    s.set_defaults(fn=cmd_plan)

    s = sub.add_parser("synth", help="synthetic dataset with exact ground truth")
    s.add_argument("--out", required=True)
    s.add_argument("--plan")
    s.add_argument("--l", type=int, default=4)
    s.add_argument("--D", type=int, default=4)
    s.add_argument("--step", type=float, default=0.1)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--focal", type=float)
    s.add_argument("--distortion", choices=("none", "smooth-warp"), default="smooth-warp")
    s.add_argument("--amplitude", type=float, default=0.02)
    s.add_argument("--frequency", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("match", help="focal and per-edge relative poses")
    s.add_argument("--data", required=True)
    s.add_argument("--extra-edges", type=int)
    s.add_argument("--config")
    s.add_argument("--out", default="matches.json")
    s.set_defaults(fn=cmd_match)

    s = sub.add_parser("register", help="chain poses and merge point clouds")
    s.add_argument("--data", required=True)
    s.add_argument("--matches", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_register)

    s = sub.add_parser("calibrate", help="affine-calibrate relative depth")
    s.add_argument("--data", required=True)
    s.add_argument("--registered", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_calibrate)

    s = sub.add_parser("train", help="optimize Gaussians and the distortion field")
    s.add_argument("--data", required=True)
    s.add_argument("--registered", required=True)
    s.add_argument("--calibrated")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--vanilla-iters", type=int)
    s.add_argument("--field-iters", type=int)
    s.add_argument("--max-points", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train)

    for name, fn, help_ in (("render", cmd_render, "render PNGs at poses"), ("eval", cmd_eval, "test-pose optimization and metrics")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--model", required=True)
        s.add_argument("--poses")
        s.add_argument("--background", type=float, nargs=3, default=(0.0, 0.0, 0.0))
        s.add_argument("--out", required=True)
        s.set_defaults(fn=fn)
        if name == "render":
            s.add_argument("--pose")
            s.add_argument("--focal", type=float)
            s.add_argument("--width", type=int)
            s.add_argument("--height", type=int)
            s.add_argument("--field")
            s.add_argument("--stamp", type=float, nargs=2, default=(0.0, 0.0))
        else:
            src = s.add_mutually_exclusive_group(required=True)
            src.add_argument("--data")
            src.add_argument("--images")
            s.add_argument("--steps", type=int, default=500)
            s.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None) -> int:
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
        _threads()
        args.fn(args)
        return 0
    except Exception as e:  # noqa: BLE001
        err = {"error": type(e).__name__, "message": " ".join(str(e).split()), "command": command}
        sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
