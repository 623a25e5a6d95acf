"""Dataset-directory glue shared by the command line and the benchmarks."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from liftcore import io
from liftcore.core import DepthMap, Intrinsics, PointMap
from liftcore.depthcal import CalibrationResult, calibrate
from liftcore.matching import MatchGraph, PairObservation, RegisteredScene, build_match_graph, estimate_focal, register, relative_pose
from liftcore.trajectory import INPUT_FRAME, DirectoryFrameProvider, TrajectoryPlan, acquire_frames

log = logging.getLogger(__name__)


def _need(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"required file missing: {path}")
    return path


def load_plan(root) -> TrajectoryPlan:
    return TrajectoryPlan.from_dict(io.read_json(_need(Path(root) / "plan.json")))


def load_frames(root, plan: TrajectoryPlan | None = None) -> list:
    plan = plan or load_plan(root)
    return acquire_frames(plan, DirectoryFrameProvider(root))


def load_pointmap(root, frame_id: str) -> PointMap:
    root = Path(root)
    pts = io.read_pfm(_need(root / "pointmaps" / f"{frame_id}.pfm")).astype(np.float64)
    conf_path = root / "conf" / f"{frame_id}.pfm"
    conf = io.read_pfm(conf_path).astype(np.float64) if conf_path.exists() else np.ones(pts.shape[:2])
    return PointMap(pts, conf)


def load_pair(root, ref: str, src: str, src_pm: PointMap | None = None) -> PairObservation:
    root = Path(root)
    key = f"{ref}__{src}"
    pts = io.read_pfm(_need(root / "pairs" / f"{key}.pfm")).astype(np.float64)
    conf_path = root / "pairs" / f"{key}_conf.pfm"
    conf = io.read_pfm(conf_path).astype(np.float64) if conf_path.exists() else np.ones(pts.shape[:2])
    src_pm = src_pm or load_pointmap(root, src)
    return PairObservation(ref, src, src_pm, PointMap(pts, conf))


@dataclass
class MatchResult:
    graph: MatchGraph
    relative: dict  # edge key -> RelativePose
    intrinsics: Intrinsics
    pointmaps: dict
    observations: dict


def match_dataset(root, frames=None, extra_edges: int = 0) -> MatchResult:
    root = Path(root)
    frames = frames if frames is not None else load_frames(root)
    graph = build_match_graph(frames, extra_edges)
    pms = {f.frame_id: load_pointmap(root, f.frame_id) for f in frames}
    K = estimate_focal(pms[graph.root])
    obs, rel = {}, {}
    for e in graph.edges:
        obs[e.key] = load_pair(root, e.ref, e.src, pms[e.src])
        rel[e.key] = relative_pose(obs[e.key])
    return MatchResult(graph, rel, K, pms, obs)


def register_dataset(m: MatchResult, frames) -> RegisteredScene:
    images = {f.frame_id: f.image for f in frames}
    return register(m.graph, m.relative, m.pointmaps, m.intrinsics, images=images, observations=m.observations)


def calibrate_dataset(root, scene: RegisteredScene) -> tuple[dict, dict]:
    """Calibrated depth per frame plus the fitted scale/shift."""
    root = Path(root)
    out, fits = {}, {}
    for fid in scene.frame_ids:
        rel = DepthMap(io.read_pfm(_need(root / "depth_rel" / f"{fid}.pfm")).astype(np.float64), "relative")
        fit, cal = calibrate(scene.depths[fid], rel, scene.depth_masks[fid])
        out[fid] = cal
        fits[fid] = fit
    return out, fits


@dataclass
class Prepared:
    plan: TrajectoryPlan
    frames: list
    match: MatchResult
    scene: RegisteredScene
    priors: dict
    fits: dict


def prepare(root, extra_edges: int = 0) -> Prepared:
    """Run plan loading, matching, registration and depth calibration."""
    plan = load_plan(root)
    frames = load_frames(root, plan)
    m = match_dataset(root, frames, extra_edges)
    scene = register_dataset(m, frames)
    priors, fits = calibrate_dataset(root, scene)
    return Prepared(plan, frames, m, scene, priors, fits)


def calibration_table(fits: dict[str, CalibrationResult]) -> dict:
    return {k: {"scale": v.scale, "shift": v.shift, "valid_pixel_count": v.valid_pixel_count} for k, v in fits.items()}


__all__ = ["INPUT_FRAME", "MatchResult", "Prepared", "calibrate_dataset", "load_frames", "load_pair", "load_plan", "load_pointmap", "match_dataset", "prepare", "register_dataset"]
