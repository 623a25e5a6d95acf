"""Synthetic ablation benchmark: distortion-aware training against its variants.

Phase 1 (vanilla) is shared by every variant of a seed; each variant then
branches for phase 2 from identical Gaussians and optimizer moments.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from liftcore import io
from liftcore.core import Intrinsics
from liftcore.field import FieldConfig
from liftcore.pipeline import prepare
from liftcore.synth import DistortionSpec, default_scene, emit_dataset
from liftcore.train import TrainConfig, TrainData, clone_state, eval_test_view, init_gaussians, train_field, train_vanilla, with_one_axis_stamps
from liftcore.trajectory import plan_articulated

log = logging.getLogger(__name__)

VARIANTS = ("full", "vanilla", "no_distort", "one_axis")


@dataclass(frozen=True)
class BenchConfig:
    size: int = 128
    focal: float = 110.0
    l: int = 4
    D: int = 4
    step: float = 0.12
    amplitude: float = 0.04
    frequency: float = 1.0
    max_points: int = 6000
    vanilla_iters: int = 300
    field_iters: int = 600
    eval_steps: int = 0
    texture_freq: float = 20.0
    texture_amp: float = 0.25
    lr_field: float = 1e-2
    field_dtype: str = "float32"
    field_config: FieldConfig = FieldConfig()


def run_seed(seed: int, work_dir, bc: BenchConfig = BenchConfig(), variants=VARIANTS) -> dict:
    """Held-out PSNR/SSIM per variant for one seed."""
    work = Path(work_dir) / f"seed{seed}"
    K = Intrinsics(bc.focal, bc.size, bc.size)
    plan = plan_articulated(bc.l, bc.D, bc.step)
    scene = replace(default_scene(seed), texture_freq=bc.texture_freq, texture_amp=bc.texture_amp)
    emit_dataset(scene, plan, DistortionSpec("smooth-warp", bc.amplitude, bc.frequency, seed), work, K, seed)
    prep = prepare(work)
    scene = prep.scene
    cfg = TrainConfig(vanilla_iters=bc.vanilla_iters, field_iters=bc.field_iters, max_points=bc.max_points, seed=seed, lr_field=bc.lr_field, field_dtype=bc.field_dtype, field_config=bc.field_config, checkpoint_interval=0)
    data = TrainData(prep.frames, scene.poses, scene.intrinsics, prep.priors, scene.depth_masks)
    t0 = time.time()
    base = train_vanilla(data, init_gaussians(scene, cfg.max_points), cfg, scene.extent)
    log.info("seed %d phase 1 in %.1fs", seed, time.time() - t0)
    held = io.read_json(work / "heldout" / "poses.json")
    held_poses, _ = io.poses_from_json(held)
    targets = {name: io.read_png(work / "heldout" / f"{name}.png") for name in held_poses}
    one_axis = with_one_axis_stamps(prep.frames, prep.plan.one_axis_stamps())
    variant_cfg = {
        "full": (cfg, prep.frames),
        "vanilla": (replace(cfg, use_field=False), prep.frames),
        "no_distort": (replace(cfg, lambda_distort=0.0), prep.frames),
        "one_axis": (cfg, one_axis),
    }
    results = {}
    for name in variants:
        vcfg, frames = variant_cfg[name]
        t0 = time.time()
        st = clone_state(base, vcfg)
        st = train_field(st, replace(data, frames=frames), vcfg)
        g = st.gaussians()
        views = {}
        for view, pose in held_poses.items():
            r = eval_test_view(g, targets[view], pose, scene.intrinsics, steps=bc.eval_steps, extent=scene.extent)
            views[view] = {"psnr": r.psnr, "ssim": r.ssim}
        results[name] = {
            "psnr": float(np.mean([v["psnr"] for v in views.values()])),
            "ssim": float(np.mean([v["ssim"] for v in views.values()])),
            "views": views,
            "n_gaussians": len(g),
            "seconds": time.time() - t0,
        }
        log.info("seed %d %s: %.2f dB (%.1fs)", seed, name, results[name]["psnr"], results[name]["seconds"])
    return results


def run_ablation(work_dir, seeds=(0, 1, 2), bc: BenchConfig = BenchConfig(), variants=VARIANTS) -> dict:
    per_seed = {s: run_seed(s, work_dir, bc, variants) for s in seeds}
    mean = {v: float(np.mean([per_seed[s][v]["psnr"] for s in seeds])) for v in variants}
    return {"per_seed": per_seed, "mean_psnr": mean}
