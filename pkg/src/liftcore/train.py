"""Two-phase optimization of canonical Gaussians and the distortion field,
plus frozen-model evaluation by test-pose optimization."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from dataclasses import field as dc_field
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import cKDTree

from liftcore.core import DepthMap, GaussianCloud, Image, Intrinsics, Pose, make_rng, rgb_to_sh
from liftcore.field import DistortionField, FieldConfig, save_field
from liftcore.matching import RegisteredScene
from liftcore.metrics import PSNR_CAP, psnr, ssim_map
from liftcore.splat import RenderOutput, rasterize, sh_to_color
from liftcore._torch import from_array, so3_exp
from liftcore.trajectory import FrameRecord

log = logging.getLogger(__name__)

ORIGIN = (0.0, 0.0)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass(frozen=True)
class TrainConfig:
    vanilla_iters: int = 3000
    field_iters: int = 14000
    lambda_rgb: float = 0.8
    lambda_ssim: float = 0.2
    lambda_depth: float = 0.05
    lambda_tv: float = 1e-4
    lambda_distort: float = 1.0
    lr_position: float = 1.6e-4  # multiplied by scene extent
    lr_opacity: float = 0.05
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_color: float = 2.5e-3
    lr_field: float = 1.6e-3
    field_lr_decay: float = 0.1  # final / initial over phase 2
    prune_interval: int = 500
    prune_threshold: float = 0.005
    distort_batch: int = 4096
    field_dtype: str = "float64"  # float32 roughly halves field cost
    use_field: bool = True
    max_points: int = 100_000
    checkpoint_interval: int = 1000
    background: tuple = (0.0, 0.0, 0.0)
    seed: int = 0
    field_config: FieldConfig = dc_field(default_factory=FieldConfig)

    def __post_init__(self):
        for k, v in asdict(self).items():
            if k.startswith(("lambda_", "lr_")) and (v < 0 or not math.isfinite(v)):
                raise ValueError(f"{k} must be a finite non-negative number, got {v}")
        if self.vanilla_iters < 0 or self.field_iters < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.prune_interval <= 0 or self.distort_batch <= 0:
            raise ValueError("prune_interval and distort_batch must be positive")
        if self.field_dtype not in ("float32", "float64"):
            raise ValueError(f"field_dtype must be float32 or float64, got {self.field_dtype!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["background"] = list(self.background)
        d["field_config"]["levels"] = list(self.field_config.levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        fc = d.pop("field_config", None)
        if fc is not None:
            fc = dict(fc)
            if "levels" in fc:
                fc["levels"] = tuple(fc["levels"])
            d["field_config"] = FieldConfig(**fc)
        if "background" in d:
            d["background"] = tuple(d["background"])
        return cls(**d)


# -- initialization ----------------------------------------------------------


def _voxel_groups(points: np.ndarray, size: float):
    key = np.floor((points - points.min(0)) / size).astype(np.int64)
    dims = key.max(0) + 1
    if float(dims[0]) * float(dims[1]) * float(dims[2]) < 2**62:
        flat = (key[:, 0] * dims[1] + key[:, 1]) * dims[2] + key[:, 2]
        _, inv = np.unique(flat, return_inverse=True)
    else:
        _, inv = np.unique(key, axis=0, return_inverse=True)
    return inv.reshape(-1)


def init_gaussians(scene: RegisteredScene, max_points: int = 100_000) -> GaussianCloud:
    pts = np.asarray(scene.points, dtype=np.float64)
    if len(pts) == 0:
        raise ValueError("cannot initialize Gaussians from an empty scene")
    if max_points < 1:
        raise ValueError("max_points must be positive")
    span = float(np.max(pts.max(0) - pts.min(0)))
    span = span if span > 0 else 1.0
    # smallest voxel merges only coincident points; grow until under budget
    size = span * 1e-9
    inv = _voxel_groups(pts, size)
    if inv.max() + 1 > max_points:
        lo, hi = size, span * 2
        for _ in range(60):
            mid = math.sqrt(lo * hi)
            if _voxel_groups(pts, mid).max() + 1 > max_points:
                lo = mid
            else:
                hi = mid
            if hi / lo < 1.01:
                break
        inv = _voxel_groups(pts, hi)
    n = int(inv.max()) + 1
    counts = np.bincount(inv, minlength=n).astype(np.float64)
    centers = np.stack([np.bincount(inv, pts[:, k], n) for k in range(3)], 1) / counts[:, None]
    cols = np.asarray(scene.colors, dtype=np.float64)
    rgb = np.stack([np.bincount(inv, cols[:, k], n) for k in range(3)], 1) / counts[:, None]
    # restore exact inputs for singleton voxels
    single = counts == 1
    first = np.full(n, -1)
    first[inv[::-1]] = np.arange(len(pts))[::-1]
    centers[single] = pts[first[single]]
    if n > 1:
        k = min(4, n)
        dist, _ = cKDTree(centers).query(centers, k=k)
        nn = dist[:, 1:].mean(1)
        nn = np.where(nn > 0, nn, span * 1e-3)
    else:
        nn = np.array([span * 1e-2])
    scales = np.repeat(nn[:, None], 3, 1)
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    return GaussianCloud(centers, scales, rot, np.full(n, 0.1), rgb_to_sh(np.clip(rgb, 0, 1)))


# -- loss --------------------------------------------------------------------


def _as_tensor(x, dtype=torch.float64):
    if torch.is_tensor(x):
        return x
    if isinstance(x, (Image, DepthMap)):
        x = x.data
    return from_array(np.asarray(x), dtype=dtype)


def loss_terms(
    color: torch.Tensor,
    depth: torch.Tensor,
    target: torch.Tensor,
    prior: torch.Tensor | None,
    prior_mask: torch.Tensor | None,
    cfg: TrainConfig,
    field: DistortionField | None = None,
    origin_offsets=None,
) -> dict:
    """Weighted loss terms and their sum under ``"total"``.

    ``origin_offsets`` are the field outputs ``(dX, dr, ds)`` at stamp (0, 0).
    """
    zero = color.sum() * 0.0
    terms = {"rgb": (color - target).abs().mean()}
    terms["ssim"] = 1.0 - ssim_map(color, target).mean()
    if prior is not None and cfg.lambda_depth > 0:
        m = prior_mask if prior_mask is not None else torch.isfinite(prior)
        terms["depth"] = (depth[m] - prior[m]).abs().mean() if bool(m.any()) else zero
    else:
        terms["depth"] = zero
    terms["tv"] = field.encoder.tv() if field is not None else zero
    if origin_offsets is not None:
        terms["distort"] = sum(o.abs().mean() for o in origin_offsets)
    else:
        terms["distort"] = zero
    w = {"rgb": cfg.lambda_rgb, "ssim": cfg.lambda_ssim, "depth": cfg.lambda_depth, "tv": cfg.lambda_tv, "distort": cfg.lambda_distort}
    terms["total"] = sum(w[k] * terms[k] for k in w)
    return terms


def loss(render: RenderOutput, target, depth_prior=None, deform=None, field=None, cfg: TrainConfig | None = None, mask=None) -> dict:
    """Loss stack for one rendered frame.

    ``target`` is a FrameRecord or Image; ``deform`` is a Deformation (or
    tensor triple) evaluated at stamp (0, 0).
    """
    cfg = cfg or TrainConfig()
    img = target.image if isinstance(target, FrameRecord) else target
    dt = render.color.dtype
    tgt = _as_tensor(img, dt)
    prior = None if depth_prior is None else _as_tensor(depth_prior, dt)
    m = None
    if prior is not None:
        m = torch.isfinite(prior) & (prior > 0)
        if mask is not None:
            m &= torch.as_tensor(np.asarray(mask), dtype=torch.bool)
    offsets = None
    if deform is not None:
        offsets = (deform.dX, deform.dr, deform.ds) if hasattr(deform, "dX") else deform
        offsets = tuple(_as_tensor(o, dt) for o in offsets)
    return loss_terms(render.color, render.depth, tgt, prior, m, cfg, field, offsets)


# -- state -------------------------------------------------------------------


_GROUPS = ("means", "log_scales", "quats", "opacity_logits", "colors")


@dataclass
class TrainState:
    params: dict  # name -> leaf tensor
    optimizer: torch.optim.Optimizer
    field: DistortionField | None = None
    field_optimizer: torch.optim.Optimizer | None = None
    iteration: int = 0
    history: list = dc_field(default_factory=list)
    extent: float = 1.0

    def gaussians(self) -> GaussianCloud:
        with torch.no_grad():
            p = self.params
            q = p["quats"] / p["quats"].norm(dim=1, keepdim=True)
            op = torch.sigmoid(p["opacity_logits"]).clamp(1e-7, 1 - 1e-7)
            return GaussianCloud(
                p["means"].numpy().copy(),
                torch.exp(p["log_scales"]).numpy().copy(),
                q.numpy().copy(),
                op.numpy().copy(),
                p["colors"].numpy().copy(),
            )


def _make_optimizer(params: dict, cfg: TrainConfig, extent: float) -> torch.optim.Optimizer:
    lrs = {
        "means": cfg.lr_position * extent,
        "log_scales": cfg.lr_scale,
        "quats": cfg.lr_rotation,
        "opacity_logits": cfg.lr_opacity,
        "colors": cfg.lr_color,
    }
    return torch.optim.Adam([{"params": [params[k]], "lr": lrs[k], "name": k} for k in _GROUPS], eps=1e-15)


def new_state(g: GaussianCloud, cfg: TrainConfig, extent: float) -> TrainState:
    t = lambda a: torch.tensor(np.asarray(a), dtype=torch.float64, requires_grad=True)  # noqa: E731
    op = np.clip(g.opacities, 1e-7, 1 - 1e-7)
    params = {
        "means": t(g.centers),
        "log_scales": t(np.log(g.scales)),
        "quats": t(g.rotations),
        "opacity_logits": t(np.log(op / (1 - op))),
        "colors": t(g.colors),
    }
    return TrainState(params, _make_optimizer(params, cfg, extent), extent=extent)


def prune(state: TrainState, cfg: TrainConfig) -> int:
    """Drop Gaussians below the opacity threshold, keeping optimizer moments of survivors."""
    with torch.no_grad():
        keep = torch.sigmoid(state.params["opacity_logits"]) >= cfg.prune_threshold
    removed = int((~keep).sum())
    if removed == 0 or bool(keep.sum() == 0):
        return 0
    old = state.optimizer
    new_params = {k: v.detach()[keep].clone().requires_grad_(True) for k, v in state.params.items()}
    opt = torch.optim.Adam([{**{k: v for k, v in grp.items() if k != "params"}, "params": [new_params[grp["name"]]]} for grp in old.param_groups])
    for grp in old.param_groups:
        p_old = grp["params"][0]
        st = old.state.get(p_old)
        if st:
            opt.state[new_params[grp["name"]]] = {
                "step": st["step"].clone(),
                "exp_avg": st["exp_avg"][keep].clone(),
                "exp_avg_sq": st["exp_avg_sq"][keep].clone(),
            }
    state.params = new_params
    state.optimizer = opt
    return removed


# -- training loop -----------------------------------------------------------


@dataclass
class TrainData:
    frames: list  # FrameRecord
    poses: dict  # frame_id -> Pose
    K: Intrinsics
    priors: dict  # frame_id -> DepthMap
    masks: dict  # frame_id -> bool array

    def tensors(self):
        out = []
        for f in self.frames:
            pose = self.poses[f.frame_id]
            prior = self.priors.get(f.frame_id)
            pt = pm = None
            if prior is not None:
                pt = from_array(prior.data, dtype=torch.float64)
                m = np.isfinite(prior.data) & (prior.data > 0)
                if f.frame_id in self.masks:
                    m &= np.asarray(self.masks[f.frame_id], dtype=bool)
                pm = torch.as_tensor(m)
            out.append(
                (
                    f,
                    from_array(pose.rotation),
                    from_array(pose.translation),
                    from_array(f.image.data, dtype=torch.float64),
                    pt,
                    pm,
                )
            )
        return out


def _render_params(state: TrainState, rot, t, K: Intrinsics, background, stamp=None):
    p = state.params
    means, quats, scales = p["means"], p["quats"], torch.exp(p["log_scales"])
    if stamp is not None and state.field is not None:
        means, quats, scales, _ = state.field.apply(means, quats, scales, stamp)
    color, depth, alpha = rasterize(
        means, quats, scales, torch.sigmoid(p["opacity_logits"]), sh_to_color(p["colors"]), rot, t, K.focal, K.width, K.height, background
    )
    return color, depth, alpha


def _log_line(fh, rec):
    if fh is not None:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.flush()


def _checkpoint(state: TrainState, out_dir: Path | None):
    if out_dir is None:
        return
    from liftcore.io import write_gaussians_ply

    ck = out_dir / "checkpoints"
    ck.mkdir(parents=True, exist_ok=True)
    write_gaussians_ply(ck / f"gaussians_{state.iteration:06d}.ply", state.gaussians())
    if state.field is not None:
        save_field(ck / f"field_{state.iteration:06d}.bin", state.field)


def _run(state: TrainState, data: TrainData, cfg: TrainConfig, n_iters: int, phase: int, rng, out_dir, metrics_fh):
    frames = data.tensors()
    bg = torch.as_tensor(cfg.background, dtype=torch.float64)
    order: list = []
    start = state.iteration
    for k in range(n_iters):
        if not order:
            order = list(rng.permutation(len(frames)))
        idx = order.pop()
        f, rot, t, target, prior, pmask = frames[idx]
        stamp = f.stamp.as_tuple() if phase == 2 else None
        if phase == 2 and state.field_optimizer is not None:
            frac = k / max(n_iters - 1, 1)
            for grp in state.field_optimizer.param_groups:
                grp["lr"] = cfg.lr_field * cfg.field_lr_decay**frac
        color, depth, _ = _render_params(state, rot, t, data.K, bg, stamp)
        offsets = None
        if phase == 2 and state.field is not None and cfg.lambda_distort > 0:
            n = len(state.params["means"])
            sel = rng.choice(n, min(cfg.distort_batch, n), replace=False) if n > cfg.distort_batch else np.arange(n)
            sel_t = torch.as_tensor(np.sort(sel))
            offsets = state.field(state.params["means"][sel_t].detach(), ORIGIN)
        terms = loss_terms(color, depth, target, prior, pmask, cfg, state.field if phase == 2 else None, offsets)
        total = terms["total"]
        if not torch.isfinite(total):
            snap = {
                "iteration": state.iteration,
                "phase": phase,
                "frame_id": f.frame_id,
                "terms": {k2: float(v.detach()) for k2, v in terms.items()},
                "n_gaussians": len(state.params["means"]),
                "nonfinite_params": {k2: int((~torch.isfinite(v)).sum()) for k2, v in state.params.items()},
            }
            if out_dir is not None:
                (out_dir / "diverged.json").write_text(json.dumps(snap, indent=2))
            raise TrainingDiverged(f"non-finite loss at iteration {state.iteration} (frame {f.frame_id})", snap)
        state.optimizer.zero_grad(set_to_none=True)
        if state.field_optimizer is not None and phase == 2:
            state.field_optimizer.zero_grad(set_to_none=True)
        total.backward()
        state.optimizer.step()
        if state.field_optimizer is not None and phase == 2:
            state.field_optimizer.step()
        state.iteration += 1
        rec = {"iteration": state.iteration, "phase": phase, "frame_id": f.frame_id}
        rec.update({k2: float(v.detach()) for k2, v in terms.items()})
        rec["psnr"] = psnr(color.detach(), target)
        state.history.append(rec)
        _log_line(metrics_fh, rec)
        if state.iteration % cfg.prune_interval == 0:
            removed = prune(state, cfg)
            if removed:
                log.info("iteration %d: pruned %d Gaussians", state.iteration, removed)
        if cfg.checkpoint_interval and state.iteration % cfg.checkpoint_interval == 0:
            _checkpoint(state, out_dir)
    log.info("phase %d: %d iterations from %d", phase, n_iters, start)
    return state


def _seed_all(seed: int):
    torch.manual_seed(int(seed))
    return make_rng(seed)


def train_vanilla(data: TrainData, init: GaussianCloud, cfg: TrainConfig, extent: float, out_dir=None, metrics_fh=None) -> TrainState:
    """Phase 1: Gaussians only, frames visited in a seeded random order."""
    rng = _seed_all(cfg.seed)
    state = new_state(init, cfg, extent)
    return _run(state, data, cfg, cfg.vanilla_iters, 1, rng, Path(out_dir) if out_dir else None, metrics_fh)


def clone_state(state: TrainState, cfg: TrainConfig) -> TrainState:
    """Independent copy of Gaussian parameters and optimizer moments (no field)."""
    params = {k: v.detach().clone().requires_grad_(True) for k, v in state.params.items()}
    opt = _make_optimizer(params, cfg, state.extent)
    for grp_old, grp_new in zip(state.optimizer.param_groups, opt.param_groups):
        st = state.optimizer.state.get(grp_old["params"][0])
        if st:
            opt.state[grp_new["params"][0]] = {k: v.clone() for k, v in st.items()}
    return TrainState(params, opt, None, None, state.iteration, list(state.history), state.extent)


def train_field(state: TrainState, data: TrainData, cfg: TrainConfig, bbox=None, out_dir=None, metrics_fh=None) -> TrainState:
    """Phase 2: joint optimization with the distortion field applied per stamp."""
    rng = _seed_all(cfg.seed + 1)
    if cfg.use_field:
        if bbox is None:
            bbox = DistortionField.bbox_for(state.params["means"].detach().numpy())
        state.field = DistortionField(cfg.field_config, bbox, seed=cfg.seed, dtype=getattr(torch, cfg.field_dtype))
        state.field_optimizer = torch.optim.Adam(state.field.parameters(), lr=cfg.lr_field, eps=1e-15)
    return _run(state, data, cfg, cfg.field_iters, 2, rng, Path(out_dir) if out_dir else None, metrics_fh)


def train(
    frames: list,
    scene: RegisteredScene,
    priors: dict,
    cfg: TrainConfig = TrainConfig(),
    out_dir=None,
    masks: dict | None = None,
) -> tuple[GaussianCloud, DistortionField | None, TrainState]:
    """Full schedule. Returns the canonical cloud, the detached field and the final state."""
    out = Path(out_dir) if out_dir is not None else None
    fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "metrics.jsonl", "w")
    try:
        init = init_gaussians(scene, cfg.max_points)
        data = TrainData(list(frames), scene.poses, scene.intrinsics, priors, masks if masks is not None else scene.depth_masks)
        state = train_vanilla(data, init, cfg, scene.extent, out, fh)
        state = train_field(state, data, cfg, out_dir=out, metrics_fh=fh)
    finally:
        if fh is not None:
            fh.close()
    fld = state.field
    if fld is not None:
        for p in fld.parameters():
            p.requires_grad_(False)
    return state.gaussians(), fld, state


def with_one_axis_stamps(frames: list, stamps: dict) -> list:
    """Replace each frame's stamp (ablation: collapse to a single axis)."""
    return [replace(f, stamp=stamps[f.frame_id]) for f in frames]


# -- evaluation --------------------------------------------------------------


@dataclass(frozen=True)
class EvalResult:
    pose: Pose
    psnr: float
    ssim: float
    steps: int
    diverged: bool = False


def _photometric(color, target, w_rgb=0.8, w_ssim=0.2):
    return w_rgb * (color - target).abs().mean() + w_ssim * (1.0 - ssim_map(color, target).mean())


def eval_test_view(
    g: GaussianCloud,
    image: Image,
    init_pose: Pose,
    K: Intrinsics,
    steps: int = 500,
    lr: float = 2e-3,
    extent: float = 1.0,
    background=(0.0, 0.0, 0.0),
    patience: int = 100,
) -> EvalResult:
    """Optimize only the camera pose against ``image`` with the model frozen."""
    target = from_array(image.data, dtype=torch.float64)
    bg = torch.as_tensor(background, dtype=torch.float64)
    means = from_array(g.centers)
    quats = from_array(g.rotations)
    scales = from_array(g.scales)
    ops = from_array(g.opacities)
    cols = sh_to_color(from_array(g.colors))
    r0 = from_array(init_pose.rotation)
    t0 = from_array(init_pose.translation)
    xi = torch.zeros(6, dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam([xi], lr=lr, eps=1e-8)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(steps, 1), eta_min=lr * 0.01)

    def pose_of(v):
        return r0 @ so3_exp(v[:3]), t0 + v[3:] * extent

    def objective(v):
        rot, t = pose_of(v)
        color, _, _ = rasterize(means, quats, scales, ops, cols, rot, t, K.focal, image.width, image.height, bg)
        return _photometric(color, target), color

    best_loss, best_xi = math.inf, xi.detach().clone()
    prev, rising, diverged, done = math.inf, 0, False, 0
    for k in range(steps):
        lval, _ = objective(xi)
        cur = float(lval.detach())
        if cur < best_loss:
            best_loss, best_xi = cur, xi.detach().clone()
        rising = rising + 1 if cur > prev else 0
        prev = cur
        if rising >= patience:
            log.warning("test-pose optimization diverged after %d steps; returning best pose", k)
            diverged = True
            break
        opt.zero_grad(set_to_none=True)
        lval.backward()
        opt.step()
        sched.step()
        done = k + 1
    if not diverged:
        with torch.no_grad():
            lval, _ = objective(xi)
        if float(lval) <= best_loss:
            best_xi = xi.detach().clone()
    with torch.no_grad():
        rot, t = pose_of(best_xi)
        _, color = objective(best_xi)
    pose = Pose(rot.numpy(), t.numpy())
    p = psnr(color, target)
    s = float(ssim_map(color, target).mean())
    return EvalResult(pose, min(p, PSNR_CAP), s, done, diverged)


def render_cloud(g: GaussianCloud, pose: Pose, K: Intrinsics, background=(0.0, 0.0, 0.0)) -> Image:
    from liftcore.splat import render

    return render(g, pose, K, background=background).image()
