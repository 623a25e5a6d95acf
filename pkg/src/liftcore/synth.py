"""Ray-cast oracle scenes with exact geometry and controllable frame distortion.

Nothing here touches the splatting code: rays are intersected analytically
with spheres, boxes and planes.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

from liftcore.core import DepthMap, FrameStamp, Image, Intrinsics, PointMap, Pose, compose, inverse, make_rng, so3_exp
from liftcore.trajectory import TrajectoryPlan, pose_sequence

log = logging.getLogger(__name__)

NEAR = 1e-6


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    albedo: tuple


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple
    albedo: tuple


@dataclass(frozen=True)
class Plane:
    point: tuple
    normal: tuple
    albedo: tuple


@dataclass(frozen=True)
class SynthScene:
    primitives: tuple
    background: tuple = (0.0, 0.0, 0.0)
    light: tuple = (-0.4, -0.7, -0.6)  # direction the light travels
    ambient: float = 0.35
    texture_freq: float = 6.0
    texture_amp: float = 0.25

    @property
    def bounds(self) -> np.ndarray:
        pts = []
        for p in self.primitives:
            if isinstance(p, Sphere):
                c = np.asarray(p.center)
                pts += [c - p.radius, c + p.radius]
            elif isinstance(p, Box):
                pts += [np.asarray(p.lo), np.asarray(p.hi)]
            else:
                pts.append(np.asarray(p.point))
        pts = np.array(pts)
        return np.stack([pts.min(0), pts.max(0)])

    def to_dict(self) -> dict:
        return {
            "primitives": [{"type": type(p).__name__.lower(), **asdict(p)} for p in self.primitives],
            "background": list(self.background),
            "light": list(self.light),
            "ambient": self.ambient,
            "texture_freq": self.texture_freq,
            "texture_amp": self.texture_amp,
        }


def default_scene(seed: int = 0) -> SynthScene:
    """Back wall plus a handful of colored solids in front of the input camera."""
    rng = make_rng(seed)
    prims = [Plane((0.0, 0.0, 4.0), (0.0, 0.0, -1.0), (0.75, 0.7, 0.6)), Plane((0.0, 1.0, 0.0), (0.0, -1.0, 0.0), (0.45, 0.55, 0.65))]
    palette = [(0.9, 0.25, 0.2), (0.2, 0.7, 0.3), (0.25, 0.35, 0.9), (0.9, 0.8, 0.2), (0.7, 0.3, 0.8)]
    for k in range(3):
        c = (rng.uniform(-0.8, 0.8), rng.uniform(-0.3, 0.6), rng.uniform(2.3, 3.2))
        prims.append(Sphere(c, float(rng.uniform(0.25, 0.45)), palette[k]))
    for k in range(2):
        lo = np.array([rng.uniform(-1.0, 0.6), rng.uniform(0.2, 0.6), rng.uniform(2.6, 3.4)])
        hi = lo + rng.uniform(0.3, 0.6, 3)
        hi[1] = min(hi[1], 1.0)
        prims.append(Box(tuple(lo), tuple(hi), palette[3 + k]))
    return SynthScene(tuple(prims))


def _intersect(prim, o, d):
    """Ray parameter and world normal per ray (inf where missed)."""
    n_rays = len(d)
    s = np.full(n_rays, np.inf)
    nrm = np.zeros((n_rays, 3))
    if isinstance(prim, Sphere):
        oc = o - np.asarray(prim.center)
        a = np.sum(d * d, 1)
        b = 2 * (d @ oc)
        c = oc @ oc - prim.radius**2
        disc = b * b - 4 * a * c
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        s1 = (-b - sq) / (2 * a)
        s2 = (-b + sq) / (2 * a)
        cand = np.where(s1 > NEAR, s1, np.where(s2 > NEAR, s2, np.inf))
        s = np.where(ok, cand, np.inf)
        hit = np.isfinite(s)
        p = o + s[hit, None] * d[hit]
        nrm[hit] = (p - np.asarray(prim.center)) / prim.radius
    elif isinstance(prim, Box):
        lo, hi = np.asarray(prim.lo), np.asarray(prim.hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t0 = (lo - o) * inv
            t1 = (hi - o) * inv
        tmin = np.minimum(t0, t1)
        tmax = np.maximum(t0, t1)
        tmin = np.where(np.isnan(tmin), -np.inf, tmin)
        tmax = np.where(np.isnan(tmax), np.inf, tmax)
        enter = tmin.max(1)
        leave = tmax.min(1)
        ok = (leave >= enter) & (leave > NEAR)
        cand = np.where(enter > NEAR, enter, leave)
        s = np.where(ok, cand, np.inf)
        axis = np.where(enter > NEAR, tmin.argmax(1), tmax.argmin(1))
        hit = np.isfinite(s)
        sign = -np.sign(d[np.arange(n_rays), axis])
        sign = np.where(enter > NEAR, sign, -sign)
        nrm[hit, axis[hit]] = sign[hit]
    else:
        n = np.asarray(prim.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        den = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((np.asarray(prim.point) - o) @ n) / den
        s = np.where((np.abs(den) > 1e-12) & (t > NEAR), t, np.inf)
        nrm[:] = n
    return s, nrm


def render_gt(scene: SynthScene, pose: Pose, K: Intrinsics, size=None) -> tuple[Image, DepthMap, PointMap]:
    width, height = size if size is not None else (K.width, K.height)
    jj, ii = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    dirs_cam = np.stack([(ii - width / 2.0) / K.focal, (jj - height / 2.0) / K.focal, np.ones_like(ii)], -1).reshape(-1, 3)
    d = dirs_cam @ pose.rotation.T
    o = pose.translation
    best = np.full(len(d), np.inf)
    normal = np.zeros((len(d), 3))
    albedo = np.zeros((len(d), 3))
    for prim in scene.primitives:
        s, nrm = _intersect(prim, o, d)
        closer = s < best
        best = np.where(closer, s, best)
        normal[closer] = nrm[closer]
        albedo[closer] = prim.albedo
    hit = np.isfinite(best)
    # direction vectors have unit camera-z, so the ray parameter is the z-depth
    depth = np.where(hit, best, 0.0)
    world = o + depth[:, None] * d
    light = -np.asarray(scene.light, dtype=np.float64)
    light /= np.linalg.norm(light)
    lam = np.clip(normal @ light, 0.0, 1.0)
    f = scene.texture_freq
    tex = 1.0 + scene.texture_amp * np.sin(f * world[:, 0]) * np.sin(f * world[:, 1] + 0.5) * np.sin(f * world[:, 2] + 1.0)
    shade = (scene.ambient + (1 - scene.ambient) * lam) * tex
    color = np.where(hit[:, None], np.clip(albedo * shade[:, None], 0.0, 1.0), np.asarray(scene.background))
    pts = np.where(hit[:, None], depth[:, None] * dirs_cam, 0.0)
    img = Image(color.reshape(height, width, 3))
    dm = DepthMap(depth.reshape(height, width), "absolute")
    pm = PointMap(pts.reshape(height, width, 3), hit.reshape(height, width).astype(np.float64))
    return img, dm, pm


# -- distortion --------------------------------------------------------------


@dataclass(frozen=True)
class DistortionSpec:
    mode: str = "none"  # "none" | "smooth-warp"
    amplitude: float = 0.02  # peak displacement as a fraction of image width
    frequency: float = 1.0  # sinusoid cycles across the image
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("none", "smooth-warp"):
            raise ValueError(f"unknown distortion mode {self.mode!r}")

    @staticmethod
    def gain(stamp: FrameStamp) -> float:
        """Zero at the input frame, growing with distance along either axis."""
        return min(1.0, abs(stamp.t_i) + abs(stamp.t_j))


def displacement_field(spec: DistortionSpec, stamp: FrameStamp, width: int, height: int, key: int) -> np.ndarray:
    """(H, W, 2) pixel displacement (dx, dy) applied to a frame.

    ``key`` picks the sinusoid phases. Frames sharing a key (one generated
    clip) drift coherently, with magnitude set by the stamp gain.
    """
    g = DistortionSpec.gain(stamp)
    if spec.mode == "none" or g == 0.0 or spec.amplitude == 0.0:
        return np.zeros((height, width, 2))
    rng = make_rng(spec.seed * 100003 + key)
    ph = rng.uniform(0, 2 * np.pi, 4)
    jj, ii = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    k = 2 * np.pi * spec.frequency
    amp = spec.amplitude * width * g
    dx = amp * np.sin(k * jj / height + ph[0]) * np.cos(k * ii / width + ph[1])
    dy = amp * np.sin(k * ii / width + ph[2]) * np.cos(k * jj / height + ph[3])
    return np.stack([dx, dy], -1)


def warp_image(img: Image, disp: np.ndarray) -> Image:
    if not np.any(disp):
        return img
    h, w = img.height, img.width
    jj, ii = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    coords = [jj + disp[..., 1], ii + disp[..., 0]]
    out = np.stack([map_coordinates(img.data[..., c], coords, order=1, mode="nearest") for c in range(img.channels)], -1)
    return Image.clipped(out)


# -- dataset -----------------------------------------------------------------


def heldout_poses(plan: TrajectoryPlan) -> dict[str, Pose]:
    """Undistorted evaluation views between planned frames (half steps, diagonals)."""
    s = plan.step
    reach = (plan.l - 1) * s
    views = {
        "half_right": (0.5 * reach, 0.0),
        "half_left": (-0.5 * reach, 0.0),
        "half_up": (0.0, -0.5 * reach),
        "diag_ur": (0.5 * reach, -0.5 * reach),
        "diag_dl": (-0.5 * reach, 0.5 * reach),
        "mid_step": (0.5 * s, 0.5 * s),
    }
    if plan.D == 2:
        views.pop("half_up")
    return {k: Pose(np.eye(3), [x, y, 0.0]) for k, (x, y) in views.items()}


def emit_dataset(
    scene: SynthScene,
    plan: TrajectoryPlan,
    distortion: DistortionSpec,
    out_dir,
    K: Intrinsics,
    seed: int = 0,
) -> dict:
    """Write the full dataset directory; returns the manifest."""
    from liftcore import io
    from liftcore.trajectory import INPUT_FRAME

    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as e:
        raise OSError(f"dataset directory {out} is not writable: {e}") from e
    rng = make_rng(seed)
    frames = {f.frame_id: f for f in plan.frames}
    seq = pose_sequence(plan)
    poses = {fid: p for fid, p, _ in seq}
    io.write_json(out / "plan.json", plan.to_dict())
    manifest = {
        "schema_version": 1,
        "seed": seed,
        "width": K.width,
        "height": K.height,
        "focal": K.focal,
        "input_frame": INPUT_FRAME,
        "distortion": asdict(distortion),
        "scene": scene.to_dict(),
        "frames": [],
        "pairs": [],
        "heldout": [],
    }
    cache = {}
    clip_key = {c: k for k, c in enumerate(dict.fromkeys(f.clip_id for f in plan.frames))}
    for fid, pose, stamp in seq:
        img, depth, pm = render_gt(scene, pose, K)
        cache[fid] = pm
        f = frames[fid]
        disp = displacement_field(distortion, stamp, K.width, K.height, clip_key[f.clip_id])
        shown = warp_image(img, disp)
        io.write_png(out / "frames" / f.clip_id / f"{f.index_in_clip}.png", shown)
        io.write_pfm(out / "pointmaps" / f"{fid}.pfm", pm.points)
        io.write_pfm(out / "conf" / f"{fid}.pfm", pm.confidence)
        io.write_pfm(out / "depth_gt" / f"{fid}.pfm", depth.data)
        a = float(rng.uniform(0.3, 3.0))
        b = float(rng.uniform(-1.0, 1.0))
        rel = np.where(pm.valid, a * depth.data + b, 0.0)
        io.write_pfm(out / "depth_rel" / f"{fid}.pfm", rel)
        manifest["frames"].append(
            {
                "frame_id": fid,
                "clip_id": f.clip_id,
                "index_in_clip": f.index_in_clip,
                "stamp": list(stamp.as_tuple()),
                "pose": pose.matrix().tolist(),
                "depth_rel_affine": [a, b],
                "distortion_gain": DistortionSpec.gain(stamp) if distortion.mode != "none" else 0.0,
                "max_displacement_px": float(np.abs(disp).max()),
            }
        )
    for f in plan.frames:
        if f.parent_id is None:
            continue
        # source pixels re-expressed in the parent camera from exact poses
        pm = cache[f.frame_id]
        rel = compose(inverse(poses[f.parent_id]), poses[f.frame_id])
        pts = np.where(pm.valid[..., None], rel.apply(pm.points), 0.0)
        key = f"{f.parent_id}__{f.frame_id}"
        io.write_pfm(out / "pairs" / f"{key}.pfm", pts)
        io.write_pfm(out / "pairs" / f"{key}_conf.pfm", pm.confidence)
        manifest["pairs"].append({"ref": f.parent_id, "src": f.frame_id})
    io.write_json(out / "poses_gt.json", io.poses_to_json(poses, K.focal, K.width, K.height))
    held = heldout_poses(plan)
    for name, pose in held.items():
        img, _, _ = render_gt(scene, pose, K)
        io.write_png(out / "heldout" / f"{name}.png", img)
        manifest["heldout"].append({"name": name, "pose": pose.matrix().tolist()})
    io.write_json(out / "heldout" / "poses.json", io.poses_to_json(held, K.focal, K.width, K.height))
    io.write_json(out / "manifest.json", manifest)
    log.info("wrote %d frames to %s", len(seq), out)
    return manifest


def pair_for_frames(pm_src: PointMap, src_pose: Pose, ref_pose: Pose) -> PointMap:
    """Source pixels expressed in the reference camera (exact oracle)."""
    rel = compose(inverse(ref_pose), src_pose)
    return PointMap(np.where(pm_src.valid[..., None], rel.apply(pm_src.points), 0.0), pm_src.confidence)


__all__ = [
    "Box",
    "DistortionSpec",
    "Plane",
    "Sphere",
    "SynthScene",
    "default_scene",
    "displacement_field",
    "emit_dataset",
    "heldout_poses",
    "pair_for_frames",
    "render_gt",
    "so3_exp",
    "warp_image",
]
