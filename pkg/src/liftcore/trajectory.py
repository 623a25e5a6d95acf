"""Articulated camera trajectories.

Stage 1 sends ``D`` clips of ``l`` frames out of the input image (frame 0 of
every stage-1 clip *is* the input). Stage 2 starts ``D - 1`` clips at
stage-1 terminal frames and turns 90 degrees, each adding ``l`` new frames.
That yields ``l*D + (l-1)*(D-1)`` distinct frames including the input.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from liftcore.core import FrameStamp, Image, Pose, compose, rot_axis_angle, thread_count

log = logging.getLogger(__name__)

INPUT_CLIP = "input"

# camera-frame unit motion (y points down) and the stamp axis it advances
DIRECTIONS = {
    "right": (np.array([1.0, 0.0, 0.0]), (1, 0)),
    "left": (np.array([-1.0, 0.0, 0.0]), (-1, 0)),
    "up": (np.array([0.0, -1.0, 0.0]), (0, 1)),
    "down": (np.array([0.0, 1.0, 0.0]), (0, -1)),
}
STAGE1 = {2: ("right", "left"), 4: ("right", "up", "left", "down")}
# 90-degree turn taken from each stage-1 terminal; the last stage-1 direction gets none
TURN = {"right": "up", "up": "left", "left": "down", "down": "right"}


def frame_id(clip_id: str, index: int) -> str:
    return f"{clip_id}_{index:03d}"


INPUT_FRAME = frame_id(INPUT_CLIP, 0)


def frame_count(l: int, D: int) -> int:
    return l * D + (l - 1) * (D - 1)


@dataclass(frozen=True)
class Clip:
    clip_id: str
    stage: str  # "first" | "second"
    direction: str
    anchor_frame_id: str
    poses: tuple  # Pose per index, relative to the anchor; poses[0] is identity
    stamps: tuple  # FrameStamp per index; stamps[0] is the anchor's stamp
    steps: tuple  # signed cumulative (i, j) step counts per index

    @property
    def frame_ids(self) -> list[str]:
        ids = [frame_id(self.clip_id, k) for k in range(len(self.poses))]
        ids[0] = self.anchor_frame_id
        return ids


@dataclass(frozen=True)
class PlannedFrame:
    frame_id: str
    clip_id: str
    index_in_clip: int
    stamp: FrameStamp
    parent_id: str | None  # predecessor in its clip (None for the input)
    path_steps: int  # steps walked from the input along the trajectory


@dataclass(frozen=True)
class TrajectoryPlan:
    l: int
    D: int
    step: float
    rot_step: float
    clips: tuple
    normalizer: float

    @property
    def frames(self) -> list[PlannedFrame]:
        out = [PlannedFrame(INPUT_FRAME, INPUT_CLIP, 0, FrameStamp(0.0, 0.0), None, 0)]
        depth = {INPUT_FRAME: 0}
        for clip in self.clips:
            ids = clip.frame_ids
            for k in range(1, len(ids)):
                depth[ids[k]] = depth[ids[0]] + k
                out.append(PlannedFrame(ids[k], clip.clip_id, k, clip.stamps[k], ids[k - 1], depth[ids[k]]))
        return out

    @property
    def frame_ids(self) -> list[str]:
        return [f.frame_id for f in self.frames]

    def one_axis_stamps(self) -> dict[str, FrameStamp]:
        """Direction-blind stamps: only the path distance from the input survives."""
        frames = self.frames
        longest = max(f.path_steps for f in frames) or 1
        return {f.frame_id: FrameStamp(f.path_steps / longest, 0.0) for f in frames}

    def to_dict(self) -> dict:
        return {
            "l": self.l,
            "D": self.D,
            "step": self.step,
            "rot_step": self.rot_step,
            "normalizer": self.normalizer,
            "frame_count": len(self.frames),
            "clips": [
                {
                    "clip_id": c.clip_id,
                    "stage": c.stage,
                    "direction": c.direction,
                    "anchor_frame_id": c.anchor_frame_id,
                    "frame_ids": c.frame_ids,
                    "poses": [p.matrix().tolist() for p in c.poses],
                    "stamps": [list(s.as_tuple()) for s in c.stamps],
                    "steps": [list(s) for s in c.steps],
                }
                for c in self.clips
            ],
            "frames": [
                {
                    "frame_id": f.frame_id,
                    "clip_id": f.clip_id,
                    "index_in_clip": f.index_in_clip,
                    "stamp": list(f.stamp.as_tuple()),
                    "parent_id": f.parent_id,
                }
                for f in self.frames
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectoryPlan":
        clips = tuple(
            Clip(
                clip_id=c["clip_id"],
                stage=c["stage"],
                direction=c["direction"],
                anchor_frame_id=c["anchor_frame_id"],
                poses=tuple(Pose.from_matrix(m) for m in c["poses"]),
                stamps=tuple(FrameStamp(*s) for s in c["stamps"]),
                steps=tuple(tuple(s) for s in c["steps"]),
            )
            for c in d["clips"]
        )
        return cls(int(d["l"]), int(d["D"]), float(d["step"]), float(d.get("rot_step", 0.0)), clips, float(d["normalizer"]))


def _step_pose(direction: str, step: float, rot_step: float) -> Pose:
    unit, _ = DIRECTIONS[direction]
    rot = np.eye(3)
    if rot_step:
        # turn back toward the scene center while sliding sideways
        axis = np.cross(unit, [0.0, 0.0, 1.0])
        rot = rot_axis_angle(axis, rot_step)
    return Pose(rot, unit * step)


def _clip(clip_id, stage, direction, anchor_id, anchor_steps, n_poses, step, rot_step, normalizer) -> Clip:
    inc = _step_pose(direction, step, rot_step)
    _, (di, dj) = DIRECTIONS[direction]
    poses, steps = [Pose.identity()], [tuple(anchor_steps)]
    for _ in range(1, n_poses):
        poses.append(compose(poses[-1], inc))
        si, sj = steps[-1]
        steps.append((si + di, sj + dj))
    stamps = tuple(FrameStamp(si * normalizer, sj * normalizer) for si, sj in steps)
    return Clip(clip_id, stage, direction, anchor_id, tuple(poses), stamps, tuple(steps))


def plan_articulated(l: int, D: int, step: float = 0.1, rot_step: float = 0.0) -> TrajectoryPlan:
    if D not in STAGE1:
        raise ValueError(f"unsupported direction count D={D}; expected 2 or 4")
    if l < 2:
        raise ValueError(f"clip length l must be >= 2, got {l}")
    if not step > 0:
        raise ValueError("step must be positive")
    # stage-2 frames sit l steps out on their own axis, the farthest any frame gets
    normalizer = 1.0 / l
    clips = []
    terminals = {}
    for direction in STAGE1[D]:
        cid = f"s1_{direction}"
        c = _clip(cid, "first", direction, INPUT_FRAME, (0, 0), l, step, rot_step, normalizer)
        clips.append(c)
        terminals[direction] = (c.frame_ids[-1], c.steps[-1])
    for direction in STAGE1[D][: D - 1]:
        turn = TURN[direction]
        anchor_id, anchor_steps = terminals[direction]
        cid = f"s2_{direction}_{turn}"
        clips.append(_clip(cid, "second", turn, anchor_id, anchor_steps, l + 1, step, rot_step, normalizer))
    plan = TrajectoryPlan(l, D, float(step), float(rot_step), tuple(clips), normalizer)
    log.debug("planned %d frames (l=%d, D=%d)", len(plan.frames), l, D)
    return plan


def pose_sequence(plan: TrajectoryPlan) -> list[tuple[str, Pose, FrameStamp]]:
    """Absolute intended pose of every frame, input first."""
    absolute = {INPUT_FRAME: Pose.identity()}
    by_id = {}
    for clip in plan.clips:
        if clip.anchor_frame_id not in absolute:
            raise ValueError(f"clip {clip.clip_id} anchored at unknown frame {clip.anchor_frame_id!r}")
        base = absolute[clip.anchor_frame_id]
        for fid, rel in zip(clip.frame_ids[1:], clip.poses[1:]):
            absolute[fid] = compose(base, rel)
    for f in plan.frames:
        by_id[f.frame_id] = (f.frame_id, absolute[f.frame_id], f.stamp)
    return [by_id[f.frame_id] for f in plan.frames]


@dataclass(frozen=True)
class FrameRecord:
    frame_id: str
    image: Image
    stamp: FrameStamp
    clip_id: str
    index_in_clip: int
    parent_id: str | None = None
    extra: dict = field(default_factory=dict, compare=False)


class FrameProvider(Protocol):
    def get(self, frame: PlannedFrame) -> Image: ...


class DirectoryFrameProvider:
    """Reads ``frames/<clip_id>/<index>.png`` under a dataset root."""

    def __init__(self, root):
        self.root = Path(root)

    def path(self, frame: PlannedFrame) -> Path:
        return self.root / "frames" / frame.clip_id / f"{frame.index_in_clip}.png"

    def get(self, frame: PlannedFrame) -> Image:
        from liftcore.io import read_png

        p = self.path(frame)
        if not p.exists():
            raise FileNotFoundError(f"missing frame {frame.frame_id}: {p}")
        return read_png(p)


def acquire_frames(plan: TrajectoryPlan, provider: FrameProvider) -> list[FrameRecord]:
    frames = plan.frames
    workers = thread_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            images = list(pool.map(provider.get, frames))
    else:
        images = [provider.get(f) for f in frames]
    shape = images[0].data.shape
    out = []
    for f, img in zip(frames, images):
        if img.data.shape != shape:
            raise ValueError(f"frame {f.frame_id} has shape {img.data.shape}, expected {shape}")
        out.append(FrameRecord(f.frame_id, img, f.stamp, f.clip_id, f.index_in_clip, f.parent_id))
    return out
