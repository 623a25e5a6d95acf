"""Shared value types and rigid-body helpers.

Conventions: poses are camera-to-world, right-handed, x right / y down /
z forward. Pixel ``(i, j)`` (column, row) of a ``W x H`` image sits at
``(i - W/2, j - H/2)`` relative to the principal point, so a camera-frame
point ``P`` projects to ``i = f * P[0] / P[2] + W/2``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

ORTHO_TOL = 1e-9
QUAT_TOL = 1e-6


def _frozen(a, dtype=np.float64) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def make_rng(seed: int | None) -> np.random.Generator:
    """All stochastic steps draw from a PCG64 stream seeded here."""
    return np.random.default_rng(0 if seed is None else int(seed))


def thread_count() -> int:
    """Worker cap from ``LIFTCORE_THREADS`` (defaults to 1)."""
    raw = os.environ.get("LIFTCORE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"LIFTCORE_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


@dataclass(frozen=True)
class Image:
    data: np.ndarray  # (H, W, C), C in {1, 3}

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim == 2:
            d = d[..., None]
        if d.ndim != 3 or d.shape[2] not in (1, 3):
            raise ValueError(f"image must be HxWx1 or HxWx3, got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("image contains non-finite values")
        if d.size and (d.min() < 0.0 or d.max() > 1.0):
            raise ValueError("image intensities must lie in [0, 1]")
        object.__setattr__(self, "data", _frozen(d))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @classmethod
    def clipped(cls, data) -> "Image":
        return cls(np.clip(np.nan_to_num(np.asarray(data, dtype=np.float64)), 0.0, 1.0))


@dataclass(frozen=True)
class DepthMap:
    data: np.ndarray  # (H, W)
    kind: Literal["absolute", "relative", "calibrated"] = "absolute"

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 2:
            raise ValueError(f"depth map must be 2-D, got {d.shape}")
        if self.kind not in ("absolute", "relative", "calibrated"):
            raise ValueError(f"unknown depth kind {self.kind!r}")
        if not np.all(np.isfinite(d)):
            raise ValueError("depth map contains non-finite values")
        # zero marks a pixel without a measurement
        if self.kind == "absolute" and d.size and d.min() < 0.0:
            raise ValueError("absolute depth must be non-negative")
        object.__setattr__(self, "data", _frozen(d))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class PointMap:
    points: np.ndarray  # (H, W, 3) in the owning camera frame
    confidence: np.ndarray  # (H, W); 0 marks an invalid pixel

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64)
        c = np.asarray(self.confidence, dtype=np.float64)
        if p.ndim != 3 or p.shape[2] != 3:
            raise ValueError(f"points must be HxWx3, got {p.shape}")
        if c.shape != p.shape[:2]:
            raise ValueError(f"confidence shape {c.shape} does not match points {p.shape[:2]}")
        if np.any(c < 0) or not np.all(np.isfinite(c)):
            raise ValueError("confidence must be finite and non-negative")
        object.__setattr__(self, "points", _frozen(p))
        object.__setattr__(self, "confidence", _frozen(c))

    @property
    def height(self) -> int:
        return self.points.shape[0]

    @property
    def width(self) -> int:
        return self.points.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return self.confidence > 0


@dataclass(frozen=True)
class Intrinsics:
    focal: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.focal > 0 and np.isfinite(self.focal)):
            raise ValueError(f"focal must be positive, got {self.focal}")

    @property
    def principal(self) -> tuple[float, float]:
        return self.width / 2.0, self.height / 2.0

    def project(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        cx, cy = self.principal
        z = pts[..., 2]
        return np.stack([self.focal * pts[..., 0] / z + cx, self.focal * pts[..., 1] / z + cy], axis=-1)

    def unproject(self, depth: np.ndarray) -> np.ndarray:
        """Camera-frame points for a depth map (z-depth, not ray length)."""
        depth = np.asarray(depth, dtype=np.float64)
        h, w = depth.shape
        jj, ii = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
        cx, cy = self.principal
        x = (ii - cx) / self.focal * depth
        y = (jj - cy) / self.focal * depth
        return np.stack([x, y, depth], axis=-1)


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError("pose needs a 3x3 rotation and a 3-vector translation")
        if not np.allclose(r.T @ r, np.eye(3), atol=ORTHO_TOL, rtol=0) or abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", _frozen(r))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, pts: np.ndarray) -> np.ndarray:
        """Map camera-frame points to world coordinates."""
        return np.asarray(pts, dtype=np.float64) @ self.rotation.T + self.translation

    def apply_inverse(self, pts: np.ndarray) -> np.ndarray:
        """Map world points into this camera's frame."""
        return (np.asarray(pts, dtype=np.float64) - self.translation) @ self.rotation

    def center(self) -> np.ndarray:
        return self.translation.copy()


def compose(a: Pose, b: Pose) -> Pose:
    """Pose of frame ``b`` (expressed relative to ``a``) in ``a``'s parent frame."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(p: Pose) -> Pose:
    rt = p.rotation.T
    return Pose(rt, -rt @ p.translation)


def rotation_angle(r: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, in radians."""
    c = (np.trace(r) - 1.0) / 2.0
    s = np.linalg.norm([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]]) / 2.0
    return float(np.arctan2(s, c))


def rot_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = skew(axis)
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        return np.eye(3) + skew(w)
    return rot_axis_angle(w / theta, theta)


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a (w, x, y, z) quaternion; non-unit input is normalized."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0 or not np.isfinite(n):
        raise ValueError("cannot convert a zero quaternion to a rotation")
    w, x, y, z = q / n
    # products are even in q, so q and -q give identical bits
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return np.array(
        [
            [1 - 2 * (yy + zz), 2 * (xy - wz), 2 * (xz + wy)],
            [2 * (xy + wz), 1 - 2 * (xx + zz), 2 * (yz - wx)],
            [2 * (xz - wy), 2 * (yz + wx), 1 - 2 * (xx + yy)],
        ]
    )


def matrix_to_quat(r) -> np.ndarray:
    """Unit (w, x, y, z) quaternion with w >= 0 (Shepperd's method)."""
    r = np.asarray(r, dtype=np.float64)
    tr = np.trace(r)
    cand = np.array([tr, r[0, 0], r[1, 1], r[2, 2]])
    k = int(np.argmax(cand))
    if k == 0:
        s = np.sqrt(1.0 + tr) * 2
        q = np.array([0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s])
    elif k == 1:
        s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
        q = np.array([(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s])
    elif k == 2:
        s = np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
        q = np.array([(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
        q = np.array([(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s])
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


@dataclass(frozen=True)
class FrameStamp:
    t_i: float = 0.0  # left-right axis
    t_j: float = 0.0  # up-down axis

    def __post_init__(self):
        for v in (self.t_i, self.t_j):
            if not (-1.0 - 1e-12 <= v <= 1.0 + 1e-12):
                raise ValueError(f"stamp components must lie in [-1, 1], got ({self.t_i}, {self.t_j})")

    def as_tuple(self) -> tuple[float, float]:
        return (self.t_i, self.t_j)

    @property
    def is_origin(self) -> bool:
        return self.t_i == 0.0 and self.t_j == 0.0


@dataclass(frozen=True)
class GaussianCloud:
    centers: np.ndarray  # (N, 3)
    scales: np.ndarray  # (N, 3), > 0
    rotations: np.ndarray  # (N, 4) unit (w, x, y, z)
    opacities: np.ndarray  # (N,) in (0, 1)
    colors: np.ndarray  # (N, 3) degree-0 SH coefficients

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=np.float64).reshape(-1, 3)
        n = len(c)
        s = np.asarray(self.scales, dtype=np.float64).reshape(n, 3)
        r = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        o = np.asarray(self.opacities, dtype=np.float64).reshape(n)
        sh = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        if n:
            if np.any(s <= 0):
                raise ValueError("Gaussian scales must be positive")
            if np.any(np.abs(np.linalg.norm(r, axis=1) - 1.0) > QUAT_TOL):
                raise ValueError("Gaussian rotations must be unit quaternions")
            if np.any((o <= 0) | (o >= 1)):
                raise ValueError("Gaussian opacities must lie in (0, 1)")
            for a in (c, s, r, o, sh):
                if not np.all(np.isfinite(a)):
                    raise ValueError("Gaussian parameters must be finite")
        for name, a in (("centers", c), ("scales", s), ("rotations", r), ("opacities", o), ("colors", sh)):
            object.__setattr__(self, name, _frozen(a))

    def __len__(self) -> int:
        return len(self.centers)

    @classmethod
    def empty(cls) -> "GaussianCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)))

    def subset(self, idx) -> "GaussianCloud":
        return GaussianCloud(self.centers[idx], self.scales[idx], self.rotations[idx], self.opacities[idx], self.colors[idx])


SH_C0 = 0.28209479177387814


def rgb_to_sh(rgb):
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def sh_to_rgb(sh):
    return np.asarray(sh, dtype=np.float64) * SH_C0 + 0.5


def perturb_pose(p: Pose, rot_rad: float, trans: float, rng: np.random.Generator) -> Pose:
    """Rotate about a random camera-frame axis and shift along a random direction."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    d = rng.normal(size=3)
    d = d / np.linalg.norm(d) * trans
    return Pose(p.rotation @ so3_exp(axis * rot_rad), p.translation + d)
