"""Distortion field: 5D K-Planes features over (x, y, z, t_i, t_j) decoded by
small MLP heads into per-Gaussian position, rotation and scale offsets."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from liftcore._torch import from_array
from liftcore.core import FrameStamp, GaussianCloud

# coordinate order: x, y, z, t_i, t_j; no (t_i, t_j) plane
AXIS_PAIRS = ((0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3), (0, 4), (1, 4), (2, 4))
PLANE_NAMES = ("xy", "xz", "yz", "x_ti", "y_ti", "z_ti", "x_tj", "y_tj", "z_tj")

MAGIC = b"LIFTFLD\x01"


def interp_plane(plane: torch.Tensor, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Bilinear lookup in an ``(h, A, B)`` vertex grid spanning [-1, 1]^2.

    ``u`` indexes the A axis and ``v`` the B axis; both are clamped to the domain.
    Returns ``(N, h)``.
    """
    _, a, b = plane.shape
    x = (u.clamp(-1, 1) + 1) * 0.5 * (a - 1)
    y = (v.clamp(-1, 1) + 1) * 0.5 * (b - 1)
    i0 = torch.floor(x).clamp(0, a - 2).long()
    j0 = torch.floor(y).clamp(0, b - 2).long()
    fx = (x - i0).unsqueeze(-1)
    fy = (y - j0).unsqueeze(-1)
    g = plane.permute(1, 2, 0)
    return (
        g[i0, j0] * (1 - fx) * (1 - fy)
        + g[i0 + 1, j0] * fx * (1 - fy)
        + g[i0, j0 + 1] * (1 - fx) * fy
        + g[i0 + 1, j0 + 1] * fx * fy
    )


def total_variation(plane: torch.Tensor) -> torch.Tensor:
    """Per-channel anisotropic TV of an ``(h, A, B)`` grid: sum of |differences| along both axes."""
    return (plane[:, 1:, :] - plane[:, :-1, :]).abs().sum(dim=(1, 2)) + (plane[:, :, 1:] - plane[:, :, :-1]).abs().sum(dim=(1, 2))


@dataclass(frozen=True)
class FieldConfig:
    hidden: int = 16
    base_res: int = 32
    levels: tuple = (1, 2)
    width: int = 32
    additive_scale: bool = False
    init_noise: float = 1e-2


class FieldEncoder(nn.Module):
    def __init__(self, hidden=16, base_res=32, levels=(1, 2), init_noise=1e-2, generator=None, dtype=torch.float32):
        super().__init__()
        self.hidden = hidden
        self.base_res = base_res
        self.levels = tuple(int(m) for m in levels)
        planes = []
        for m in self.levels:
            n = m * base_res + 1
            p = torch.ones(9, hidden, n, n, dtype=dtype)
            if init_noise:
                p = p + init_noise * torch.randn(p.shape, generator=generator, dtype=dtype)
            planes.append(nn.Parameter(p))
        self.planes = nn.ParameterList(planes)

    @property
    def out_dim(self) -> int:
        return self.hidden * len(self.levels)

    def forward(self, coords: torch.Tensor) -> torch.Tensor:
        """``coords``: (N, 5) normalized to [-1, 1]; returns (N, hidden * levels)."""
        # grid_sample's (x, y) addresses (last, second-to-last) dims, i.e. (v, u)
        ia = torch.tensor([a for a, _ in AXIS_PAIRS])
        ib = torch.tensor([b for _, b in AXIS_PAIRS])
        grid = torch.stack([coords[:, ib].T, coords[:, ia].T], dim=-1).clamp(-1, 1).unsqueeze(1)
        feats = []
        for planes in self.planes:
            s = F.grid_sample(planes, grid.to(planes.dtype), mode="bilinear", padding_mode="border", align_corners=True)
            feats.append(s[:, :, 0, :].prod(dim=0).T)
        return torch.cat(feats, dim=-1)

    def forward_reference(self, coords: torch.Tensor) -> torch.Tensor:
        """Same features via explicit per-plane bilinear gathers."""
        feats = []
        for planes in self.planes:
            f = None
            for k, (a, b) in enumerate(AXIS_PAIRS):
                term = interp_plane(planes[k], coords[:, a], coords[:, b])
                f = term if f is None else f * term
            feats.append(f)
        return torch.cat(feats, dim=-1)

    def tv(self) -> torch.Tensor:
        """Mean absolute neighbor difference across every plane and level."""
        total, count = 0.0, 0
        for planes in self.planes:
            d1 = planes[:, :, 1:, :] - planes[:, :, :-1, :]
            d2 = planes[:, :, :, 1:] - planes[:, :, :, :-1]
            total = total + d1.abs().sum() + d2.abs().sum()
            count += d1.numel() + d2.numel()
        return total / count


def _mlp(i, w, o):
    return nn.Sequential(nn.Linear(i, w), nn.ReLU(), nn.Linear(w, o))


class FieldDecoder(nn.Module):
    def __init__(self, in_dim, hidden=16, width=32, zero_heads=True, dtype=torch.float32):
        super().__init__()
        self.merge = _mlp(in_dim, width, hidden).to(dtype)
        self.head_x = _mlp(hidden, width, 3).to(dtype)
        self.head_r = _mlp(hidden, width, 4).to(dtype)
        self.head_s = _mlp(hidden, width, 3).to(dtype)
        if zero_heads:
            for h in (self.head_x, self.head_r, self.head_s):
                nn.init.zeros_(h[2].weight)
                nn.init.zeros_(h[2].bias)

    def forward(self, f_h):
        f_d = self.merge(f_h)
        return self.head_x(f_d), self.head_r(f_d), self.head_s(f_d)


class DistortionField(nn.Module):
    def __init__(self, cfg: FieldConfig = FieldConfig(), bbox=None, seed: int = 0, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(int(seed))
        self.encoder = FieldEncoder(cfg.hidden, cfg.base_res, cfg.levels, cfg.init_noise, gen, dtype)
        # nn.Linear draws from the global RNG; fork it so the seed fully determines init
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(int(seed))
            self.decoder = FieldDecoder(self.encoder.out_dim, cfg.hidden, cfg.width, True, dtype)
        if bbox is None:
            bbox = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])
        self.register_buffer("bbox", torch.as_tensor(np.asarray(bbox, dtype=np.float64), dtype=torch.float64))

    @staticmethod
    def bbox_for(points: np.ndarray, margin: float = 0.05) -> np.ndarray:
        lo, hi = points.min(0), points.max(0)
        pad = np.maximum(hi - lo, 1e-6) * margin
        return np.stack([lo - pad, hi + pad])

    def normalize(self, centers: torch.Tensor, stamp) -> torch.Tensor:
        lo = self.bbox[0].to(centers.dtype)
        hi = self.bbox[1].to(centers.dtype)
        xyz = 2 * (centers - lo) / (hi - lo) - 1
        if isinstance(stamp, FrameStamp):
            stamp = stamp.as_tuple()
        t = torch.as_tensor(stamp, dtype=centers.dtype).reshape(-1, 2).expand(len(centers), 2)
        return torch.cat([xyz, t], dim=-1)

    def encode(self, centers: torch.Tensor, stamp) -> torch.Tensor:
        return self.encoder(self.normalize(centers, stamp))

    def forward(self, centers: torch.Tensor, stamp):
        return self.decoder(self.encode(centers, stamp))

    def apply(self, means, quats, scales, stamp):
        """Distorted (means, quats, scales) and the raw offsets."""
        dx, dr, ds = self(means, stamp)
        q = quats + dr
        q = q / q.norm(dim=-1, keepdim=True)
        s = scales + ds if self.cfg.additive_scale else scales * torch.exp(ds)
        return means + dx, q, s, (dx, dr, ds)


@dataclass(frozen=True)
class Deformation:
    dX: np.ndarray
    dr: np.ndarray
    ds: np.ndarray


def encode(centers, stamp, field: DistortionField) -> np.ndarray:
    c = from_array(np.asarray(centers), dtype=next(field.parameters()).dtype)
    with torch.no_grad():
        return field.encode(c, stamp).double().numpy()


def deform(g: GaussianCloud, stamp, field: DistortionField) -> tuple[GaussianCloud, Deformation]:
    dt = next(field.parameters()).dtype
    with torch.no_grad():
        m = from_array(g.centers, dtype=dt)
        q = from_array(g.rotations, dtype=dt)
        s = from_array(g.scales, dtype=dt)
        m2, q2, s2, (dx, dr, ds) = field.apply(m, q, s, stamp)
    d = Deformation(dx.double().numpy(), dr.double().numpy(), ds.double().numpy())
    if not np.any(d.dX) and not np.any(d.dr) and not np.any(d.ds):
        return g, d
    out = GaussianCloud(m2.double().numpy(), s2.double().numpy(), q2.double().numpy(), g.opacities, g.colors)
    return out, d


def canonical(g: GaussianCloud) -> GaussianCloud:
    """The undistorted cloud; per-frame offsets are never folded back in."""
    return g


# -- checkpoint --------------------------------------------------------------

_DTYPES = {torch.float32: (0, "<f4"), torch.float64: (1, "<f8")}
_CODES = {0: (torch.float32, "<f4"), 1: (torch.float64, "<f8")}


def _tensors(field: DistortionField):
    out = list(field.encoder.planes)
    for mod in (field.decoder.merge, field.decoder.head_x, field.decoder.head_r, field.decoder.head_s):
        for layer in (mod[0], mod[2]):
            out.extend([layer.weight, layer.bias])
    return out


def save_field(path, field: DistortionField) -> None:
    """Layout: magic, 7 x uint32 (version, hidden, base_res, n_levels, width,
    additive_scale, dtype code), n_levels x uint32 multipliers, 6 x float64
    bbox, then every tensor row-major in the stored dtype: planes per level
    (9, hidden, R+1, R+1), then weight/bias for merge, head_x, head_r, head_s."""
    cfg = field.cfg
    dt = field.encoder.planes[0].dtype
    code, np_dt = _DTYPES[dt]
    head = MAGIC + struct.pack("<7I", 1, cfg.hidden, cfg.base_res, len(cfg.levels), cfg.width, int(cfg.additive_scale), code)
    head += struct.pack(f"<{len(cfg.levels)}I", *cfg.levels)
    head += field.bbox.double().numpy().astype("<f8").tobytes()
    with open(path, "wb") as f:
        f.write(head)
        for t in _tensors(field):
            f.write(t.detach().cpu().numpy().astype(np_dt).tobytes())


def load_field(path) -> DistortionField:
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: not a field checkpoint")
    off = len(MAGIC)
    version, hidden, base_res, n_levels, width, additive, code = struct.unpack_from("<7I", raw, off)
    if version != 1:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off += 28
    levels = struct.unpack_from(f"<{n_levels}I", raw, off)
    off += 4 * n_levels
    bbox = np.frombuffer(raw, "<f8", 6, off).reshape(2, 3).copy()
    off += 48
    dt, np_dt = _CODES[code]
    cfg = FieldConfig(hidden, base_res, tuple(levels), width, bool(additive), 0.0)
    field = DistortionField(cfg, bbox, dtype=dt)
    itemsize = np.dtype(np_dt).itemsize
    with torch.no_grad():
        for t in _tensors(field):
            n = t.numel()
            t.copy_(torch.from_numpy(np.frombuffer(raw, np_dt, n, off).reshape(t.shape).copy()))
            off += n * itemsize
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    return field
