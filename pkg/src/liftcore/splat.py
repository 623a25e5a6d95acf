"""Differentiable Gaussian splatting with per-pixel front-to-back compositing.

Every Gaussian's 3-sigma screen footprint is binned into per-pixel lists in
global view-depth order. Compositing and its hand-derived backward pass are
numba kernels; projection and covariance algebra stay in torch autograd.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
import torch

from liftcore._torch import quat_to_rotmat, so3_exp
from liftcore.core import SH_C0, DepthMap, GaussianCloud, Image, Intrinsics, Pose

NEAR = 0.01
BLUR = 0.3
T_MIN = 1e-4
ALPHA_MAX = 0.99
DEPTH_SENTINEL = 0.0


def sh_to_color(sh: torch.Tensor) -> torch.Tensor:
    return torch.clamp_min(sh * SH_C0 + 0.5, 0.0)


@numba.njit(cache=True)
def _bin(order, x0, x1, y0, y1, width, height):
    """Counting sort of footprints into per-pixel lists, front to back."""
    counts = np.zeros(width * height + 1, np.int64)
    for g in order:
        for y in range(y0[g], y1[g] + 1):
            for x in range(x0[g], x1[g] + 1):
                counts[y * width + x + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    ids = np.empty(offsets[-1], np.int64)
    for g in order:
        for y in range(y0[g], y1[g] + 1):
            for x in range(x0[g], x1[g] + 1):
                p = y * width + x
                ids[fill[p]] = g
                fill[p] += 1
    return offsets, ids


@numba.njit(cache=True)
def _composite(offsets, ids, mx, my, ca, cb, cc, op, col, z, width, t_min, alpha_max):
    hw = len(offsets) - 1
    out_col = np.zeros((hw, 3))
    out_acc = np.zeros(hw)
    out_w = np.zeros(hw)
    out_t = np.ones(hw)
    n_used = np.zeros(hw, np.int64)
    # per-entry kernel value and incoming transmittance, kept for the backward
    gbuf = np.empty(ids.shape[0])
    tbuf = np.empty(ids.shape[0])
    for p in range(hw):
        px = p % width
        py = p // width
        t = 1.0
        k = offsets[p]
        while k < offsets[p + 1]:
            if t < t_min:
                break
            g = ids[k]
            dx = px - mx[g]
            dy = py - my[g]
            gauss = np.exp(-0.5 * (ca[g] * dx * dx + 2.0 * cb[g] * dx * dy + cc[g] * dy * dy))
            alpha = min(alpha_max, op[g] * gauss)
            gbuf[k] = gauss
            tbuf[k] = t
            w = alpha * t
            for ch in range(3):
                out_col[p, ch] += w * col[g, ch]
            out_acc[p] += w * z[g]
            out_w[p] += w
            t *= 1.0 - alpha
            k += 1
        out_t[p] = t
        n_used[p] = k - offsets[p]
    return out_col, out_acc, out_w, out_t, n_used, gbuf, tbuf


@numba.njit(cache=True)
def _composite_backward(offsets, ids, n_used, gbuf, tbuf, mx, my, ca, cb, cc, op, col, z, width, alpha_max, g_col, g_acc, g_w, g_t, t_final):
    n = len(mx)
    d_mx = np.zeros(n)
    d_my = np.zeros(n)
    d_ca = np.zeros(n)
    d_cb = np.zeros(n)
    d_cc = np.zeros(n)
    d_op = np.zeros(n)
    d_col = np.zeros((n, 3))
    d_z = np.zeros(n)
    hw = len(offsets) - 1
    for p in range(hw):
        k0 = offsets[p]
        k1 = k0 + n_used[p]
        if k1 == k0:
            continue
        px = p % width
        py = p // width
        gc0, gc1, gc2 = g_col[p, 0], g_col[p, 1], g_col[p, 2]
        ga = g_acc[p]
        tail = t_final[p] * g_t[p]
        for k in range(k1 - 1, k0 - 1, -1):
            g = ids[k]
            gauss = gbuf[k]
            raw = op[g] * gauss
            alpha = min(alpha_max, raw)
            tk = tbuf[k]
            w = alpha * tk
            dot = col[g, 0] * gc0 + col[g, 1] * gc1 + col[g, 2] * gc2 + z[g] * ga + g_w[p]
            d_col[g, 0] += w * gc0
            d_col[g, 1] += w * gc1
            d_col[g, 2] += w * gc2
            d_z[g] += w * ga
            d_alpha = tk * dot - tail / (1.0 - alpha)
            tail += w * dot
            if raw < alpha_max:
                dx = px - mx[g]
                dy = py - my[g]
                d_op[g] += d_alpha * gauss
                d_pow = d_alpha * raw
                d_ca[g] += -0.5 * dx * dx * d_pow
                d_cb[g] += -dx * dy * d_pow
                d_cc[g] += -0.5 * dy * dy * d_pow
                d_mx[g] += (ca[g] * dx + cb[g] * dy) * d_pow
                d_my[g] += (cb[g] * dx + cc[g] * dy) * d_pow
    return d_mx, d_my, d_ca, d_cb, d_cc, d_op, d_col, d_z


class _Composite(torch.autograd.Function):
    @staticmethod
    def forward(ctx, mx, my, ca, cb, cc, op, col, z, offsets, ids, width):
        arrs = [v.detach().double().numpy() for v in (mx, my, ca, cb, cc, op, col, z)]
        out_col, out_acc, out_w, out_t, n_used, gbuf, tbuf = _composite(offsets, ids, *arrs, width, T_MIN, ALPHA_MAX)
        ctx.state = (offsets, ids, n_used, gbuf, tbuf, arrs, width, out_t)
        dt = mx.dtype
        return tuple(torch.from_numpy(v).to(dt) for v in (out_col, out_acc, out_w, out_t))

    @staticmethod
    def backward(ctx, g_col, g_acc, g_w, g_t):
        offsets, ids, n_used, gbuf, tbuf, arrs, width, out_t = ctx.state
        dt = g_col.dtype
        grads = _composite_backward(
            offsets,
            ids,
            n_used,
            gbuf,
            tbuf,
            *arrs,
            width,
            ALPHA_MAX,
            np.ascontiguousarray(g_col.double().numpy()),
            np.ascontiguousarray(g_acc.double().numpy()),
            np.ascontiguousarray(g_w.double().numpy()),
            np.ascontiguousarray(g_t.double().numpy()),
            out_t,
        )
        return tuple(torch.from_numpy(g).to(dt) for g in grads) + (None, None, None)


def rasterize(means, quats, scales, opacities, colors, cam_rot, cam_t, focal, width, height, background=None):
    """Render ``(color (H,W,3), depth (H,W), alpha (H,W))``.

    ``colors`` are RGB (not SH); ``cam_rot``/``cam_t`` are camera-to-world.
    Projection runs in torch autograd; per-pixel compositing and its
    gradient are the numba kernels above.
    """
    dt = means.dtype
    hw = width * height
    bg = torch.zeros(3, dtype=dt) if background is None else torch.as_tensor(background, dtype=dt)
    pc = (means - cam_t) @ cam_rot
    vis = torch.nonzero(pc[:, 2].detach() > NEAR).squeeze(1)
    zero = means.sum() * 0 + cam_t.sum() * 0 + cam_rot.sum() * 0
    if len(vis) == 0:
        color = bg.expand(height, width, 3) + zero
        return color, torch.full((height, width), DEPTH_SENTINEL, dtype=dt) + zero, torch.zeros((height, width), dtype=dt) + zero
    pc = pc[vis]
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    rs = quat_to_rotmat(quats[vis]) * scales[vis].unsqueeze(1)
    cov3 = rs @ rs.transpose(1, 2)
    zeros = torch.zeros_like(z)
    jac = torch.stack(
        [torch.stack([focal / z, zeros, -focal * x / z**2], -1), torch.stack([zeros, focal / z, -focal * y / z**2], -1)], -2
    )
    tw = jac @ cam_rot.T
    cov2 = tw @ cov3 @ tw.transpose(1, 2)
    a = cov2[:, 0, 0] + BLUR
    b = cov2[:, 0, 1]
    c = cov2[:, 1, 1] + BLUR
    det = a * c - b * b
    mx = focal * x / z + width / 2.0
    my = focal * y / z + height / 2.0

    with torch.no_grad():
        mid = 0.5 * (a + c)
        lam = mid + torch.sqrt(torch.clamp_min(mid * mid - det, 0.0))
        rad = torch.ceil(3.0 * torch.sqrt(lam))
        x0 = torch.clamp(torch.floor(mx - rad), 0, width).long()
        x1 = torch.clamp(torch.ceil(mx + rad), -1, width - 1).long()
        y0 = torch.clamp(torch.floor(my - rad), 0, height).long()
        y1 = torch.clamp(torch.ceil(my + rad), -1, height - 1).long()
        # stable sort with index tie-break fixes the front-to-back order
        order = torch.argsort(z.detach(), stable=True).numpy()
        offsets, ids = _bin(order, x0.numpy(), x1.numpy(), y0.numpy(), y1.numpy(), width, height)

    # alpha is accumulated directly; 1 - T would cancel catastrophically at low coverage
    col, acc, alpha_img, t_final = _Composite.apply(mx, my, c / det, -b / det, a / det, opacities[vis], colors[vis], z, offsets, ids, width)
    safe = torch.where(alpha_img > 1e-8, alpha_img, torch.ones_like(alpha_img))
    depth = torch.where(alpha_img > 1e-8, acc / safe, torch.full_like(acc, DEPTH_SENTINEL))
    col = col + t_final.unsqueeze(1) * bg + zero
    return col.reshape(height, width, 3), depth.reshape(height, width), alpha_img.reshape(height, width)


@dataclass
class RenderOutput:
    color: torch.Tensor  # (H, W, 3)
    depth: torch.Tensor  # (H, W), alpha-normalized expected view depth
    alpha: torch.Tensor  # (H, W)
    inputs: dict | None = None

    def image(self) -> Image:
        return Image.clipped(self.color.detach().double().numpy())

    def depth_map(self) -> DepthMap:
        return DepthMap(self.depth.detach().double().numpy(), "absolute")


def _params(g: GaussianCloud, dtype, requires_grad):
    t = lambda a: torch.tensor(np.asarray(a), dtype=dtype, requires_grad=requires_grad)  # noqa: E731
    return {
        "centers": t(g.centers),
        "scales": t(g.scales),
        "rotations": t(g.rotations),
        "opacities": t(g.opacities),
        "colors": t(g.colors),
        "pose": torch.zeros(6, dtype=dtype, requires_grad=requires_grad),
    }


def render(
    g: GaussianCloud,
    pose: Pose,
    K: Intrinsics,
    width: int | None = None,
    height: int | None = None,
    background=(0.0, 0.0, 0.0),
    dtype=torch.float64,
    requires_grad: bool = False,
) -> RenderOutput:
    """Render a cloud; with ``requires_grad`` the graph is kept for
    :func:`render_backward`. The pose gradient is taken w.r.t. a right
    perturbation ``R exp([w]) , t + d`` stored as ``(w, d)``."""
    width = K.width if width is None else width
    height = K.height if height is None else height
    p = _params(g, dtype, requires_grad)
    with torch.set_grad_enabled(requires_grad):
        rot = torch.tensor(pose.rotation, dtype=dtype) @ so3_exp(p["pose"][:3])
        t = torch.tensor(pose.translation, dtype=dtype) + p["pose"][3:]
        color, depth, alpha = rasterize(
            p["centers"], p["rotations"], p["scales"], p["opacities"], sh_to_color(p["colors"]), rot, t, K.focal, width, height, background
        )
    return RenderOutput(color, depth, alpha, p if requires_grad else None)


def render_backward(out: RenderOutput, grad_color=None, grad_depth=None, grad_alpha=None) -> dict:
    """Chain an upstream loss gradient through a retained forward pass."""
    if out.inputs is None:
        raise ValueError("render output was produced without requires_grad; no forward state retained")
    outs, grads = [], []
    for name, g in (("color", grad_color), ("depth", grad_depth), ("alpha", grad_alpha)):
        if g is None:
            continue
        tgt = getattr(out, name)
        g = torch.as_tensor(np.asarray(g) if not torch.is_tensor(g) else g, dtype=tgt.dtype)
        if g.shape != tgt.shape:
            raise ValueError(f"gradient for {name} has shape {tuple(g.shape)}, forward produced {tuple(tgt.shape)}")
        outs.append(tgt)
        grads.append(g)
    names = list(out.inputs)
    if not outs:
        return {k: np.zeros(tuple(out.inputs[k].shape)) for k in names}
    res = torch.autograd.grad(outs, [out.inputs[k] for k in names], grads, retain_graph=True, allow_unused=True)
    return {k: (np.zeros(tuple(out.inputs[k].shape)) if r is None else r.double().numpy()) for k, r in zip(names, res)}
