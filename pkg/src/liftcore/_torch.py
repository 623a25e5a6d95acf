"""Small differentiable geometry helpers shared by the torch code paths."""

import numpy as np
import torch


def skew(w: torch.Tensor) -> torch.Tensor:
    z = torch.zeros_like(w[..., 0])
    return torch.stack(
        [
            torch.stack([z, -w[..., 2], w[..., 1]], -1),
            torch.stack([w[..., 2], z, -w[..., 0]], -1),
            torch.stack([-w[..., 1], w[..., 0], z], -1),
        ],
        -2,
    )


def so3_exp(w: torch.Tensor) -> torch.Tensor:
    return torch.linalg.matrix_exp(skew(w))


def quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    """(N, 4) wxyz quaternions (normalized here) to (N, 3, 3) rotations."""
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    return torch.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        -1,
    ).reshape(q.shape[:-1] + (3, 3))


def from_array(a, dtype=None) -> torch.Tensor:
    """Tensor from a (possibly read-only) array, copying so torch owns writable memory."""
    if torch.is_tensor(a):
        return a if dtype is None else a.to(dtype)
    t = torch.from_numpy(np.array(a))
    return t if dtype is None else t.to(dtype)
