"""Small math helpers shared across modules: quaternions, frames, sampling."""

from __future__ import annotations

import numpy as np
import torch

# DC basis value Y_00 = 1 / (2 sqrt(pi)); converts a flat color to / from the
# constant coefficient of a spherical-harmonics expansion.
SH_DC = 0.28209479177387814


def quat_normalize(q):
    """Normalize quaternion(s) along the last axis; numpy or torch."""
    if isinstance(q, torch.Tensor):
        return q / q.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    q = np.asarray(q, dtype=np.float64)
    return q / np.maximum(np.linalg.norm(q, axis=-1, keepdims=True), 1e-12)


def quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    """Unit quaternion(s) (w, x, y, z) -> rotation matrix/matrices [..., 3, 3]."""
    q = quat_normalize(q)
    w, x, y, z = q.unbind(-1)
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], dim=-1)
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], dim=-1)
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], dim=-1)
    return torch.stack([row0, row1, row2], dim=-2)


def rotmat_to_quat(m: np.ndarray) -> np.ndarray:
    """Rotation matrix -> unit quaternion (w, x, y, z). Shepperd's method."""
    t = np.trace(m)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        w, x, y, z = 0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        w, x, y, z = (m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        w, x, y, z = (m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        w, x, y, z = (m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s
    q = np.array([w, x, y, z], dtype=np.float64)
    return q / np.linalg.norm(q)


def frame_from_normal(n: torch.Tensor) -> torch.Tensor:
    """Right-handed frames [..., 3, 3] whose columns are (t1, t2, n).

    The first tangent is the projection of world-x onto the plane; falls back
    to world-y where the normal is (anti)parallel to x.
    """
    n = n / n.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    ex = torch.zeros_like(n)
    ex[..., 0] = 1.0
    ey = torch.zeros_like(n)
    ey[..., 1] = 1.0
    ref = torch.where((n[..., 0:1].abs() > 0.99), ey, ex)
    t1 = ref - (ref * n).sum(-1, keepdim=True) * n
    t1 = t1 / t1.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    t2 = torch.cross(n, t1, dim=-1)
    return torch.stack([t1, t2, n], dim=-1)


def quat_from_rotmats(mats: torch.Tensor) -> torch.Tensor:
    """Batch rotation matrices [N, 3, 3] -> quaternions [N, 4] (w, x, y, z)."""
    out = np.empty((mats.shape[0], 4), dtype=np.float64)
    m = mats.detach().cpu().numpy()
    for i in range(m.shape[0]):
        out[i] = rotmat_to_quat(m[i])
    return torch.as_tensor(out, dtype=mats.dtype)


def fibonacci_sphere(n: int, dtype=np.float64) -> np.ndarray:
    """n near-uniform unit directions (spherical Fibonacci lattice), [n, 3]."""
    i = np.arange(n, dtype=np.float64) + 0.5
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1).astype(dtype)


def rgb_to_sh_dc(rgb):
    """Flat color in [0,1] -> DC coefficient so that eval(+0.5 offset) returns it."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_DC


def sh_dc_to_rgb(dc):
    return np.asarray(dc, dtype=np.float64) * SH_DC + 0.5


def inverse_sigmoid(x):
    x = np.clip(np.asarray(x, dtype=np.float64), 1e-7, 1 - 1e-7)
    return np.log(x / (1 - x))
