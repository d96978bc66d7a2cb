"""Differentiable counterparts of the feature decoding in :mod:`inbetween.motion`."""

import numpy as np
import torch

from .motion import Skeleton, feature_slices


def rot6d_to_matrix_t(r: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Gram-Schmidt on ``(..., 6)``; columns ``a, b`` are the first two matrix columns."""
    a, b = r[..., :3], r[..., 3:]
    x = a / a.norm(dim=-1, keepdim=True).clamp_min(eps)
    b = b - (x * b).sum(-1, keepdim=True) * x
    y = b / b.norm(dim=-1, keepdim=True).clamp_min(eps)
    z = torch.cross(x, y, dim=-1)
    return torch.stack([x, y, z], dim=-1)


def root_trajectory_t(frames: torch.Tensor, n_joints: int) -> torch.Tensor:
    s = feature_slices(n_joints)
    zero = torch.zeros_like(frames[..., :1, 0])
    x = torch.cat([zero, torch.cumsum(frames[..., 1:, s["vx"]], -1)], -1)
    z = torch.cat([zero, torch.cumsum(frames[..., 1:, s["vz"]], -1)], -1)
    return torch.stack([x, frames[..., s["py"]], z], dim=-1)


def fk_t(skeleton: Skeleton, local_rots: torch.Tensor, root_pos: torch.Tensor) -> torch.Tensor:
    """``(..., J, 3, 3)`` local rotations and ``(..., 3)`` root position to ``(..., J, 3)`` positions."""
    offsets = torch.tensor(np.asarray(skeleton.offsets), dtype=local_rots.dtype)
    glob, pos = [None] * skeleton.n_joints, [None] * skeleton.n_joints
    for i, joint in enumerate(skeleton.joints):
        if joint.parent is None:
            glob[i] = local_rots[..., i, :, :]
            pos[i] = root_pos + offsets[i]
        else:
            p = joint.parent
            glob[i] = glob[p] @ local_rots[..., i, :, :]
            pos[i] = pos[p] + (glob[p] @ offsets[i].unsqueeze(-1)).squeeze(-1)
    return torch.stack(pos, dim=-2)


def features_to_positions(frames: torch.Tensor, skeleton: Skeleton) -> torch.Tensor:
    """Global joint positions ``(..., N, J, 3)`` from denormalized features ``(..., N, D)``."""
    J = skeleton.n_joints
    rots = rot6d_to_matrix_t(frames[..., :6 * J].reshape(*frames.shape[:-1], J, 6))
    root = root_trajectory_t(frames, J) - torch.tensor(
        np.asarray(skeleton.joints[skeleton.root_index].offset), dtype=frames.dtype)
    return fk_t(skeleton, rots, root)
