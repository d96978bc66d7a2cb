"""Skeletons, 6D rotations, forward kinematics and the per-frame feature layout.

A frame is laid out as ``[r (J*6), vx, py, vz, u (18)]`` where ``r`` holds
local joint rotations in 6D form (first two matrix columns), ``vx``/``vz``
are world-frame root displacements per frame, ``py`` is the root height and
``u`` stacks the per-frame change of the root's 6D rotation followed by the
world velocities of the left hand, right hand, left foot and right foot.

World frame is y-up, right-handed, meters.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import (DegenerateRotation, DimensionMismatch, IndexOutOfRange,
                     NotARotation, SkeletonError, TooShort)

EXTREMITY_NAMES = ("LeftHand", "RightHand", "LeftFoot", "RightFoot")
STD_FLOOR = 1e-6


@dataclass(frozen=True)
class Joint:
    name: str
    parent: int | None
    offset: np.ndarray

    def __post_init__(self):
        off = np.asarray(self.offset, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(off)):
            raise SkeletonError(f"joint {self.name!r} has a non-finite offset")
        off.setflags(write=False)
        object.__setattr__(self, "offset", off)


@dataclass(frozen=True, eq=False)
class Skeleton:
    """Joint hierarchy in topological order (parents precede children).

    ``hip_height`` defaults to the rest-pose height of the root above the
    lowest joint.
    """

    joints: tuple
    root_index: int = 0
    hip_height: float | None = None
    name: str = "skeleton"

    def __post_init__(self):
        joints = tuple(self.joints)
        object.__setattr__(self, "joints", joints)
        if not joints:
            raise SkeletonError("skeleton needs at least one joint")
        names = [j.name for j in joints]
        if len(set(names)) != len(names):
            raise SkeletonError("joint names must be unique")
        roots = [i for i, j in enumerate(joints) if j.parent is None]
        if roots != [self.root_index]:
            raise SkeletonError(f"expected exactly one root at {self.root_index}, found {roots}")
        for i, j in enumerate(joints):
            if j.parent is not None and not (0 <= j.parent < i):
                raise SkeletonError(f"joint {j.name!r} parent {j.parent} breaks topological order")
        if self.hip_height is None:
            pos, _ = fk_pose(self, np.broadcast_to(np.eye(3), (len(joints), 3, 3)), np.zeros(3))
            h = float(-pos[:, 1].min())
            if h <= 0:
                raise SkeletonError("cannot infer hip_height; pass it explicitly")
            object.__setattr__(self, "hip_height", h)
        if not self.hip_height > 0:
            raise SkeletonError("hip_height must be positive")

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def names(self) -> list[str]:
        return [j.name for j in self.joints]

    @property
    def parents(self) -> np.ndarray:
        return np.array([-1 if j.parent is None else j.parent for j in self.joints])

    @property
    def offsets(self) -> np.ndarray:
        return np.stack([j.offset for j in self.joints])

    @property
    def feature_dim(self) -> int:
        return 6 * self.n_joints + 21

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise SkeletonError(f"no joint named {name!r}") from None

    def find(self, suffix: str) -> int | None:
        """Index of the joint whose name ends with ``suffix`` (case-insensitive)."""
        suffix = suffix.lower()
        for i, n in enumerate(self.names):
            if n.lower().endswith(suffix) or n.lower().split(":")[-1] == suffix:
                return i
        return None

    @property
    def extremities(self) -> tuple[int, int, int, int]:
        """Hands and feet; missing ones fall back to the root."""
        return tuple(self.root_index if (i := self.find(n)) is None else i for n in EXTREMITY_NAMES)

    def children(self, index: int) -> list[int]:
        return [i for i, j in enumerate(self.joints) if j.parent == index]

    def descendants(self, index: int) -> set[int]:
        out = set()
        for i, j in enumerate(self.joints):
            if j.parent is not None and (j.parent == index or j.parent in out):
                out.add(i)
        return out

    def scaled(self, ratio: float, name: str | None = None) -> "Skeleton":
        return Skeleton(tuple(Joint(j.name, j.parent, j.offset * ratio) for j in self.joints),
                        self.root_index, self.hip_height * ratio, name or self.name)


def feature_slices(n_joints: int) -> dict[str, slice | int]:
    r = 6 * n_joints
    return {
        "rot": slice(0, r),
        "vx": r,
        "py": r + 1,
        "vz": r + 2,
        "u": slice(r + 3, r + 21),
        "root_ang": slice(r + 3, r + 9),
        "extremity_vel": slice(r + 9, r + 21),
    }


@dataclass(frozen=True, eq=False)
class MotionClip:
    frames: np.ndarray
    skeleton: Skeleton
    fps: float = 30.0
    keyframe_indices: tuple = field(default=())

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2:
            raise DimensionMismatch("frames must be an N x D matrix")
        if frames.shape[0] < 2:
            raise TooShort(f"a clip needs at least 2 frames, got {frames.shape[0]}")
        if frames.shape[1] != self.skeleton.feature_dim:
            raise DimensionMismatch(
                f"feature width {frames.shape[1]} != 6J+21 = {self.skeleton.feature_dim}")
        if not np.all(np.isfinite(frames)):
            raise ValueError("clip features must be finite")
        kf = tuple(int(k) for k in self.keyframe_indices)
        if any(b <= a for a, b in zip(kf, kf[1:])):
            raise ValueError("keyframe indices must be strictly increasing")
        if kf and (kf[0] < 0 or kf[-1] >= frames.shape[0]):
            raise IndexOutOfRange(f"keyframe indices {kf} outside [0, {frames.shape[0]})")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "keyframe_indices", kf)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def with_frames(self, frames, keyframe_indices=None) -> "MotionClip":
        kf = self.keyframe_indices if keyframe_indices is None else keyframe_indices
        return MotionClip(frames, self.skeleton, self.fps, kf)


def keyframe_mask(n_frames: int, dim: int, indices) -> np.ndarray:
    """N x D binary mask with zero rows at keyframes and one rows elsewhere."""
    m = np.ones((n_frames, dim))
    idx = np.asarray(list(indices), dtype=int)
    if idx.size and (idx.min() < 0 or idx.max() >= n_frames):
        raise IndexOutOfRange(f"keyframe index outside [0, {n_frames})")
    m[idx] = 0.0
    return m


# --- 6D rotations -----------------------------------------------------------

def rot6d_to_matrix(r, eps: float = 1e-8) -> np.ndarray:
    """Gram-Schmidt decode of ``(..., 6)`` arrays into rotation matrices."""
    r = np.asarray(r, dtype=np.float64)
    a1, a2 = r[..., :3], r[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1)
    if np.any(n1 < eps) or np.any(np.linalg.norm(a2, axis=-1) < eps):
        raise DegenerateRotation("6D rotation has a near-zero column")
    b1 = a1 / n1[..., None]
    w = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    nw = np.linalg.norm(w, axis=-1)
    if np.any(nw < eps * np.linalg.norm(a2, axis=-1)):
        raise DegenerateRotation("6D rotation columns are parallel")
    b2 = w / nw[..., None]
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def matrix_to_rot6d(R, tol: float = 1e-6) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape[-2:] != (3, 3):
        raise NotARotation(f"expected (..., 3, 3), got {R.shape}")
    err = np.abs(np.swapaxes(R, -1, -2) @ R - np.eye(3)).max(initial=0.0)
    if err > tol or np.any(np.linalg.det(R) <= 0):
        raise NotARotation(f"matrix is not a proper rotation (orthonormality error {err:.2e})")
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


# --- kinematics -------------------------------------------------------------

def fk_pose(skeleton: Skeleton, local_rots, root_pos):
    """Global joint positions and rotations from local rotations.

    ``local_rots`` is ``(..., J, 3, 3)`` and ``root_pos`` is ``(..., 3)``.
    The root's local rotation is its global rotation.
    """
    local_rots = np.asarray(local_rots, dtype=np.float64)
    root_pos = np.asarray(root_pos, dtype=np.float64)
    J = skeleton.n_joints
    batch = np.broadcast_shapes(local_rots.shape[:-3], root_pos.shape[:-1])
    pos = np.empty(batch + (J, 3))
    rot = np.empty(batch + (J, 3, 3))
    for i, joint in enumerate(skeleton.joints):
        if joint.parent is None:
            rot[..., i, :, :] = local_rots[..., i, :, :]
            pos[..., i, :] = root_pos + joint.offset
        else:
            p = joint.parent
            rot[..., i, :, :] = rot[..., p, :, :] @ local_rots[..., i, :, :]
            pos[..., i, :] = pos[..., p, :] + rot[..., p, :, :] @ joint.offset
    return pos, rot


def root_trajectory(frames: np.ndarray, n_joints: int) -> np.ndarray:
    """Root positions integrated from per-frame displacements; frame 0 at x=z=0."""
    s = feature_slices(n_joints)
    traj = np.zeros(frames.shape[:-1] + (3,))
    vx = frames[..., 1:, s["vx"]]
    vz = frames[..., 1:, s["vz"]]
    traj[..., 1:, 0] = np.cumsum(vx, axis=-1)
    traj[..., 1:, 2] = np.cumsum(vz, axis=-1)
    traj[..., 1] = frames[..., s["py"]]
    return traj


def clip_to_poses(clip: MotionClip):
    """Decode a clip into ``(root_positions (N,3), local_rotations (N,J,3,3))``."""
    J = clip.skeleton.n_joints
    rots = rot6d_to_matrix(clip.frames[:, :6 * J].reshape(-1, J, 6))
    # the root joint's rest offset is part of its position; remove it so that
    # fk_pose(root_pos) reproduces the integrated trajectory
    root = root_trajectory(clip.frames, J) - clip.skeleton.joints[clip.skeleton.root_index].offset
    return root, rots


def forward_kinematics(clip: MotionClip) -> np.ndarray:
    """N x J x 3 global joint positions of a clip."""
    root, rots = clip_to_poses(clip)
    pos, _ = fk_pose(clip.skeleton, rots, root)
    return pos


def _first_copies_second(d: np.ndarray) -> np.ndarray:
    """Prepend a copy of the first difference so the result has one row per frame."""
    return np.concatenate([d[:1], d], axis=0)


def extract_features(root_pos, local_rots, skeleton: Skeleton, fps: float = 30.0,
                     keyframe_indices=()) -> MotionClip:
    """Build a :class:`MotionClip` from root positions ``(N,3)`` and local rotations ``(N,J,3,3)``."""
    root_pos = np.asarray(root_pos, dtype=np.float64)
    local_rots = np.asarray(local_rots, dtype=np.float64)
    N = root_pos.shape[0]
    if N < 2:
        raise TooShort(f"need at least 2 frames, got {N}")
    J = skeleton.n_joints
    if local_rots.shape != (N, J, 3, 3):
        raise DimensionMismatch(f"local rotations must be {(N, J, 3, 3)}, got {local_rots.shape}")
    pos, _ = fk_pose(skeleton, local_rots, root_pos)
    root_world = pos[:, skeleton.root_index]
    r6 = matrix_to_rot6d(local_rots)
    vel = _first_copies_second(np.diff(root_world, axis=0))
    root6 = r6[:, skeleton.root_index]
    ang = _first_copies_second(np.diff(root6, axis=0))
    ext = pos[:, list(skeleton.extremities)]
    ext_vel = _first_copies_second(np.diff(ext, axis=0)).reshape(N, 12)
    frames = np.concatenate([
        r6.reshape(N, 6 * J),
        vel[:, :1], root_world[:, 1:2], vel[:, 2:3],
        ang, ext_vel,
    ], axis=1)
    return MotionClip(frames, skeleton, fps, keyframe_indices)


def reextract(clip: MotionClip) -> MotionClip:
    """``extract_features`` applied to the poses decoded from ``clip``."""
    root, rots = clip_to_poses(clip)
    return extract_features(root, rots, clip.skeleton, clip.fps, clip.keyframe_indices)


# --- normalization ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.maximum(np.asarray(self.std, dtype=np.float64), STD_FLOOR)
        if mean.shape != std.shape or mean.ndim != 1:
            raise DimensionMismatch("mean and std must be D-vectors of equal length")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def from_clips(cls, clips) -> "NormStats":
        data = np.concatenate([c.frames for c in clips], axis=0)
        return cls.from_frames(data)

    @classmethod
    def from_frames(cls, frames) -> "NormStats":
        frames = np.asarray(frames, dtype=np.float64)
        return cls(frames.mean(axis=0), frames.std(axis=0))

    @classmethod
    def identity(cls, dim: int) -> "NormStats":
        return cls(np.zeros(dim), np.ones(dim))

    def _check(self, x):
        if np.shape(x)[-1] != self.dim:
            raise DimensionMismatch(f"feature width {np.shape(x)[-1]} != stats width {self.dim}")

    def apply(self, x):
        self._check(x)
        return (x - self.mean) / self.std

    def invert(self, x):
        self._check(x)
        return x * self.std + self.mean


def normalize(clip: MotionClip, stats: NormStats) -> MotionClip:
    """Z-scored copy of ``clip`` (its rotation rows are no longer valid 6D values)."""
    return clip.with_frames(stats.apply(clip.frames))


def denormalize(clip: MotionClip, stats: NormStats) -> MotionClip:
    return clip.with_frames(stats.invert(clip.frames))
