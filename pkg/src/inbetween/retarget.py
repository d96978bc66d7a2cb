"""Kinematic retargeting between skeletons through a named joint mapping.

Global joint rotations are copied across the mapping. The root position
is scaled by the ratio of hip heights, and joints without a partner keep
their rest (identity) local rotation.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import BadRatio, MappingMismatch
from .motion import MotionClip, Skeleton, clip_to_poses, extract_features, fk_pose
from .physics import ArticulatedCharacter, Box, Environment, SimState, transform_coordinates
from .rotations import matrix_log, matrix_to_quat


class Pose(NamedTuple):
    """``root_pos`` is the argument of :func:`inbetween.motion.fk_pose` (root joint minus its offset)."""

    root_pos: np.ndarray     # (..., 3)
    local_rots: np.ndarray   # (..., J, 3, 3)


@dataclass(frozen=True)
class JointMapping:
    pairs: tuple             # (source index, target index)
    source: str = "source"
    target: str = "target"

    def __post_init__(self):
        pairs = tuple((int(a), int(b)) for a, b in self.pairs)
        object.__setattr__(self, "pairs", pairs)
        src, dst = [p[0] for p in pairs], [p[1] for p in pairs]
        if len(set(src)) != len(src) or len(set(dst)) != len(dst):
            raise MappingMismatch("joint mapping must be injective on both sides")

    @classmethod
    def from_names(cls, names, src: Skeleton, dst: Skeleton) -> "JointMapping":
        pairs = []
        for a, b in names:
            if a not in src.names:
                raise MappingMismatch(f"{a!r} is not a joint of {src.name}")
            if b not in dst.names:
                raise MappingMismatch(f"{b!r} is not a joint of {dst.name}")
            pairs.append((src.index(a), dst.index(b)))
        m = cls(tuple(pairs), src.name, dst.name)
        m.validate(src, dst)
        return m

    @classmethod
    def identity(cls, skeleton: Skeleton) -> "JointMapping":
        return cls(tuple((i, i) for i in range(skeleton.n_joints)), skeleton.name, skeleton.name)

    def inverse(self) -> "JointMapping":
        return JointMapping(tuple((b, a) for a, b in self.pairs), self.target, self.source)

    def validate(self, src: Skeleton, dst: Skeleton) -> None:
        for a, b in self.pairs:
            if not (0 <= a < src.n_joints and 0 <= b < dst.n_joints):
                raise MappingMismatch(f"pair {(a, b)} out of range for {src.name} -> {dst.name}")
        if (src.root_index, dst.root_index) not in self.pairs:
            raise MappingMismatch("the roots must be mapped onto each other")

    @property
    def target_indices(self) -> list[int]:
        return [b for _, b in self.pairs]

    def names(self, src: Skeleton, dst: Skeleton) -> list[tuple[str, str]]:
        return [(src.names[a], dst.names[b]) for a, b in self.pairs]


def parse_mapping(text: str) -> list[tuple[str, str]]:
    """``source -> target`` per line, ``#`` starts a comment."""
    pairs = []
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split("->")]
        if len(parts) != 2 or not all(parts):
            raise MappingMismatch(f"line {no}: expected 'source -> target'")
        pairs.append((parts[0], parts[1]))
    return pairs


def format_mapping(mapping: JointMapping, src: Skeleton, dst: Skeleton) -> str:
    return "".join(f"{a} -> {b}\n" for a, b in mapping.names(src, dst))


def load_mapping(path, src: Skeleton, dst: Skeleton) -> JointMapping:
    with open(path) as fh:
        return JointMapping.from_names(parse_mapping(fh.read()), src, dst)


def _global_rots(skeleton: Skeleton, local_rots):
    _, rot = fk_pose(skeleton, local_rots, np.zeros(np.shape(local_rots)[:-3] + (3,)))
    return rot


def scale_root(root_pos, src: Skeleton, dst: Skeleton, ratio: float | None = None):
    """Scale the root joint's world position and re-express it for ``dst``."""
    ratio = dst.hip_height / src.hip_height if ratio is None else ratio
    joint = np.asarray(root_pos, dtype=np.float64) + src.joints[src.root_index].offset
    return joint * ratio - dst.joints[dst.root_index].offset


def retarget_pose(pose: Pose, mapping: JointMapping, src: Skeleton, dst: Skeleton) -> Pose:
    """Copy mapped global rotations onto ``dst`` and rescale the root. Works on batches."""
    mapping.validate(src, dst)
    src_rot = _global_rots(src, pose.local_rots)
    batch = src_rot.shape[:-3]
    target = {b: a for a, b in mapping.pairs}
    glob = np.empty(batch + (dst.n_joints, 3, 3))
    local = np.empty_like(glob)
    for i, j in enumerate(dst.joints):
        parent = np.broadcast_to(np.eye(3), batch + (3, 3)) if j.parent is None else glob[..., j.parent, :, :]
        if i in target:
            glob[..., i, :, :] = src_rot[..., target[i], :, :]
            local[..., i, :, :] = np.swapaxes(parent, -1, -2) @ glob[..., i, :, :]
        else:
            local[..., i, :, :] = np.eye(3)
            glob[..., i, :, :] = parent
    return Pose(scale_root(pose.root_pos, src, dst), local)


def retarget_keyframes(keyframes: Pose, indices, mapping: JointMapping, src: Skeleton, canonical: Skeleton,
                       fps: float = 30.0) -> np.ndarray:
    """Feature rows ``(K, D)`` on ``canonical`` for poses given at frame ``indices``.

    Velocity channels use the difference to an adjacent keyframe when one
    exists (previous preferred, next otherwise) and are zero for isolated
    keyframes.
    """
    indices = [int(i) for i in indices]
    pose = retarget_pose(keyframes, mapping, src, canonical)
    K = len(indices)
    if pose.root_pos.shape[0] != K:
        raise MappingMismatch(f"{pose.root_pos.shape[0]} poses for {K} indices")
    where = {k: n for n, k in enumerate(indices)}
    rows = []
    for n, k in enumerate(indices):
        if k - 1 in where:
            pair, take = [where[k - 1], n], 1
        elif k + 1 in where:
            pair, take = [n, where[k + 1]], 0
        else:
            pair, take = [n, n], 0
        clip = extract_features(pose.root_pos[pair], pose.local_rots[pair], canonical, fps)
        rows.append(clip.frames[take])
    return np.stack(rows)


def scale_colliders(colliders, ratio: float) -> tuple:
    if not (np.isfinite(ratio) and ratio > 0):
        raise BadRatio(f"ratio must be positive and finite, got {ratio}")
    return tuple(Box(b.center * ratio, b.extent * ratio) for b in colliders)


def scale_environment(env: Environment, ratio: float) -> Environment:
    boxes = scale_colliders(env.boxes, ratio)
    ground = None if env.ground is None else env.ground * ratio
    return Environment(ground, boxes, env.friction, env.gravity, env.contact)


# reference motion on a simulated character ----------------------------------------

def local_to_angles(character: ArticulatedCharacter, local_rots) -> np.ndarray:
    """Hinge angles reproducing ``local_rots`` as closely as the DOFs allow.

    One hinge takes the twist about its axis. Two or three hinges about
    coordinate axes are solved as intrinsic Euler angles in DOF order.
    """
    local_rots = np.asarray(local_rots, dtype=np.float64)
    batch = local_rots.shape[:-3]
    out = np.zeros(batch + (character.dof_count,))
    flat = local_rots.reshape((-1,) + local_rots.shape[-3:])
    col = 0
    for i, body in enumerate(character.bodies):
        n = len(body.dofs)
        if not n or (i == character.skeleton.root_index and character.root == "free"):
            col += n
            continue
        R = flat[:, i]
        if n == 1:
            q = matrix_to_quat(R)
            ang = 2 * np.arctan2(q[:, 1:] @ body.dofs[0].axis, q[:, 0])
            out.reshape(-1, character.dof_count)[:, col] = np.where(ang > np.pi, ang - 2 * np.pi, ang)
        else:
            letters = []
            for d in body.dofs:
                k = int(np.argmax(np.abs(d.axis)))
                if not np.isclose(abs(d.axis[k]), 1.0):
                    raise MappingMismatch("multi-hinge joints must use coordinate axes")
                letters.append("XYZ"[k])
            if n == 2:
                letters.append(next(c for c in "XYZ" if c not in letters))
            sign = np.array([np.sign(d.axis[int(np.argmax(np.abs(d.axis)))]) for d in body.dofs])
            euler = Rotation.from_matrix(R).as_euler("".join(letters))[:, :n]
            out.reshape(-1, character.dof_count)[:, col:col + n] = euler * sign
        col += n
    return out


@dataclass(frozen=True, eq=False)
class ReferenceMotion:
    """Reference trajectory on a character; arrays are indexed by frame first."""

    positions: np.ndarray           # (N, J, 3)
    rotations: np.ndarray           # (N, J, 3, 3) global
    linear_velocities: np.ndarray   # (N, J, 3)
    angular_velocities: np.ndarray  # (N, J, 3)
    q: np.ndarray                   # (N, nq)
    qdot: np.ndarray                # (N, nv)
    mapped: tuple                   # character joints tracked by the reward
    fps: float

    @property
    def n_frames(self) -> int:
        return self.positions.shape[0]

    def state(self, frame, n_envs: int = 1) -> SimState:
        frame = np.broadcast_to(np.asarray(frame), (n_envs,))
        return SimState(self.q[frame].copy(), self.qdot[frame].copy(), frame / self.fps,
                        np.zeros((n_envs, self.positions.shape[1]), dtype=bool))

    def transformed(self, R, t) -> "ReferenceMotion":
        """The same motion after the rigid world transform ``x -> R x + t``."""
        R, t = np.asarray(R, dtype=np.float64), np.asarray(t, dtype=np.float64)
        q, qdot = transform_coordinates(self.q, self.qdot, R, t, self.q.shape[1] - self.qdot.shape[1] == 1)
        return ReferenceMotion(self.positions @ R.T + t, R @ self.rotations, self.linear_velocities @ R.T,
                               self.angular_velocities @ R.T, q, qdot, self.mapped, self.fps)


def _angular_velocity(rot, fps):
    """Central-difference world angular velocity ``(N, J, 3)`` of rotations ``(N, J, 3, 3)``."""
    N = rot.shape[0]
    out = np.zeros(rot.shape[:-2] + (3,))
    if N < 2:
        return out
    out[1:-1] = matrix_log(rot[2:] @ np.swapaxes(rot[:-2], -1, -2)) * fps / 2
    out[0] = matrix_log(rot[1] @ np.swapaxes(rot[0], -1, -2)) * fps
    out[-1] = matrix_log(rot[-1] @ np.swapaxes(rot[-2], -1, -2)) * fps
    return out


def _gradient(x, fps):
    return np.gradient(x, axis=0) * fps if x.shape[0] > 1 else np.zeros_like(x)


def reference_features(clip: MotionClip, mapping: JointMapping, character: ArticulatedCharacter,
                       root_offset=None) -> ReferenceMotion:
    """Retarget a canonical clip onto ``character`` and differentiate it into reference features.

    ``root_offset`` shifts the whole trajectory in world space (the clip's
    first frame starts at the x/z origin).
    """
    src, dst = clip.skeleton, character.skeleton
    root, rots = clip_to_poses(clip)
    pose = retarget_pose(Pose(root, rots), mapping, src, dst)
    root_pos = pose.root_pos + (0 if root_offset is None else np.asarray(root_offset, dtype=np.float64))
    local = pose.local_rots
    angles = local_to_angles(character, local)
    # rebuild the local rotations the hinges can actually express
    N = root.shape[0]
    q = np.zeros((N, character.nq))
    if character.root == "free":
        q[:, :3] = root_pos + dst.joints[dst.root_index].offset
        q[:, 3:7] = matrix_to_quat(local[:, dst.root_index])
    q[:, character.nq - character.dof_count:] = angles
    local = character.local_rotations(q)
    pos, glob = fk_pose(dst, local, character.root_position(q) - dst.joints[dst.root_index].offset)
    lin = _gradient(pos, clip.fps)
    ang = _angular_velocity(glob, clip.fps)
    qdot = np.zeros((N, character.nv))
    if character.root == "free":
        qdot[:, :3] = ang[:, dst.root_index]
        qdot[:, 3:6] = lin[:, dst.root_index]
    qdot[:, character.base_dim:] = _gradient(np.unwrap(angles, axis=0), clip.fps)
    mapped = tuple(sorted(mapping.target_indices))
    return ReferenceMotion(pos, glob, lin, ang, q, qdot, mapped, clip.fps)
