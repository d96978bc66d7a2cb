"""Reduced-coordinate articulated rigid-body simulation.

Every body corresponds to one skeleton joint. Its frame sits at the joint and
is rotated by that joint's hinge DOFs, so ``body_kinematics`` reproduces
:func:`inbetween.motion.fk_pose` for the same local rotations. The root is
either free (position plus unit quaternion) or welded to the world.

Spatial quantities are 6-vectors ``(angular; linear)`` expressed in world
coordinates at the world origin. All state arrays carry a leading batch
axis of independent environments.

Generalized velocity layout for a free root: ``(omega_world, root_velocity,
joint rates)``; coordinates: ``(root_position, quaternion_wxyz, angles)``.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, ParseError, SimDiverged, SkeletonError
from .motion import Joint, Skeleton, fk_pose
from .rotations import axis_angle_matrix, quat_mul, quat_normalize, quat_to_matrix, rotvec_to_quat, skew

CONTROL_DT = 1.0 / 30.0
GRAVITY = 9.81
PD_OMEGA = 20.0


@dataclass(frozen=True)
class ContactParams:
    stiffness: float = 3e4
    damping: float = 1e3
    tangential_damping: float = 1e3
    limit_stiffness_ratio: float = 5.0
    max_speed: float = 200.0


@dataclass(frozen=True)
class Dof:
    """Hinge about ``axis`` given in the frame preceding this DOF."""

    axis: np.ndarray
    kp: float | None = None
    kd: float | None = None
    lower: float = -np.inf
    upper: float = np.inf
    torque_limit: float = np.inf

    def __post_init__(self):
        a = np.asarray(self.axis, dtype=np.float64).reshape(3)
        n = np.linalg.norm(a)
        if not n > 0:
            raise SkeletonError("hinge axis must be non-zero")
        object.__setattr__(self, "axis", a / n)
        if self.lower > self.upper:
            raise SkeletonError("joint limit lower > upper")
        if not self.torque_limit > 0:
            raise SkeletonError("torque limit must be positive")


@dataclass(frozen=True)
class Capsule:
    a: np.ndarray
    b: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "a", np.asarray(self.a, dtype=np.float64).reshape(3))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=np.float64).reshape(3))
        if not self.radius > 0:
            raise SkeletonError("capsule radius must be positive")

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.b - self.a))

    @property
    def volume(self) -> float:
        r = self.radius
        return np.pi * r * r * self.length + 4.0 / 3.0 * np.pi * r ** 3


def _capsule_inertia(caps, mass):
    """Center of mass and inertia about it, treating capsules as solid cylinders plus end caps."""
    vols = np.array([c.volume for c in caps])
    masses = mass * vols / vols.sum()
    centers = np.array([(c.a + c.b) / 2 for c in caps])
    com = masses @ centers / mass
    inertia = np.zeros((3, 3))
    for c, m, ctr in zip(caps, masses, centers):
        L, r = c.length, c.radius
        d = c.b - c.a
        u = d / L if L > 1e-12 else np.array([0.0, 1.0, 0.0])
        h = L + 4.0 / 3.0 * r          # stretch the cylinder to carry the cap volume
        i_ax, i_perp = 0.5 * m * r * r, m * (3 * r * r + h * h) / 12.0
        local = i_perp * np.eye(3) + (i_ax - i_perp) * np.outer(u, u)
        s = ctr - com
        inertia += local + m * (s @ s * np.eye(3) - np.outer(s, s))
    return com, inertia


@dataclass(frozen=True)
class Body:
    mass: float
    capsules: tuple = ()
    dofs: tuple = ()
    com: np.ndarray | None = None
    inertia: np.ndarray | None = None
    foot: bool = False

    def __post_init__(self):
        if not self.mass > 0:
            raise SkeletonError("body mass must be positive")
        caps, dofs = tuple(self.capsules), tuple(self.dofs)
        object.__setattr__(self, "capsules", caps)
        object.__setattr__(self, "dofs", dofs)
        if self.com is None or self.inertia is None:
            if not caps:
                raise SkeletonError("a body without capsules needs explicit com and inertia")
            com, inertia = _capsule_inertia(caps, self.mass)
            object.__setattr__(self, "com", com if self.com is None else np.asarray(self.com, float))
            object.__setattr__(self, "inertia", inertia if self.inertia is None else np.asarray(self.inertia, float))
        com = np.asarray(self.com, dtype=np.float64).reshape(3)
        inertia = np.asarray(self.inertia, dtype=np.float64).reshape(3, 3)
        if not np.allclose(inertia, inertia.T, atol=1e-12) or np.linalg.eigvalsh(inertia).min() <= 0:
            raise SkeletonError("inertia must be symmetric positive definite")
        object.__setattr__(self, "com", com)
        object.__setattr__(self, "inertia", inertia)


@dataclass(frozen=True, eq=False)
class ArticulatedCharacter:
    skeleton: Skeleton
    bodies: tuple
    root: str = "free"
    name: str = "character"
    kp: np.ndarray = field(init=False, repr=False)
    kd: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        bodies = tuple(self.bodies)
        object.__setattr__(self, "bodies", bodies)
        if len(bodies) != self.skeleton.n_joints:
            raise SkeletonError(f"{len(bodies)} bodies for {self.skeleton.n_joints} joints")
        if self.root not in ("free", "fixed"):
            raise SkeletonError(f"root must be 'free' or 'fixed', not {self.root!r}")
        if self.root == "free" and bodies[self.skeleton.root_index].dofs:
            raise SkeletonError("a free root body cannot carry hinge DOFs")
        dof_body, dofs = [], []
        for i, b in enumerate(bodies):
            for d in b.dofs:
                dof_body.append(i)
                dofs.append(d)
        object.__setattr__(self, "dof_body", np.array(dof_body, dtype=int))
        object.__setattr__(self, "dof_list", tuple(dofs))
        nb = self.base_dim
        body_cols = [[] for _ in bodies]
        for k, i in enumerate(dof_body):
            body_cols[i].append(nb + k)
        if nb:
            body_cols[self.skeleton.root_index] = list(range(nb))
        object.__setattr__(self, "body_cols", tuple(tuple(c) for c in body_cols))
        chain = np.zeros((len(bodies), self.nv), dtype=bool)
        for i, j in enumerate(self.skeleton.joints):
            if j.parent is not None:
                chain[i] = chain[j.parent]
            chain[i, list(body_cols[i])] = True
        object.__setattr__(self, "chain", chain)
        spheres = [(i, c.a, c.radius) for i, b in enumerate(bodies) for c in b.capsules] + \
                  [(i, c.b, c.radius) for i, b in enumerate(bodies) for c in b.capsules
                   if np.linalg.norm(c.b - c.a) > 1e-12]
        object.__setattr__(self, "sphere_body", np.array([s[0] for s in spheres], dtype=int))
        object.__setattr__(self, "sphere_local", np.array([s[1] for s in spheres]).reshape(-1, 3))
        object.__setattr__(self, "sphere_radius", np.array([s[2] for s in spheres]))
        object.__setattr__(self, "foot_mask", np.array([b.foot for b in bodies]))
        for attr in ("lower", "upper", "torque_limit"):
            object.__setattr__(self, attr, np.array([getattr(d, attr) for d in dofs], dtype=np.float64))
        # default gains from the composite inertia about each axis at rest
        ieff = self.effective_inertia()
        object.__setattr__(self, "i_eff", ieff)
        kp = np.array([PD_OMEGA ** 2 * ie if d.kp is None else d.kp for d, ie in zip(dofs, ieff)])
        kd = np.array([2.0 * np.sqrt(p * ie) if d.kd is None else d.kd for d, p, ie in zip(dofs, kp, ieff)])
        object.__setattr__(self, "kp", kp)
        object.__setattr__(self, "kd", kd)

    @property
    def dof_count(self) -> int:
        return len(self.dof_list)

    @property
    def base_dim(self) -> int:
        return 6 if self.root == "free" else 0

    @property
    def nv(self) -> int:
        return self.base_dim + self.dof_count

    @property
    def nq(self) -> int:
        return (7 if self.root == "free" else 0) + self.dof_count

    @property
    def n_bodies(self) -> int:
        return len(self.bodies)

    @property
    def hip_height(self) -> float:
        return self.skeleton.hip_height

    @property
    def total_mass(self) -> float:
        return float(sum(b.mass for b in self.bodies))

    def effective_inertia(self) -> np.ndarray:
        """Diagonal of the joint-space mass matrix at the rest pose."""
        if not self.dof_count:
            return np.zeros(0)
        M = mass_matrix(self, self.rest_state().q)[0]
        return np.diag(M)[self.base_dim:].copy()

    def rest_q(self, root_position=None) -> np.ndarray:
        q = np.zeros(self.nq)
        if self.root == "free":
            # default: standing with the root at hip height
            q[:3] = (0.0, self.hip_height, 0.0) if root_position is None else root_position
            q[3] = 1.0
        return q

    def rest_state(self, n_envs: int = 1, root_position=None) -> "SimState":
        q = np.tile(self.rest_q(root_position), (n_envs, 1))
        return SimState(q, np.zeros((n_envs, self.nv)), np.zeros(n_envs),
                        np.zeros((n_envs, self.n_bodies), dtype=bool))

    def joint_angles(self, q) -> np.ndarray:
        return np.asarray(q)[..., self.nq - self.dof_count:]

    def joint_rates(self, qdot) -> np.ndarray:
        return np.asarray(qdot)[..., self.base_dim:]

    def local_rotations(self, q) -> np.ndarray:
        """Per-joint local rotations ``(E, J, 3, 3)`` implied by the hinge angles (root included)."""
        q = np.atleast_2d(q)
        E = q.shape[0]
        rots = np.broadcast_to(np.eye(3), (E, self.n_bodies, 3, 3)).copy()
        ang = self.joint_angles(q)
        for k, (i, d) in enumerate(zip(self.dof_body, self.dof_list)):
            rots[:, i] = rots[:, i] @ axis_angle_matrix(d.axis, ang[:, k])
        if self.root == "free":
            r = self.skeleton.root_index
            rots[:, r] = quat_to_matrix(q[:, 3:7]) @ rots[:, r]
        return rots

    def root_position(self, q) -> np.ndarray:
        q = np.atleast_2d(q)
        if self.root == "free":
            return q[:, :3].copy()
        off = self.skeleton.joints[self.skeleton.root_index].offset
        return np.tile(off, (q.shape[0], 1))


@dataclass(frozen=True, eq=False)
class SimState:
    q: np.ndarray
    qdot: np.ndarray
    time: np.ndarray
    contacts: np.ndarray

    def __post_init__(self):
        q, qd = np.atleast_2d(np.asarray(self.q, float)), np.atleast_2d(np.asarray(self.qdot, float))
        if q.shape[0] != qd.shape[0]:
            raise DimensionMismatch("q and qdot batch sizes differ")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "qdot", qd)
        object.__setattr__(self, "time", np.broadcast_to(np.asarray(self.time, float), (q.shape[0],)).copy())
        object.__setattr__(self, "contacts", np.asarray(self.contacts, dtype=bool))

    @property
    def n_envs(self) -> int:
        return self.q.shape[0]

    def select(self, index) -> "SimState":
        return SimState(self.q[index], self.qdot[index], self.time[index], self.contacts[index])


@dataclass(frozen=True)
class Box:
    center: np.ndarray
    extent: np.ndarray   # half-sizes

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        ext = np.asarray(self.extent, dtype=np.float64).reshape(3)
        if np.any(ext <= 0):
            raise SkeletonError("box extents must be positive")
        object.__setattr__(self, "extent", ext)


@dataclass(frozen=True)
class Environment:
    ground: float | None = 0.0
    boxes: tuple = ()
    friction: float = 0.9
    gravity: float = GRAVITY
    contact: ContactParams = ContactParams()

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        if self.friction < 0:
            raise ValueError("friction must be non-negative")

    @property
    def gravity_vector(self) -> np.ndarray:
        return np.array([0.0, -self.gravity, 0.0])


# spatial algebra ------------------------------------------------------------

def crm(v, m):
    """Motion cross product ``v x m`` for batched 6-vectors."""
    w, vo = v[..., :3], v[..., 3:]
    return np.concatenate([np.cross(w, m[..., :3]), np.cross(w, m[..., 3:]) + np.cross(vo, m[..., :3])], -1)


def crf(v, f):
    """Force cross product ``v x* f``."""
    w, vo = v[..., :3], v[..., 3:]
    return np.concatenate([np.cross(w, f[..., :3]) + np.cross(vo, f[..., 3:]), np.cross(w, f[..., 3:])], -1)


def spatial_inertia(mass, com_world, inertia_world):
    C = skew(com_world)
    out = np.zeros(com_world.shape[:-1] + (6, 6))
    out[..., :3, :3] = inertia_world + mass * C @ np.swapaxes(C, -1, -2)
    out[..., :3, 3:] = mass * C
    out[..., 3:, :3] = mass * np.swapaxes(C, -1, -2)
    out[..., 3:, 3:] = mass * np.eye(3)
    return out


@dataclass
class _Kin:
    R: np.ndarray      # (E, J, 3, 3)
    x: np.ndarray      # (E, J, 3) joint origins
    S: np.ndarray      # (E, 6, nv) motion subspace columns
    I: np.ndarray      # (E, J, 6, 6) spatial inertias at the origin


def _kinematics(ch: ArticulatedCharacter, q) -> _Kin:
    q = np.atleast_2d(q)
    E, J = q.shape[0], ch.n_bodies
    R = np.zeros((E, J, 3, 3))
    x = np.zeros((E, J, 3))
    S = np.zeros((E, 6, ch.nv))
    ang = ch.joint_angles(q)
    sk = ch.skeleton
    for i, joint in enumerate(sk.joints):
        if joint.parent is None:
            if ch.root == "free":
                Rc, xp = quat_to_matrix(q[:, 3:7]), q[:, :3]
                S[:, :3, :3] = np.eye(3)
                S[:, 3:, :3] = skew(xp)
                S[:, 3:, 3:6] = np.eye(3)
            else:
                Rc, xp = np.broadcast_to(np.eye(3), (E, 3, 3)), np.broadcast_to(joint.offset, (E, 3))
        else:
            Rp = R[:, joint.parent]
            Rc, xp = Rp, x[:, joint.parent] + Rp @ joint.offset
        for col in ch.body_cols[i] if joint.parent is not None or ch.root == "fixed" else ():
            k = col - ch.base_dim
            axis = ch.dof_list[k].axis
            aw = Rc @ axis
            S[:, :3, col] = aw
            S[:, 3:, col] = np.cross(xp, aw)
            Rc = Rc @ axis_angle_matrix(axis, ang[:, k])
        R[:, i], x[:, i] = Rc, xp
    masses = np.array([b.mass for b in ch.bodies])
    com_local = np.stack([b.com for b in ch.bodies])
    inert_local = np.stack([b.inertia for b in ch.bodies])
    com_w = x + np.einsum("ejab,jb->eja", R, com_local)
    inert_w = R @ inert_local @ np.swapaxes(R, -1, -2)
    I = spatial_inertia(masses[None, :, None, None], com_w, inert_w)
    return _Kin(R, x, S, I)


def body_jacobians(ch: ArticulatedCharacter, kin: _Kin) -> np.ndarray:
    """``(E, J, 6, nv)`` spatial Jacobians of every body."""
    return kin.S[:, None] * ch.chain[None, :, None, :]


def _crba(ch: ArticulatedCharacter, kin: _Kin) -> np.ndarray:
    E = kin.S.shape[0]
    Ic = kin.I.copy()
    for i in reversed(range(ch.n_bodies)):
        p = ch.skeleton.joints[i].parent
        if p is not None:
            Ic[:, p] += Ic[:, i]
    M = np.zeros((E, ch.nv, ch.nv))
    for i in range(ch.n_bodies):
        cols = list(ch.body_cols[i])
        if not cols:
            continue
        F = Ic[:, i] @ kin.S[:, :, cols]
        chain = np.flatnonzero(ch.chain[i])
        block = np.swapaxes(kin.S[:, :, chain], -1, -2) @ F
        M[:, chain[:, None], cols] = block
        M[:, np.array(cols)[:, None], chain] = np.swapaxes(block, -1, -2)
    return M


def mass_matrix(ch: ArticulatedCharacter, q) -> np.ndarray:
    return _crba(ch, _kinematics(ch, q))


def _rnea_bias(ch: ArticulatedCharacter, kin: _Kin, qdot, gravity_vec):
    """Velocity-product and gravity generalized forces ``C`` (equation ``M qdd + C = tau``)."""
    E = qdot.shape[0]
    J = ch.n_bodies
    V = np.zeros((E, J, 6))
    F = np.zeros((E, J, 6))
    a0 = np.concatenate([np.zeros(3), -gravity_vec])
    acc = [None] * J
    for i, joint in enumerate(ch.skeleton.joints):
        if joint.parent is None:
            if ch.root == "free":
                v = np.einsum("eab,eb->ea", kin.S[:, :, :6], qdot[:, :6])
                a = np.tile(a0, (E, 1))
                a[:, 3:] += np.cross(qdot[:, 3:6], qdot[:, :3])
                cols = ()
            else:
                v, a = np.zeros((E, 6)), np.tile(a0, (E, 1))
                cols = ch.body_cols[i]
        else:
            v, a = V[:, joint.parent], acc[joint.parent]
            cols = ch.body_cols[i]
        for col in cols:
            sq = kin.S[:, :, col] * qdot[:, col:col + 1]
            v = v + sq
            a = a + crm(v, sq)
        V[:, i], acc[i] = v, a
        Iv = np.einsum("eab,eb->ea", kin.I[:, i], v)
        F[:, i] = np.einsum("eab,eb->ea", kin.I[:, i], a) + crf(v, Iv)
    for i in reversed(range(J)):
        p = ch.skeleton.joints[i].parent
        if p is not None:
            F[:, p] += F[:, i]
    C = np.zeros((E, ch.nv))
    for i in range(J):
        for col in ch.body_cols[i]:
            C[:, col] = np.einsum("ea,ea->e", kin.S[:, :, col], F[:, i])
    return C, V


def body_velocities(ch: ArticulatedCharacter, q, qdot) -> np.ndarray:
    kin = _kinematics(ch, q)
    return np.einsum("ejab,eb->eja", body_jacobians(ch, kin), np.atleast_2d(qdot))


def momentum(ch: ArticulatedCharacter, q, qdot) -> np.ndarray:
    """Spatial momentum ``(angular about origin; linear)`` per environment."""
    kin = _kinematics(ch, q)
    V = np.einsum("ejab,eb->eja", body_jacobians(ch, kin), np.atleast_2d(qdot))
    return np.einsum("ejab,ejb->ea", kin.I, V)


def kinetic_energy(ch: ArticulatedCharacter, q, qdot) -> np.ndarray:
    qdot = np.atleast_2d(qdot)
    return 0.5 * np.einsum("ea,eab,eb->e", qdot, mass_matrix(ch, q), qdot)


def potential_energy(ch: ArticulatedCharacter, q, env: Environment) -> np.ndarray:
    kin = _kinematics(ch, q)
    com = kin.x + np.einsum("ejab,jb->eja", kin.R, np.stack([b.com for b in ch.bodies]))
    masses = np.array([b.mass for b in ch.bodies])
    return env.gravity * com[..., 1] @ masses


@dataclass(frozen=True)
class BodyKinematics:
    positions: np.ndarray           # (E, J, 3)
    rotations: np.ndarray           # (E, J, 3, 3)
    linear_velocities: np.ndarray   # (E, J, 3) of the joint origins
    angular_velocities: np.ndarray  # (E, J, 3)


def body_kinematics(state: SimState, character: ArticulatedCharacter) -> BodyKinematics:
    kin = _kinematics(character, state.q)
    V = np.einsum("ejab,eb->eja", body_jacobians(character, kin), state.qdot)
    w = V[..., :3]
    lin = V[..., 3:] + np.cross(w, kin.x)
    return BodyKinematics(kin.x, kin.R, lin, w)


def state_from_pose(character: ArticulatedCharacter, root_position, angles, root_rotation=None,
                    qdot=None) -> SimState:
    """Build a batch of states from root position, optional root rotation matrix and hinge angles."""
    from .rotations import matrix_to_quat
    angles = np.atleast_2d(np.asarray(angles, dtype=np.float64))
    E = angles.shape[0]
    q = np.zeros((E, character.nq))
    if character.root == "free":
        q[:, :3] = np.broadcast_to(root_position, (E, 3))
        Rr = np.eye(3) if root_rotation is None else root_rotation
        q[:, 3:7] = np.broadcast_to(matrix_to_quat(np.asarray(Rr, dtype=np.float64)), (E, 4))
    q[:, character.nq - character.dof_count:] = angles
    qd = np.zeros((E, character.nv)) if qdot is None else np.atleast_2d(qdot)
    return SimState(q, qd, np.zeros(E), np.zeros((E, character.n_bodies), dtype=bool))


def transform_coordinates(q, qdot, R, t, free: bool):
    """Generalized coordinates after the world transform ``x -> R x + t`` (free roots only move)."""
    from .rotations import matrix_to_quat
    q, qdot = np.array(q, dtype=np.float64), np.array(qdot, dtype=np.float64)
    if free:
        q[..., :3] = q[..., :3] @ R.T + t
        q[..., 3:7] = quat_mul(np.broadcast_to(matrix_to_quat(R), q[..., 3:7].shape), q[..., 3:7])
        qdot[..., :3] = qdot[..., :3] @ R.T
        qdot[..., 3:6] = qdot[..., 3:6] @ R.T
    return q, qdot


def transform_state(state: SimState, character: ArticulatedCharacter, R, t) -> SimState:
    q, qd = transform_coordinates(state.q, state.qdot, np.asarray(R, float), np.asarray(t, float),
                                  character.root == "free")
    return SimState(q, qd, state.time, state.contacts)


# actuation and stepping ----------------------------------------------------

def pd_torques(state: SimState, action, character: ArticulatedCharacter, kp=None, kd=None) -> np.ndarray:
    action = np.atleast_2d(np.asarray(action, dtype=np.float64))
    if action.shape[-1] != character.dof_count:
        raise DimensionMismatch(f"action has {action.shape[-1]} entries, character has {character.dof_count} DOFs")
    kp = character.kp if kp is None else np.asarray(kp, dtype=np.float64)
    kd = character.kd if kd is None else np.asarray(kd, dtype=np.float64)
    q = character.joint_angles(state.q)
    qd = character.joint_rates(state.qdot)
    tau = kp * (action - q) - kd * qd
    return np.clip(tau, -character.torque_limit, character.torque_limit)


def _contacts(ch: ArticulatedCharacter, kin: _Kin, env: Environment):
    """Sphere contacts against ground and boxes: points, normals and penetration ``(E, C, ...)``."""
    c = kin.x[:, ch.sphere_body] + np.einsum("esab,sb->esa", kin.R[:, ch.sphere_body], ch.sphere_local)
    r = ch.sphere_radius
    pts, normals, pens, bodies = [], [], [], []
    if env.ground is not None:
        n = np.broadcast_to(np.array([0.0, 1.0, 0.0]), c.shape)
        pens.append(env.ground - (c[..., 1] - r))
        normals.append(n)
        pts.append(c - r[:, None] * n)
        bodies.append(ch.sphere_body)
    for box in env.boxes:
        lo, hi = box.center - box.extent, box.center + box.extent
        cl = np.clip(c, lo, hi)
        d = c - cl
        dist = np.linalg.norm(d, axis=-1)
        outside = dist > 1e-9
        n_out = d / np.where(outside, dist, 1.0)[..., None]
        # inside the box: push out through the nearest face
        depth = box.extent - np.abs(c - box.center)
        k = np.argmin(depth, axis=-1)
        sign = np.sign(np.take_along_axis(c - box.center, k[..., None], -1))[..., 0]
        sign = np.where(sign == 0, 1.0, sign)
        n_in = np.eye(3)[k] * sign[..., None]
        n = np.where(outside[..., None], n_out, n_in)
        pen = np.where(outside, r - dist, r + np.take_along_axis(depth, k[..., None], -1)[..., 0])
        pens.append(pen)
        normals.append(n)
        pts.append(c - r[:, None] * n)
        bodies.append(ch.sphere_body)
    if not pens:
        E = c.shape[0]
        return np.zeros((E, 0, 3)), np.zeros((E, 0, 3)), np.zeros((E, 0)), np.zeros(0, dtype=int)
    return np.concatenate(pts, 1), np.concatenate(normals, 1), np.concatenate(pens, 1), np.concatenate(bodies)


def _advance_q(ch: ArticulatedCharacter, q, qdot, dt):
    q = q.copy()
    if ch.root == "free":
        q[:, :3] += dt * qdot[:, 3:6]
        dq = rotvec_to_quat(qdot[:, :3] * dt)
        q[:, 3:7] = quat_normalize(quat_mul(dq, q[:, 3:7]))
        q[:, 7:] += dt * qdot[:, 6:]
    else:
        q += dt * qdot
    return q


def _bias_jacobian(ch: ArticulatedCharacter, kin: _Kin, qd):
    """Exact ``dC/dqdot``: the gravity-free bias is a quadratic form in the velocity."""
    E, nv = qd.shape
    eye = np.eye(nv)
    probes = np.concatenate([qd[:, None] + eye, np.broadcast_to(eye, (E, nv, nv)), qd[:, None]], 1)
    n = probes.shape[1]
    rep = _Kin(*(np.repeat(a, n, axis=0) for a in (kin.R, kin.x, kin.S, kin.I)))
    C, _ = _rnea_bias(ch, rep, probes.reshape(E * n, nv), np.zeros(3))
    C = C.reshape(E, n, nv)
    # C(v + e) - C(e) - C(v) = cross terms of the quadratic form
    return np.swapaxes(C[:, :nv] - C[:, nv:2 * nv] - C[:, -1:], -1, -2)


def _substep(ch, q, qd, ff, targets, env, dt):
    kin = _kinematics(ch, q)
    M = _crba(ch, kin)
    g = env.gravity_vector
    C, _ = _rnea_bias(ch, kin, qd, g)
    E, nv, nb = q.shape[0], ch.nv, ch.base_dim
    tau = np.zeros((E, nv))
    # velocity-product forces linearized about the substep midpoint
    A = M + 0.5 * dt * _bias_jacobian(ch, kin, qd)
    rhs = np.zeros((E, nv))
    if ch.dof_count:
        idx = np.arange(nb, nv)
        ang = ch.joint_angles(q)
        rate = qd[:, nb:]
        # PD servo, linearly implicit unless the torque saturates
        kp = np.zeros((E, ch.dof_count))
        kd = np.zeros((E, ch.dof_count))
        act = ff
        if targets is not None:
            act = ff + ch.kp * (targets - ang) - ch.kd * rate
            free = np.abs(act) < ch.torque_limit
            kp, kd = np.where(free, ch.kp, 0.0), np.where(free, ch.kd, 0.0)
        act = np.clip(act, -ch.torque_limit, ch.torque_limit)
        # joint limits as stiff one-sided springs, also linearly implicit
        over = np.maximum(ang - ch.upper, 0) + np.minimum(ang - ch.lower, 0)
        viol = over != 0
        kl = np.where(viol, env.contact.limit_stiffness_ratio * ch.kp, 0.0)
        dl = np.where(viol, 2.0 * np.sqrt(env.contact.limit_stiffness_ratio * ch.kp * ch.i_eff), 0.0)
        tau[:, nb:] = act - kl * over - dl * rate
        A[:, idx, idx] += dt * (kd + dl) + dt * dt * (kp + kl)
        rhs[:, nb:] -= dt * dt * (kp + kl) * rate
    pts, nrm, pen, bod = _contacts(ch, kin, env)
    active = pen > 0
    contact_bodies = np.zeros((E, ch.n_bodies), dtype=bool)
    if active.any():
        cp = env.contact
        Jb = body_jacobians(ch, kin)[:, bod]                        # (E, C, 6, nv)
        Jp = Jb[:, :, 3:] - skew(pts) @ Jb[:, :, :3]                 # (E, C, 3, nv)
        vp = np.einsum("ecan,en->eca", Jp, qd)
        vn = np.einsum("eca,eca->ec", vp, nrm)
        vt = vp - vn[..., None] * nrm
        fn_raw = cp.stiffness * pen - cp.damping * vn
        push = active & (fn_raw > 0)
        fn = np.where(push, fn_raw, 0.0)
        speed = np.linalg.norm(vt, axis=-1)
        c_t = np.minimum(cp.tangential_damping, env.friction * fn / np.maximum(speed, 1e-9))
        c_t = np.where(active, c_t, 0.0)
        f = fn[..., None] * nrm - c_t[..., None] * vt
        nn = nrm[..., :, None] * nrm[..., None, :]
        eye = np.eye(3)
        Dc = np.where(push, cp.damping, 0.0)[..., None, None] * nn + c_t[..., None, None] * (eye - nn)
        Kc = np.where(push, cp.stiffness, 0.0)[..., None, None] * nn
        JD = np.einsum("ecan,ecab,ecbm->enm", Jp, Dc, Jp)
        JK = np.einsum("ecan,ecab,ecbm->enm", Jp, Kc, Jp)
        A += dt * JD + dt * dt * JK
        rhs += dt * np.einsum("ecan,eca->en", Jp, f) - dt * dt * np.einsum("enm,em->en", JK, qd)
        for c_idx, b in enumerate(bod):
            contact_bodies[:, b] |= active[:, c_idx]
    rhs += dt * (tau - C)
    dv = np.linalg.solve(A, rhs[..., None])[..., 0]
    qd_new = qd + dv
    q_new = _advance_q(ch, q, qd_new, dt)
    if ch.root == "free":
        free = ~contact_bodies.any(axis=1)
        if free.any():
            qd_new = _project_momentum(ch, kin, q, qd, q_new, qd_new, free, g, dt)
    return q_new, qd_new, contact_bodies


def _project_momentum(ch, kin, q, qd, q_new, qd_new, free, g, dt):
    """Correct the root velocity so momentum follows the external (gravity) wrench exactly."""
    masses = np.array([b.mass for b in ch.bodies])
    com = kin.x + np.einsum("ejab,jb->eja", kin.R, np.stack([b.com for b in ch.bodies]))
    h_old = np.einsum("ejab,ejb->ea", kin.I, np.einsum("ejab,eb->eja", body_jacobians(ch, kin), qd))
    force = np.broadcast_to(masses[None, :, None] * g, com.shape)
    wrench = np.concatenate([np.cross(com, force).sum(1), force.sum(1)], -1)
    target = h_old + dt * wrench
    kin_n = _kinematics(ch, q_new)
    A = np.einsum("ejab,ejbn->ean", kin_n.I, body_jacobians(ch, kin_n))   # (E, 6, nv)
    resid = target - np.einsum("ean,en->ea", A, qd_new)
    corr = np.linalg.solve(A[:, :, :6], resid[..., None])[..., 0]
    out = qd_new.copy()
    out[free, :6] += corr[free]
    return out


def step(state: SimState, torques, env: Environment, dt: float = CONTROL_DT, *,
         character: ArticulatedCharacter, n_sub: int = 8, pd_targets=None) -> SimState:
    """Advance every environment by ``dt`` using ``n_sub`` semi-implicit Euler substeps.

    ``torques`` are per-DOF feedforward torques (``None`` for zero). With
    ``pd_targets`` the PD law is added at each substep. Unsaturated PD
    terms, joint limits and contact springs enter the velocity solve
    linearly implicitly, which keeps stiff servos on light bodies stable.
    """
    out, bad = step_masked(state, torques, env, dt, character=character, n_sub=n_sub, pd_targets=pd_targets)
    if bad.any():
        raise SimDiverged(f"simulation diverged in environments {np.flatnonzero(bad).tolist()}")
    return out


def step_masked(state: SimState, torques, env: Environment, dt: float = CONTROL_DT, *,
                character: ArticulatedCharacter, n_sub: int = 8, pd_targets=None):
    """Like :func:`step` but returns ``(state, diverged)``; diverged environments keep their old state."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    ch = character
    E = state.n_envs
    if torques is not None and np.shape(torques)[-1] != ch.dof_count:
        raise DimensionMismatch("torque vector length differs from DOF count")
    ff = np.zeros((E, ch.dof_count)) if torques is None else np.broadcast_to(
        np.asarray(torques, dtype=np.float64), (E, ch.dof_count))
    targets = None if pd_targets is None else np.broadcast_to(
        np.asarray(pd_targets, dtype=np.float64), (E, ch.dof_count))
    h = dt / n_sub
    q, qd = state.q, state.qdot
    contacts = np.zeros((E, ch.n_bodies), dtype=bool)
    bad = np.zeros(E, dtype=bool)
    with np.errstate(all="ignore"):
        for _ in range(n_sub):
            q, qd, cb = _substep(ch, q, qd, ff, targets, env, h)
            contacts |= cb
            bad |= ~np.all(np.isfinite(qd), axis=1) | ~np.all(np.isfinite(q), axis=1) | \
                (np.abs(qd).max(axis=1) > env.contact.max_speed)
            if bad.any():
                # park diverged environments so they cannot poison the shared solve
                q = np.where(bad[:, None], state.q, q)
                qd = np.where(bad[:, None], state.qdot, qd)
    return SimState(q, qd, state.time + dt, contacts), bad


def applied_torques(state: SimState, character: ArticulatedCharacter, pd_targets) -> np.ndarray:
    return pd_torques(state, pd_targets, character)


# construction helpers ------------------------------------------------------

def character_from_skeleton(skeleton: Skeleton, *, total_mass: float = 60.0, radius: float = 0.05,
                            hinge_axes=None, foot_names=("Foot",), root: str = "free",
                            name: str | None = None) -> ArticulatedCharacter:
    """Capsule geometry from bone lengths, mass split by capsule volume.

    ``hinge_axes`` maps joint names to a list of axes; joints not listed get
    three hinges about x, y and z (non-root joints only).
    """
    hinge_axes = hinge_axes or {}
    caps = []
    for i, _ in enumerate(skeleton.joints):
        kids = skeleton.children(i)
        c = [Capsule(np.zeros(3), skeleton.joints[k].offset, radius) for k in kids
             if np.linalg.norm(skeleton.joints[k].offset) > 1e-9]
        caps.append(c or [Capsule(np.zeros(3), np.zeros(3), radius)])
    vols = np.array([sum(c.volume for c in cs) for cs in caps])
    masses = total_mass * vols / vols.sum()
    bodies = []
    for i, j in enumerate(skeleton.joints):
        if j.parent is None and root == "free":
            axes = []
        else:
            axes = hinge_axes.get(j.name, np.eye(3))
        foot = any(j.name.endswith(f) for f in foot_names)
        bodies.append(Body(float(masses[i]), tuple(caps[i]), tuple(Dof(a) for a in axes), foot=foot))
    return ArticulatedCharacter(skeleton, tuple(bodies), root, name or skeleton.name)


def toy_biped(leg_length: float = 0.85, hip_width: float = 0.25) -> ArticulatedCharacter:
    """Pelvis plus two rigid legs with flexion (x) and abduction (z) hinges, forward-pointing foot capsules."""
    hip = leg_length + 0.05
    sk = Skeleton((Joint("Pelvis", None, np.zeros(3)),
                   Joint("LeftLeg", 0, (hip_width, -0.05, 0)),
                   Joint("RightLeg", 0, (-hip_width, -0.05, 0))), hip_height=hip, name="toy_biped")
    pelvis = Body(3.0, (Capsule((-hip_width, 0, 0), (hip_width, 0, 0), 0.06),))
    foot_r = 0.03
    legs = [Body(1.5, (Capsule((0, -0.05, 0), (0, -leg_length + 0.1, 0), 0.04),
                       Capsule((0, -leg_length + foot_r, -0.05), (0, -leg_length + foot_r, 0.08), foot_r)),
                 (Dof((1, 0, 0), lower=-1.2, upper=1.2, torque_limit=150.0),
                  Dof((0, 0, 1), lower=-0.6, upper=0.6, torque_limit=150.0)), foot=True) for _ in range(2)]
    return ArticulatedCharacter(sk, (pelvis, *legs), "free", "toy_biped")


def pendulum(n_links: int = 2, length: float = 0.5, mass: float = 1.0, axis=(0, 0, 1)) -> ArticulatedCharacter:
    """Chain of hinged rods hanging from a fixed pivot."""
    joints = [Joint("Link0", None, np.zeros(3))] + \
        [Joint(f"Link{i}", i - 1, (0, -length, 0)) for i in range(1, n_links)]
    sk = Skeleton(tuple(joints), hip_height=length * n_links, name=f"pendulum{n_links}")
    bodies = tuple(Body(mass, (Capsule((0, 0, 0), (0, -length, 0), 0.03),), (Dof(axis),)) for _ in range(n_links))
    return ArticulatedCharacter(sk, bodies, "fixed", sk.name)


def single_body(mass: float = 1.0, radius: float = 0.1) -> ArticulatedCharacter:
    sk = Skeleton((Joint("Body", None, np.zeros(3)),), hip_height=radius, name="ball")
    return ArticulatedCharacter(sk, (Body(mass, (Capsule(np.zeros(3), np.zeros(3), radius),)),), "free", "ball")


def box_body(mass: float = 1.0, half=(0.2, 0.05, 0.1), radius: float = 0.02) -> ArticulatedCharacter:
    """A flat slab approximated by spheres at its bottom corners (rests without rolling)."""
    hx, hy, hz = half
    corners = [(sx * hx, -hy, sz * hz) for sx in (-1, 1) for sz in (-1, 1)]
    caps = tuple(Capsule(c, c, radius) for c in corners)
    inertia = mass / 3.0 * np.diag([hy * hy + hz * hz, hx * hx + hz * hz, hx * hx + hy * hy])
    sk = Skeleton((Joint("Body", None, np.zeros(3)),), hip_height=hy + radius, name="slab")
    return ArticulatedCharacter(sk, (Body(mass, caps, com=np.zeros(3), inertia=inertia),), "free", "slab")


# file formats ---------------------------------------------------------------

def _floats(tokens, n, line_no):
    try:
        vals = [float(t) for t in tokens[:n]]
    except ValueError:
        raise ParseError("expected a number", line_no) from None
    if len(vals) != n:
        raise ParseError(f"expected {n} numbers", line_no)
    return vals


def parse_character(text: str) -> ArticulatedCharacter:
    """Parse the character description format (see :func:`format_character`)."""
    name, root, hip = "character", "free", None
    joints, specs = [], []
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        key, rest = tok[0], tok[1:]
        if key == "character":
            name = rest[0] if rest else name
        elif key == "root":
            root = rest[0] if rest else root
        elif key == "hip_height":
            hip = _floats(rest, 1, no)[0]
        elif key == "body":
            if len(rest) != 5:
                raise ParseError("body needs: name parent ox oy oz", no)
            parent = None if rest[1] == "-" else rest[1]
            names = [j[0] for j in joints]
            if parent is not None and parent not in names:
                raise ParseError(f"unknown parent {parent!r}", no)
            joints.append((rest[0], None if parent is None else names.index(parent), _floats(rest[2:], 3, no)))
            specs.append({"mass": None, "capsules": [], "dofs": [], "foot": False, "com": None, "inertia": None})
        else:
            if not specs:
                raise ParseError(f"{key!r} before any body", no)
            s = specs[-1]
            if key == "mass":
                s["mass"] = _floats(rest, 1, no)[0]
            elif key == "com":
                s["com"] = _floats(rest, 3, no)
            elif key == "inertia":
                v = _floats(rest, 6, no) if len(rest) == 6 else _floats(rest, 3, no) + [0.0, 0.0, 0.0]
                s["inertia"] = np.array([[v[0], v[3], v[4]], [v[3], v[1], v[5]], [v[4], v[5], v[2]]])
            elif key == "capsule":
                v = _floats(rest, 7, no)
                s["capsules"].append(Capsule(v[:3], v[3:6], v[6]))
            elif key == "foot":
                s["foot"] = True
            elif key == "dof":
                if not rest or rest[0] != "hinge":
                    raise ParseError("only 'dof hinge ax ay az ...' is supported", no)
                axis = _floats(rest[1:], 3, no)
                opts, i = {}, 4
                while i < len(rest):
                    opt = rest[i]
                    if opt in ("kp", "kd", "torque"):
                        opts[opt] = _floats(rest[i + 1:], 1, no)[0]
                        i += 2
                    elif opt == "limit":
                        opts["limit"] = _floats(rest[i + 1:], 2, no)
                        i += 3
                    else:
                        raise ParseError(f"unknown dof option {opt!r}", no)
                lo, hi = opts.get("limit", (-np.inf, np.inf))
                s["dofs"].append(Dof(axis, opts.get("kp"), opts.get("kd"), lo, hi, opts.get("torque", np.inf)))
            else:
                raise ParseError(f"unknown keyword {key!r}", no)
    if not joints:
        raise ParseError("no bodies defined", 1)
    for j, s in zip(joints, specs):
        if s["mass"] is None:
            raise ParseError(f"body {j[0]!r} has no mass", 1)
    try:
        sk = Skeleton(tuple(Joint(*j) for j in joints), hip_height=hip, name=name)
    except SkeletonError:
        if hip is not None or not joints[0][2][1] > 0:
            raise
        # nothing hangs below the root: fall back to its mounting height
        sk = Skeleton(tuple(Joint(*j) for j in joints), hip_height=joints[0][2][1], name=name)
    bodies = tuple(Body(s["mass"], tuple(s["capsules"]), tuple(s["dofs"]), s["com"], s["inertia"], s["foot"])
                   for s in specs)
    return ArticulatedCharacter(sk, bodies, root, name)


def _fmt(v):
    return " ".join(repr(float(x)) for x in np.ravel(v))


def format_character(ch: ArticulatedCharacter) -> str:
    lines = [f"character {ch.name}", f"root {ch.root}", f"hip_height {ch.hip_height!r}"]
    for j, b in zip(ch.skeleton.joints, ch.bodies):
        parent = "-" if j.parent is None else ch.skeleton.joints[j.parent].name
        lines.append(f"body {j.name} {parent} {_fmt(j.offset)}")
        lines.append(f"  mass {b.mass!r}")
        lines.append(f"  com {_fmt(b.com)}")
        I = b.inertia
        lines.append(f"  inertia {_fmt([I[0, 0], I[1, 1], I[2, 2], I[0, 1], I[0, 2], I[1, 2]])}")
        for c in b.capsules:
            lines.append(f"  capsule {_fmt(c.a)} {_fmt(c.b)} {c.radius!r}")
        for d in b.dofs:
            s = f"  dof hinge {_fmt(d.axis)}"
            if d.kp is not None:
                s += f" kp {d.kp!r}"
            if d.kd is not None:
                s += f" kd {d.kd!r}"
            if np.isfinite(d.lower) or np.isfinite(d.upper):
                s += f" limit {d.lower!r} {d.upper!r}"
            if np.isfinite(d.torque_limit):
                s += f" torque {d.torque_limit!r}"
            lines.append(s)
        if b.foot:
            lines.append("  foot")
    return "\n".join(lines) + "\n"


def load_character(path) -> ArticulatedCharacter:
    with open(path) as fh:
        return parse_character(fh.read())


def save_character(path, ch: ArticulatedCharacter) -> None:
    with open(path, "w") as fh:
        fh.write(format_character(ch))


def parse_environment(text: str) -> Environment:
    """Keywords: ``ground H`` (or ``ground none``), ``friction MU``, ``gravity G``, ``box cx cy cz ex ey ez``."""
    kw = {}
    boxes = []
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *rest = line.split()
        if key == "ground":
            kw["ground"] = None if rest and rest[0] == "none" else _floats(rest, 1, no)[0]
        elif key == "friction":
            kw["friction"] = _floats(rest, 1, no)[0]
        elif key == "gravity":
            kw["gravity"] = _floats(rest, 1, no)[0]
        elif key == "box":
            v = _floats(rest, 6, no)
            boxes.append(Box(v[:3], v[3:]))
        else:
            raise ParseError(f"unknown keyword {key!r}", no)
    return Environment(boxes=tuple(boxes), **kw)


def format_environment(env: Environment) -> str:
    lines = [f"ground {'none' if env.ground is None else repr(float(env.ground))}",
             f"friction {env.friction!r}", f"gravity {env.gravity!r}"]
    lines += [f"box {_fmt(b.center)} {_fmt(b.extent)}" for b in env.boxes]
    return "\n".join(lines) + "\n"


def load_environment(path) -> Environment:
    with open(path) as fh:
        return parse_environment(fh.read())


def save_environment(path, env: Environment) -> None:
    with open(path, "w") as fh:
        fh.write(format_environment(env))


def fk_reference(character: ArticulatedCharacter, q) -> np.ndarray:
    """Joint positions from :func:`inbetween.motion.fk_pose` for the same coordinates."""
    sk = character.skeleton
    root = character.root_position(q) - sk.joints[sk.root_index].offset
    pos, _ = fk_pose(sk, character.local_rotations(q), root)
    return pos
