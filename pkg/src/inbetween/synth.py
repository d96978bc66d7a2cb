"""Procedural gait clips on small canonical skeletons.

These stand in for a motion-capture corpus at desk scale: every clip is a
parameterized combination of sinusoidal limb swings and a root trajectory.
"""

from dataclasses import dataclass

import numpy as np

from .motion import Joint, MotionClip, Skeleton, clip_to_poses, extract_features
from .rotations import axis_angle_matrix

X, Y, Z = np.eye(3)


def _mirror(offset):
    return (-offset[0], offset[1], offset[2])


def toy9_skeleton() -> Skeleton:
    """Nine joints: rigid legs and arms, no knees or elbows."""
    j = [
        ("Hips", None, (0, 0, 0)),
        ("LeftUpLeg", 0, (0.1, -0.05, 0)), ("LeftFoot", 1, (0, -0.85, 0)),
        ("RightUpLeg", 0, _mirror((0.1, -0.05, 0))), ("RightFoot", 3, (0, -0.85, 0)),
        ("LeftArm", 0, (0.18, 0.45, 0)), ("LeftHand", 5, (0, -0.55, 0)),
        ("RightArm", 0, _mirror((0.18, 0.45, 0))), ("RightHand", 7, (0, -0.55, 0)),
    ]
    return Skeleton(tuple(Joint(*x) for x in j), name="toy9")


def biped15_skeleton() -> Skeleton:
    j = [
        ("Hips", None, (0, 0, 0)),
        ("Spine", 0, (0, 0.25, 0)), ("Head", 1, (0, 0.3, 0)),
        ("LeftArm", 1, (0.18, 0.2, 0)), ("LeftForeArm", 3, (0, -0.28, 0)), ("LeftHand", 4, (0, -0.25, 0)),
        ("RightArm", 1, _mirror((0.18, 0.2, 0))), ("RightForeArm", 6, (0, -0.28, 0)),
        ("RightHand", 7, (0, -0.25, 0)),
        ("LeftUpLeg", 0, (0.09, -0.05, 0)), ("LeftLeg", 9, (0, -0.42, 0)), ("LeftFoot", 10, (0, -0.42, 0)),
        ("RightUpLeg", 0, _mirror((0.09, -0.05, 0))), ("RightLeg", 12, (0, -0.42, 0)),
        ("RightFoot", 13, (0, -0.42, 0)),
    ]
    return Skeleton(tuple(Joint(*x) for x in j), name="biped15")


SKELETONS = {"toy9": toy9_skeleton, "biped15": biped15_skeleton}


def canonical_skeleton(name: str = "toy9") -> Skeleton:
    try:
        return SKELETONS[name]()
    except KeyError:
        raise ValueError(f"unknown skeleton {name!r}; choose from {sorted(SKELETONS)}") from None


@dataclass
class GaitParams:
    kind: str = "walk"          # walk | turn | squat | step | sway
    speed: float = 1.0          # m/s at clip start
    end_speed: float | None = None
    heading: float = 0.0        # rad, 0 faces +z
    turn_rate: float = 0.0      # rad/s
    frequency: float = 1.0      # stride cycles per second
    phase: float = 0.0
    amplitude: float = 0.35     # thigh swing for step/squat/sway (rad); walk scales with speed
    arm_ratio: float = 0.6
    bob: float = 0.02


def gait_clip(params: GaitParams, skeleton: Skeleton, n_frames: int, fps: float = 30.0) -> MotionClip:
    """Render one procedural clip."""
    t = np.arange(n_frames) / fps
    end_speed = params.speed if params.end_speed is None else params.end_speed
    speed = params.speed + (end_speed - params.speed) * t / max(t[-1], 1e-9)
    # amplitude for walking gaits follows speed so a zero-speed walk is static
    if params.kind in ("walk", "turn"):
        amp = np.minimum(0.45 * speed, 0.7)
        freq = params.frequency * np.ones_like(t) * (speed > 0)
    else:
        amp = params.amplitude * np.ones_like(t)
        freq = params.frequency * np.ones_like(t)
        speed = np.zeros_like(t)
    phase = params.phase + 2 * np.pi * np.concatenate([[0.0], np.cumsum(freq[1:]) / fps])
    heading = params.heading + params.turn_rate * t
    vel = np.stack([np.sin(heading), np.zeros_like(t), np.cos(heading)], -1) * speed[:, None]
    root = np.concatenate([[np.zeros(3)], np.cumsum(vel[1:] / fps, axis=0)])

    J = skeleton.n_joints
    rots = np.broadcast_to(np.eye(3), (n_frames, J, 3, 3)).copy()
    swing = amp * np.sin(phase)
    names = skeleton.names

    def set_rot(name, R):
        if name in names:
            rots[:, names.index(name)] = R

    hip_drop = np.zeros(n_frames)
    if params.kind == "squat":
        depth = 0.5 * (1 - np.cos(phase))          # 0..1
        flex = params.amplitude * depth
        leg_len = skeleton.hip_height
        if "LeftLeg" in names:
            set_rot("LeftUpLeg", axis_angle_matrix(X, -flex))
            set_rot("RightUpLeg", axis_angle_matrix(X, -flex))
            set_rot("LeftLeg", axis_angle_matrix(X, 2 * flex))
            set_rot("RightLeg", axis_angle_matrix(X, 2 * flex))
            set_rot("LeftFoot", axis_angle_matrix(X, -flex))
            set_rot("RightFoot", axis_angle_matrix(X, -flex))
            hip_drop = leg_len * (1 - np.cos(flex))
        else:
            set_rot("LeftUpLeg", axis_angle_matrix(Z, flex * 0.5))
            set_rot("RightUpLeg", axis_angle_matrix(Z, -flex * 0.5))
            hip_drop = leg_len * (1 - np.cos(flex * 0.5))
        set_rot("LeftArm", axis_angle_matrix(X, -1.2 * flex))
        set_rot("RightArm", axis_angle_matrix(X, -1.2 * flex))
    elif params.kind == "sway":
        # side-to-side weight shift over planted feet: both thighs tilt together,
        # the hips travel on an arc around the feet and the pelvis stays level
        leg = skeleton.hip_height
        set_rot("LeftUpLeg", axis_angle_matrix(Z, swing))
        set_rot("RightUpLeg", axis_angle_matrix(Z, swing))
        set_rot("LeftArm", axis_angle_matrix(Z, -0.5 * swing))
        set_rot("RightArm", axis_angle_matrix(Z, -0.5 * swing))
        hip_drop = leg * (1 - np.cos(swing))
        side = np.stack([np.cos(heading), np.zeros_like(t), -np.sin(heading)], -1)
        root = root - (leg * np.sin(swing))[:, None] * side
    else:
        set_rot("LeftUpLeg", axis_angle_matrix(X, swing))
        set_rot("RightUpLeg", axis_angle_matrix(X, -swing))
        knee_l = np.maximum(0.0, np.sin(phase + 0.6)) * 1.4 * amp
        knee_r = np.maximum(0.0, np.sin(phase + np.pi + 0.6)) * 1.4 * amp
        set_rot("LeftLeg", axis_angle_matrix(X, knee_l))
        set_rot("RightLeg", axis_angle_matrix(X, knee_r))
        set_rot("LeftArm", axis_angle_matrix(X, -params.arm_ratio * swing))
        set_rot("RightArm", axis_angle_matrix(X, params.arm_ratio * swing))
        set_rot("LeftForeArm", axis_angle_matrix(X, -0.3 * amp * (1 + np.sin(phase))))
        set_rot("RightForeArm", axis_angle_matrix(X, -0.3 * amp * (1 - np.sin(phase))))
        set_rot("Spine", axis_angle_matrix(Y, 0.15 * swing))
        leg = skeleton.hip_height
        hip_drop = leg * (1 - np.cos(swing)) + params.bob * (amp / 0.45) * (1 - np.cos(2 * phase)) * 0.5

    yaw = axis_angle_matrix(Y, heading)
    sway = axis_angle_matrix(Z, 0.08 * amp * np.sin(phase) * (params.kind != "sway"))
    rots[:, skeleton.root_index] = yaw @ sway
    root[:, 1] = skeleton.hip_height - hip_drop
    return extract_features(root, rots, skeleton, fps)


def add_root_drift(clip: MotionClip, displacement) -> MotionClip:
    """Clip whose root slides linearly from zero to ``displacement`` (3,) over its length."""
    root, rots = clip_to_poses(clip)
    ramp = np.linspace(0.0, 1.0, clip.n_frames)[:, None]
    root = root + ramp * np.asarray(displacement, dtype=np.float64)
    return extract_features(root, rots, clip.skeleton, clip.fps, clip.keyframe_indices)


@dataclass
class SynthConfig:
    n_clips: int = 20
    n_frames: int = 60
    skeleton: str = "toy9"
    fps: float = 30.0
    kinds: tuple = ("walk", "turn", "squat", "step")
    weights: tuple = (0.4, 0.25, 0.15, 0.2)
    speed_range: tuple = (0.4, 1.4)
    frequency_range: tuple = (0.8, 1.3)
    amplitude_range: tuple = (0.25, 0.5)


def sample_params(rng: np.random.Generator, config: SynthConfig) -> GaitParams:
    w = np.asarray(config.weights, dtype=float)
    kind = config.kinds[rng.choice(len(config.kinds), p=w / w.sum())]
    speed = rng.uniform(*config.speed_range)
    varying = rng.random() < 0.3
    return GaitParams(
        kind=kind,
        speed=speed,
        end_speed=rng.uniform(*config.speed_range) if varying else None,
        heading=rng.uniform(-np.pi, np.pi),
        turn_rate=rng.uniform(0.4, 1.0) * rng.choice([-1, 1]) if kind == "turn" else 0.0,
        frequency=rng.uniform(*config.frequency_range),
        phase=rng.uniform(0, 2 * np.pi),
        amplitude=rng.uniform(*config.amplitude_range),
        arm_ratio=rng.uniform(0.4, 0.8),
        bob=rng.uniform(0.0, 0.03),
    )


def synth_dataset(config: SynthConfig, seed: int) -> list[MotionClip]:
    """Deterministic list of procedural clips for ``seed``."""
    if config.n_frames < 2:
        raise ValueError("n_frames must be at least 2")
    rng = np.random.default_rng(seed)
    skeleton = canonical_skeleton(config.skeleton)
    return [gait_clip(sample_params(rng, config), skeleton, config.n_frames, config.fps)
            for _ in range(config.n_clips)]
