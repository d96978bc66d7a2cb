import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from inbetween.errors import BadRatio, MappingMismatch
from inbetween.motion import Joint, Skeleton, clip_to_poses, fk_pose, forward_kinematics
from inbetween.physics import Box, Environment, character_from_skeleton, toy_biped
from inbetween.retarget import (JointMapping, Pose, format_mapping, load_mapping, local_to_angles, parse_mapping,
                                reference_features, retarget_keyframes, retarget_pose, scale_colliders,
                                scale_environment, scale_root)
from inbetween.synth import GaitParams, biped15_skeleton, gait_clip, toy9_skeleton

TOY_TO_BIPED = [("Hips", "Hips"), ("LeftUpLeg", "LeftUpLeg"), ("RightUpLeg", "RightUpLeg"),
                ("LeftArm", "LeftArm"), ("RightArm", "RightArm"), ("LeftFoot", "LeftFoot"),
                ("RightFoot", "RightFoot"), ("LeftHand", "LeftHand"), ("RightHand", "RightHand")]


def random_pose(skeleton, rng, n=4):
    rots = Rotation.random(n * skeleton.n_joints, random_state=rng.integers(1 << 31)).as_matrix()
    return Pose(rng.standard_normal((n, 3)), rots.reshape(n, skeleton.n_joints, 3, 3))


def global_rots(skeleton, pose):
    return fk_pose(skeleton, pose.local_rots, pose.root_pos)[1]


def test_identity_mapping_is_identity():
    sk = toy9_skeleton()
    pose = random_pose(sk, np.random.default_rng(0))
    out = retarget_pose(pose, JointMapping.identity(sk), sk, sk)
    assert np.allclose(out.local_rots, pose.local_rots, atol=1e-12)
    assert np.allclose(out.root_pos, pose.root_pos, atol=1e-15)


def test_root_scaled_by_hip_ratio():
    src = Skeleton((Joint("Hips", None, np.zeros(3)),), hip_height=1.0)
    dst = Skeleton((Joint("Hips", None, np.zeros(3)),), hip_height=0.5)
    out = retarget_pose(Pose(np.array([2.0, 1.0, 0.0]), np.eye(3)[None]), JointMapping(((0, 0),)), src, dst)
    assert np.allclose(out.root_pos, [1.0, 0.5, 0.0])


@pytest.mark.parametrize("seed", range(3))
def test_mapped_global_rotations_are_preserved(seed):
    src, dst = toy9_skeleton(), biped15_skeleton()
    m = JointMapping.from_names(TOY_TO_BIPED, src, dst)
    pose = random_pose(src, np.random.default_rng(seed))
    out = retarget_pose(pose, m, src, dst)
    gs, gd = global_rots(src, pose), global_rots(dst, out)
    for a, b in m.pairs:
        assert np.abs(gd[:, b] - gs[:, a]).max() < 1e-6
    # the knees are unmapped and stay at rest
    assert np.allclose(out.local_rots[:, dst.index("LeftLeg")], np.eye(3))


def test_root_scaling_is_multiplicative():
    rng = np.random.default_rng(1)
    sk = toy9_skeleton()
    root = rng.standard_normal(3)
    assert np.allclose(scale_root(scale_root(root, sk, sk, 0.7), sk, sk, 1.9), scale_root(root, sk, sk, 0.7 * 1.9))


# keyframes


def test_identity_keyframes_match_direct_extraction():
    clip = gait_clip(GaitParams(speed=1.2, heading=0.3), toy9_skeleton(), 20)
    root, rots = clip_to_poses(clip)
    sk = clip.skeleton
    rows = retarget_keyframes(Pose(root, rots), range(20), JointMapping.identity(sk), sk, sk)
    assert np.allclose(rows, clip.frames, atol=1e-12)


def test_isolated_keyframes_have_zero_velocity():
    clip = gait_clip(GaitParams(speed=1.2), toy9_skeleton(), 30)
    root, rots = clip_to_poses(clip)
    sk = clip.skeleton
    idx = [0, 10, 11, 29]
    rows = retarget_keyframes(Pose(root[idx], rots[idx]), idx, JointMapping.identity(sk), sk, sk)
    r, py = 6 * 9, 6 * 9 + 1
    vel = [r, r + 2] + list(range(r + 3, r + 21))
    for k in (0, 3):
        assert np.all(rows[k, vel] == 0)
        assert np.allclose(rows[k, :py + 1][:r], clip.frames[idx[k], :r], atol=1e-12)
    # frame 11 has its predecessor; frame 10 borrows the forward difference
    assert np.allclose(rows[2], clip.frames[11], atol=1e-12)
    assert np.allclose(rows[1, vel], clip.frames[11, vel], atol=1e-12)
    assert np.allclose(rows[1, :py + 1], clip.frames[10, :py + 1], atol=1e-12)


def test_big_character_halves_canonical_height():
    canon = toy9_skeleton()
    big = canon.scaled(2.0, "big")
    clip = gait_clip(GaitParams(kind="step"), big, 10)
    root, rots = clip_to_poses(clip)
    rows = retarget_keyframes(Pose(root, rots), range(10), JointMapping.identity(big), big, canon)
    py = 6 * 9 + 1
    assert np.allclose(rows[:, py], clip.frames[:, py] / 2, atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_round_trip_preserves_mapped_rotations(seed):
    src, dst = biped15_skeleton(), toy9_skeleton()
    m = JointMapping.from_names([(b, a) for a, b in TOY_TO_BIPED], src, dst)
    pose = random_pose(src, np.random.default_rng(seed), 2)
    back = retarget_pose(retarget_pose(pose, m, src, dst), m.inverse(), dst, src)
    g0, g1 = global_rots(src, pose), global_rots(src, back)
    for a, _ in m.pairs:
        assert np.abs(g0[:, a] - g1[:, a]).max() < 1e-5
    assert np.allclose(back.root_pos, pose.root_pos, atol=1e-12)


# colliders


def test_scale_colliders():
    box = Box((2, 1, 0), (1, 1, 1))
    same = scale_colliders([box], 1.0)[0]
    assert np.array_equal(same.center, box.center) and np.array_equal(same.extent, box.extent)
    half = scale_colliders([box], 0.5)[0]
    assert np.allclose(half.center, [1, 0.5, 0]) and np.allclose(half.extent, [0.5, 0.5, 0.5])
    for bad in (0.0, -1.0, np.inf):
        with pytest.raises(BadRatio):
            scale_colliders([box], bad)


@pytest.mark.parametrize("ratio", [0.1, 0.5, 3.0])
def test_ground_plane_invariant(ratio):
    assert scale_environment(Environment(), ratio).ground == 0.0


# mapping files


def test_mapping_file(tmp_path):
    src, dst = toy9_skeleton(), toy_biped().skeleton
    text = "# canonical -> toy\nHips -> Pelvis\n\nLeftUpLeg -> LeftLeg  # left\nRightUpLeg->RightLeg\n"
    assert parse_mapping(text)[2] == ("RightUpLeg", "RightLeg")
    path = tmp_path / "map.txt"
    path.write_text(text)
    m = load_mapping(path, src, dst)
    assert m.pairs == ((0, 0), (1, 1), (3, 2))
    assert parse_mapping(format_mapping(m, src, dst)) == [("Hips", "Pelvis"), ("LeftUpLeg", "LeftLeg"),
                                                          ("RightUpLeg", "RightLeg")]


def test_mapping_errors():
    src, dst = toy9_skeleton(), toy_biped().skeleton
    with pytest.raises(MappingMismatch):
        JointMapping(((0, 0), (1, 0)))
    with pytest.raises(MappingMismatch):
        JointMapping.from_names([("LeftUpLeg", "LeftLeg")], src, dst)
    with pytest.raises(MappingMismatch):
        JointMapping.from_names([("Hips", "Pelvis"), ("Nope", "LeftLeg")], src, dst)
    with pytest.raises(MappingMismatch):
        parse_mapping("Hips Pelvis\n")
    with pytest.raises(MappingMismatch):
        retarget_pose(Pose(np.zeros(3), np.tile(np.eye(3), (9, 1, 1))), JointMapping(((0, 0), (12, 1))), src, dst)


# reference features


def test_reference_on_identical_character_is_clip_fk():
    sk = toy9_skeleton()
    ch = character_from_skeleton(sk)
    clip = gait_clip(GaitParams(kind="turn", speed=1.0, turn_rate=0.5), sk, 25)
    ref = reference_features(clip, JointMapping.identity(sk), ch)
    assert np.abs(ref.positions - forward_kinematics(clip)).max() < 1e-9
    assert ref.mapped == tuple(range(9))


def test_static_reference_has_zero_velocity():
    sk = toy9_skeleton()
    clip = gait_clip(GaitParams(kind="walk", speed=0.0), sk, 10)
    ref = reference_features(clip, JointMapping.identity(sk), character_from_skeleton(sk))
    assert np.allclose(ref.linear_velocities, 0) and np.allclose(ref.angular_velocities, 0)
    assert np.allclose(ref.qdot, 0)


def test_reference_velocities_are_central_differences():
    sk = toy9_skeleton()
    clip = gait_clip(GaitParams(speed=1.0), sk, 12)
    ref = reference_features(clip, JointMapping.identity(sk), character_from_skeleton(sk))
    mid = (ref.positions[6] - ref.positions[4]) * 30 / 2
    assert np.allclose(ref.linear_velocities[5], mid, atol=1e-12)


def test_scaled_character_reference():
    canon = toy9_skeleton()
    small = character_from_skeleton(canon.scaled(0.5, "small"))
    clip = gait_clip(GaitParams(kind="step"), canon, 15)
    ref = reference_features(clip, JointMapping.identity(canon), small)
    full = reference_features(clip, JointMapping.identity(canon), character_from_skeleton(canon))
    assert np.allclose(ref.positions[:, 0, 1], full.positions[:, 0, 1] * 0.5, atol=1e-12)
    assert np.allclose(ref.rotations, full.rotations, atol=1e-9)


def test_toy_biped_reference_and_state():
    canon, ch = toy9_skeleton(), toy_biped()
    m = JointMapping.from_names([("Hips", "Pelvis"), ("LeftUpLeg", "LeftLeg"), ("RightUpLeg", "RightLeg")],
                                canon, ch.skeleton)
    clip = gait_clip(GaitParams(kind="step", amplitude=0.3), canon, 30)
    ref = reference_features(clip, m, ch)
    _, rots = clip_to_poses(clip)
    # the single hip hinge about x reproduces the canonical thigh swing
    swing = np.arctan2(rots[:, 1, 2, 1], rots[:, 1, 1, 1])
    assert np.allclose(ref.q[:, 7], swing, atol=1e-12)
    s = ref.state(3, n_envs=2)
    assert s.q.shape == (2, ch.nq) and np.allclose(s.time, 0.1)


def test_local_to_angles_three_hinges():
    ch = character_from_skeleton(toy9_skeleton())
    rng = np.random.default_rng(3)
    angles = rng.uniform(-1, 1, (5, ch.dof_count))
    q = np.zeros((5, ch.nq))
    q[:, 3] = 1
    q[:, 7:] = angles
    assert np.allclose(local_to_angles(ch, ch.local_rotations(q)), angles, atol=1e-10)
