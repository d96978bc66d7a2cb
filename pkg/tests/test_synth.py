import numpy as np

from inbetween.motion import MotionClip, clip_to_poses, feature_slices, reextract
from inbetween.synth import GaitParams, SynthConfig, add_root_drift, canonical_skeleton, gait_clip, synth_dataset


def test_same_seed_bitwise_identical():
    a = synth_dataset(SynthConfig(n_clips=8), 0)
    b = synth_dataset(SynthConfig(n_clips=8), 0)
    assert all(np.array_equal(x.frames, y.frames) for x, y in zip(a, b))
    c = synth_dataset(SynthConfig(n_clips=8), 1)
    assert not np.array_equal(a[0].frames, c[0].frames)


def test_zero_speed_walk_is_static():
    clip = gait_clip(GaitParams(kind="walk", speed=0.0), canonical_skeleton("biped15"), 30)
    s = feature_slices(clip.skeleton.n_joints)
    assert np.all(clip.frames == clip.frames[0])
    assert not clip.frames[:, s["vx"]].any()
    assert not clip.frames[:, s["vz"]].any()
    assert not clip.frames[:, s["u"]].any()


def test_invariant_sweep():
    for name in ("toy9", "biped15"):
        clips = synth_dataset(SynthConfig(n_clips=100, n_frames=60, skeleton=name), 11)
        assert len(clips) == 100
        for c in clips:
            assert isinstance(c, MotionClip)
            assert 8 <= c.skeleton.n_joints <= 22
            assert c.frames.shape == (60, 6 * c.skeleton.n_joints + 21)
            assert np.all(np.isfinite(c.frames))
            assert np.abs(reextract(c).frames - c.frames).max() < 1e-6


def test_all_kinds_present():
    kinds = set()
    rng = np.random.default_rng(0)
    from inbetween.synth import sample_params
    for _ in range(200):
        kinds.add(sample_params(rng, SynthConfig()).kind)
    assert kinds == {"walk", "turn", "squat", "step"}


def test_root_drift_is_a_linear_ramp():
    clip = gait_clip(GaitParams(kind="sway", amplitude=0.1), canonical_skeleton(), 31)
    assert np.abs(add_root_drift(clip, [0, 0, 0]).frames - clip.frames).max() < 1e-12
    root, rots = clip_to_poses(clip)
    moved_root, moved_rots = clip_to_poses(add_root_drift(clip, [0.3, 0, -0.6]))
    np.testing.assert_allclose(moved_root - root, np.linspace(0, 1, 31)[:, None] * [0.3, 0, -0.6], atol=1e-9)
    np.testing.assert_allclose(moved_rots, rots, atol=1e-12)
