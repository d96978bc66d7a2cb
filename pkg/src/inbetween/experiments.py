"""Desk-scale experiments shared by the acceptance suite and scripts/."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import TrainConfig, sample_inbetween_batch, train_diffusion
from .metrics import AutoencoderConfig, interpolation_baseline, k_error, k_fid, keyframe_indices, train_autoencoder
from .physics import Environment, toy_biped
from .retarget import JointMapping, reference_features
from .rl import (PPOConfig, RewardWeights, TrackingConfig, refine_motion, track, train_controller)
from .synth import GaitParams, SynthConfig, add_root_drift, gait_clip, synth_dataset, toy9_skeleton

BIPED_MAP = [("Hips", "Pelvis"), ("LeftUpLeg", "LeftLeg"), ("RightUpLeg", "RightLeg")]
ENCODER_SEED = 1000
HELDOUT_SEED = 2000


# diffusion vs interpolation -------------------------------------------------------


@dataclass
class KfidResult:
    seed: int
    kfid_model: float
    kfid_interpolation: float
    kerr_model: float
    kerr_interpolation: float


def metric_encoder(n_clips: int = 100, n_frames: int = 60):
    """Repo-local latent encoder, trained on its own synthetic set."""
    return train_autoencoder(synth_dataset(SynthConfig(n_clips=n_clips, n_frames=n_frames), ENCODER_SEED),
                             AutoencoderConfig())


def kfid_experiment(seed: int, encoder, steps: int = 2000, n_train: int = 20, n_heldout: int = 20,
                    n_frames: int = 61, interval: int = 30, log_path=None) -> KfidResult:
    """Train a denoiser on ``n_train`` gait clips and score it against linear interpolation."""
    train = synth_dataset(SynthConfig(n_clips=n_train, n_frames=60), seed)
    model, schedule, _ = train_diffusion(train, TrainConfig(steps=steps, seed=seed), log_path=log_path)
    held = synth_dataset(SynthConfig(n_clips=n_heldout, n_frames=n_frames), HELDOUT_SEED + seed)
    idx = keyframe_indices(n_frames, interval)
    gen = sample_inbetween_batch(model, schedule, [c.frames[idx] for c in held], [idx] * len(held), n_frames,
                                 np.random.default_rng(seed))
    interp = [interpolation_baseline(c.frames[idx], idx, n_frames, c.skeleton) for c in held]
    return KfidResult(seed, k_fid(gen, held, encoder), k_fid(interp, held, encoder),
                      float(np.mean([k_error(g, r, idx) for g, r in zip(gen, held)])),
                      float(np.mean([k_error(g, r, idx) for g, r in zip(interp, held)])))


# tracking ---------------------------------------------------------------------------


def _direction(rng) -> np.ndarray:
    a = rng.uniform(-np.pi, np.pi)
    return np.array([np.sin(a), 0.0, np.cos(a)])


def sway_references(n_clips: int, seed: int, n_frames: int = 90, max_drift: float = 0.0,
                    amplitude_range=(0.08, 0.16), frequency_range=(0.3, 0.5)):
    """Sway clips retargeted to the toy biped, each with up to ``max_drift`` m of linear root drift."""
    canon, character = toy9_skeleton(), toy_biped()
    mapping = JointMapping.from_names(BIPED_MAP, canon, character.skeleton)
    rng = np.random.default_rng(seed)
    refs = []
    for _ in range(n_clips):
        clip = gait_clip(GaitParams(kind="sway", amplitude=rng.uniform(*amplitude_range),
                                    frequency=rng.uniform(*frequency_range), heading=rng.uniform(-np.pi, np.pi)),
                         canon, n_frames)
        if max_drift > 0:
            clip = add_root_drift(clip, rng.uniform(0, max_drift) * _direction(rng))
        refs.append(reference_features(clip, mapping, character))
    return character, refs


def tracking_config(iterations: int = 500, seed: int = 0) -> PPOConfig:
    return PPOConfig(iterations=iterations, n_envs=16, horizon=32, lr=3e-4, seed=seed,
                     tracking=TrackingConfig(action_mode="absolute"))


def train_tracker(iterations: int = 500, seed: int = 0, n_clips: int = 8, max_drift: float = 0.08,
                  log_path=None, callback=None):
    """PPO tracking controller for the toy biped. Returns ``(policy, history, character, environment)``."""
    character, refs = sway_references(n_clips, seed, max_drift=max_drift)
    env = Environment()
    policy, history = train_controller(character, env, refs, tracking_config(iterations, seed), RewardWeights(),
                                       log_path=log_path, callback=callback)
    return policy, history, character, env


@dataclass
class TrackingEval:
    mean_reward: float
    max_foot_penetration: float


def evaluate_tracker(policy, character, env, n_clips: int = 4, seed: int = 500) -> TrackingEval:
    """Deterministic tracking of held-out sway clips: mean per-step reward and worst foot penetration."""
    _, refs = sway_references(n_clips, seed)
    results = [track(policy, character, env, ref) for ref in refs]
    return TrackingEval(float(np.mean([r.rewards.mean() for r in results])),
                        float(max(r.foot_penetration.max() for r in results)))


@dataclass
class CorrectionResult:
    seed: int
    first_error: float
    second_error: float
    max_foot_penetration: float


def correction_experiment(policy, character, env, seed: int, drift: float = 0.06, keys=(29, 59, 89),
                          window: int = 10) -> CorrectionResult:
    """Keyframe root error of one tracking pass versus one redistribute and re-adapt pass.

    The drift runs sideways (between the feet). The toy biped has point feet
    and no ankles, so it cannot hold its pelvis ahead of or behind the feet.
    """
    canon = toy9_skeleton()
    rng = np.random.default_rng(seed)
    mapping = JointMapping.from_names(BIPED_MAP, canon, character.skeleton)
    heading = rng.uniform(-np.pi, np.pi)
    clip = gait_clip(GaitParams(kind="sway", amplitude=rng.uniform(0.1, 0.16), frequency=0.5, heading=heading),
                     canon, 90)
    side = np.array([np.cos(heading), 0.0, -np.sin(heading)]) * rng.choice([-1.0, 1.0])
    ref = reference_features(add_root_drift(clip, drift * side), mapping, character)
    targets = {k: character.root_position(ref.q[k:k + 1])[0] for k in keys}
    first, second = refine_motion(policy, character, env, ref, targets, window)

    def err(res):
        root = character.root_position(res.q)
        return float(np.mean([np.linalg.norm(root[k] - p) for k, p in targets.items()]))
    return CorrectionResult(seed, err(first), err(second),
                            float(max(first.foot_penetration.max(), second.foot_penetration.max())))
