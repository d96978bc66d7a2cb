"""Motion tracking with PPO on the articulated simulator.

The controller sees the simulated pose and the next reference pose, both
expressed in the heading frame of the simulated root, and outputs PD
targets for every actuated DOF. Rewards compare simulated and reference
global features on the mapped joints through Gaussian kernels.
"""

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from .autodiff import Adam
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, DimensionMismatch, LengthMismatch, SimDiverged
from .motion import MotionClip, extract_features
from .physics import (CONTROL_DT, ArticulatedCharacter, Environment, SimState, body_kinematics, pd_torques,
                      step_masked)
from .retarget import JointMapping, ReferenceMotion, reference_features
from .rotations import heading_matrix, matrix_angle

# reward ---------------------------------------------------------------------


@dataclass(frozen=True)
class RewardWeights:
    w_gp: float = 0.8
    w_gr: float = 1.0
    w_gv: float = 0.2
    w_gw: float = 0.2
    w_eg: float = 0.001
    k_gp: float = 10.0
    k_gr: float = 50.0
    k_gv: float = 1.0
    k_gw: float = 1.0
    k_eg: float = 0.01

    def __post_init__(self):
        if any(v < 0 for v in asdict(self).values()):
            raise ValueError("reward weights and kernel widths must be non-negative")

    @property
    def max_reward(self) -> float:
        return self.w_gp + self.w_gr + self.w_gv + self.w_gw + self.w_eg


class TrackingFeatures(NamedTuple):
    """Global features of the tracked joints, batched ``(E, J, ...)``."""

    positions: np.ndarray
    rotations: np.ndarray
    linear_velocities: np.ndarray
    angular_velocities: np.ndarray


def kernel(weight: float, k: float, d2):
    return weight * np.exp(-k * np.asarray(d2, dtype=np.float64))


def feature_distances(sim: TrackingFeatures, ref: TrackingFeatures) -> dict:
    """Squared distances per environment: positions, rotation angles, linear and angular velocities."""
    for a, b in zip(sim, ref):
        if np.shape(a) != np.shape(b):
            raise DimensionMismatch(f"feature shapes differ: {np.shape(a)} vs {np.shape(b)}")
    rel = np.swapaxes(ref.rotations, -1, -2) @ sim.rotations
    return {
        "gp": np.sum((sim.positions - ref.positions) ** 2, axis=(-2, -1)),
        "gr": np.sum(matrix_angle(rel) ** 2, axis=-1),
        "gv": np.sum((sim.linear_velocities - ref.linear_velocities) ** 2, axis=(-2, -1)),
        "gw": np.sum((sim.angular_velocities - ref.angular_velocities) ** 2, axis=(-2, -1)),
    }


def compute_reward(sim: TrackingFeatures, ref: TrackingFeatures, weights: RewardWeights = RewardWeights(),
                   power=None):
    """Total reward and per-term breakdown. ``power`` is ``tau * qdot`` per DOF (zero if omitted)."""
    d = feature_distances(sim, ref)
    if power is None:
        power = np.zeros(np.shape(d["gp"]) + (1,))
    d["eg"] = np.sum(np.asarray(power, dtype=np.float64) ** 2, axis=-1)
    terms = {name: kernel(getattr(weights, "w_" + name), getattr(weights, "k_" + name), d[name])
             for name in ("gp", "gr", "gv", "gw", "eg")}
    return sum(terms.values()), terms


# observation ----------------------------------------------------------------


def _rot6(R):
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def build_observation(state: SimState, character: ArticulatedCharacter, target_positions, target_rotations,
                      mapped) -> np.ndarray:
    """``(E, D)`` observation: current pose and next target, both in the simulated root's heading frame.

    Heading frame: rotation about the vertical through the root's facing
    direction, so the observation ignores world translation and yaw while
    keeping tilt relative to gravity.
    """
    bk = body_kinematics(state, character)
    r = character.skeleton.root_index
    root_p = bk.positions[:, r]
    Ht = np.swapaxes(heading_matrix(bk.rotations[:, r]), -1, -2)[:, None]      # (E, 1, 3, 3)
    E = root_p.shape[0]

    def vec(v):
        return (Ht @ v[..., None])[..., 0].reshape(E, -1)

    mapped = list(mapped)
    parts = [
        vec(bk.positions - root_p[:, None]),
        _rot6(Ht @ bk.rotations).reshape(E, -1),
        vec(bk.linear_velocities),
        vec(bk.angular_velocities),
        _rot6(Ht @ np.asarray(target_rotations)).reshape(E, -1),
        vec(np.asarray(target_positions) - bk.positions[:, mapped]),
    ]
    return np.concatenate(parts, axis=1)


def observation_dim(character: ArticulatedCharacter, n_mapped: int) -> int:
    return 15 * character.n_bodies + 9 * n_mapped


# policy ---------------------------------------------------------------------


class RunningNorm(nn.Module):
    """Per-channel running mean and variance (parallel Welford merge)."""

    def __init__(self, dim: int, clip: float = 10.0):
        super().__init__()
        self.register_buffer("mean", torch.zeros(dim, dtype=torch.float64))
        self.register_buffer("var", torch.ones(dim, dtype=torch.float64))
        self.register_buffer("count", torch.zeros((), dtype=torch.float64))
        self.clip = clip

    def update(self, x: np.ndarray) -> None:
        x = torch.as_tensor(np.asarray(x, dtype=np.float64).reshape(-1, self.mean.shape[0]))
        n = x.shape[0]
        if n == 0:
            return
        bm, bv = x.mean(0), x.var(0, unbiased=False)
        tot = self.count + n
        delta = bm - self.mean
        self.mean += delta * n / tot
        self.var.copy_((self.var * self.count + bv * n + delta ** 2 * self.count * n / tot) / tot)
        self.count.fill_(tot)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = (x - self.mean.to(x.dtype)) / torch.sqrt(self.var.to(x.dtype) + 1e-8)
        return z.clamp(-self.clip, self.clip)


def mlp(sizes, out_scale: float = 1.0) -> nn.Sequential:
    layers = []
    for a, b in zip(sizes[:-2], sizes[1:-1]):
        layers += [nn.Linear(a, b), nn.ELU()]
    last = nn.Linear(sizes[-2], sizes[-1])
    with torch.no_grad():
        last.weight.mul_(out_scale)
        last.bias.zero_()
    return nn.Sequential(*layers, last)


class Policy(nn.Module):
    """Gaussian actor with fixed standard deviation and a separate value network."""

    def __init__(self, obs_dim: int, act_dim: int, hidden=(256, 128, 64), action_std: float = 0.05):
        super().__init__()
        self.obs_dim, self.act_dim, self.action_std = obs_dim, act_dim, float(action_std)
        self.hidden = tuple(hidden)
        self.obs_norm = RunningNorm(obs_dim)
        self.ret_norm = RunningNorm(1, clip=1e9)
        self.actor = mlp((obs_dim, *hidden, act_dim), out_scale=0.01)
        self.critic = mlp((obs_dim, *hidden, 1))

    def _in(self, obs):
        obs = torch.as_tensor(obs, dtype=torch.float32)
        return self.obs_norm(obs)

    def mean(self, obs) -> torch.Tensor:
        return self.actor(self._in(obs))

    def value_normalized(self, obs) -> torch.Tensor:
        return self.critic(self._in(obs))[..., 0]

    def value(self, obs) -> np.ndarray:
        """Value in reward units (the critic regresses normalized returns)."""
        with torch.no_grad():
            v = self.value_normalized(obs).double()
        std = torch.sqrt(self.ret_norm.var[0] + 1e-8)
        return (v * std + self.ret_norm.mean[0]).numpy()

    def log_prob(self, obs, actions) -> torch.Tensor:
        return gaussian_log_prob(self.mean(obs), torch.as_tensor(actions, dtype=torch.float32), self.action_std)

    def act(self, obs, rng: np.random.Generator | None, deterministic: bool = False):
        with torch.no_grad():
            mu = self.mean(obs).double().numpy()
        if deterministic or self.action_std == 0 or rng is None:
            return mu, np.zeros(mu.shape[0])
        a = mu + self.action_std * rng.standard_normal(mu.shape)
        return a, gaussian_log_prob_np(mu, a, self.action_std)


def gaussian_log_prob(mean: torch.Tensor, actions: torch.Tensor, std: float) -> torch.Tensor:
    z = (actions - mean) / std
    return -0.5 * (z * z).sum(-1) - mean.shape[-1] * (math.log(std) + 0.5 * math.log(2 * math.pi))


def gaussian_log_prob_np(mean, actions, std):
    z = (actions - mean) / std
    return -0.5 * (z * z).sum(-1) - mean.shape[-1] * (math.log(std) + 0.5 * math.log(2 * math.pi))


class OraclePolicy:
    """Emits the reference joint angles of the next frame (for tests and baselines)."""

    action_std = 0.0

    def __init__(self, venv: "TrackingEnv"):
        self.venv = venv

    def act(self, obs, rng=None, deterministic=True):
        a = self.venv.reference_angles(self.venv.frame + 1)
        if self.venv.config.action_mode == "residual":
            a = np.zeros_like(a)
        return a, np.zeros(a.shape[0])

    def value(self, obs):
        return np.zeros(np.shape(obs)[0])


# environments ----------------------------------------------------------------


@dataclass
class TrackingConfig:
    action_mode: str = "absolute"      # absolute PD targets, or residual on the reference angles
    height_tolerance: float = 0.5      # fraction of hip height
    contact_time: float = 0.1          # seconds of non-foot ground contact before termination
    early_termination: bool = True
    n_sub: int = 8

    def __post_init__(self):
        if self.action_mode not in ("absolute", "residual"):
            raise ValueError(f"unknown action mode {self.action_mode!r}")


class StepResult(NamedTuple):
    obs: np.ndarray
    reward: np.ndarray
    terminated: np.ndarray
    truncated: np.ndarray
    terminal_obs: np.ndarray
    terms: dict


class TrackingEnv:
    """A batch of simulated characters, each tracking one reference from its first frame."""

    def __init__(self, character: ArticulatedCharacter, environment: Environment, references, n_envs: int,
                 weights: RewardWeights = RewardWeights(), config: TrackingConfig | None = None,
                 rng: np.random.Generator | None = None, dt: float = CONTROL_DT):
        self.character, self.environment = character, environment
        self.references = list(references) if not isinstance(references, ReferenceMotion) else [references]
        if not self.references:
            raise ValueError("need at least one reference")
        for ref in self.references:
            if ref.n_frames < 2:
                raise LengthMismatch("references need at least 2 frames")
        mapped = {ref.mapped for ref in self.references}
        if len(mapped) != 1:
            raise DimensionMismatch("all references must track the same joints")
        self.mapped = list(mapped.pop())
        self.n_envs, self.weights = n_envs, weights
        self.config = config or TrackingConfig()
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.dt = dt
        self.ref_id = np.zeros(n_envs, dtype=int)
        self.frame = np.zeros(n_envs, dtype=int)
        self.contact_timer = np.zeros(n_envs)
        self.episode_return = np.zeros(n_envs)
        self.finished = []                      # (length, return) of completed episodes
        self.state = None
        self.reset(np.ones(n_envs, dtype=bool))

    @property
    def obs_dim(self) -> int:
        return observation_dim(self.character, len(self.mapped))

    @property
    def act_dim(self) -> int:
        return self.character.dof_count

    def _gather(self, attr, frames):
        frames = np.asarray(frames)
        out = []
        for e in range(self.n_envs):
            ref = self.references[self.ref_id[e]]
            out.append(getattr(ref, attr)[min(frames[e], ref.n_frames - 1)])
        return np.stack(out)

    def reference_angles(self, frames) -> np.ndarray:
        q = self._gather("q", frames)
        return self.character.joint_angles(q)

    def reference_features(self, frames) -> TrackingFeatures:
        m = self.mapped
        return TrackingFeatures(self._gather("positions", frames)[:, m], self._gather("rotations", frames)[:, m],
                                self._gather("linear_velocities", frames)[:, m],
                                self._gather("angular_velocities", frames)[:, m])

    def reset(self, mask) -> None:
        mask = np.asarray(mask, dtype=bool)
        idx = np.flatnonzero(mask)
        if not idx.size:
            return
        if len(self.references) > 1:
            self.ref_id[idx] = self.rng.integers(len(self.references), size=idx.size)
        self.frame[idx] = 0
        self.contact_timer[idx] = 0
        self.episode_return[idx] = 0
        q = np.stack([self.references[self.ref_id[e]].q[0] for e in range(self.n_envs)])
        qd = np.stack([self.references[self.ref_id[e]].qdot[0] for e in range(self.n_envs)])
        if self.state is None:
            self.state = SimState(q, qd, np.zeros(self.n_envs),
                                  np.zeros((self.n_envs, self.character.n_bodies), dtype=bool))
        else:
            sq, sqd = self.state.q.copy(), self.state.qdot.copy()
            sq[idx], sqd[idx] = q[idx], qd[idx]
            t = self.state.time.copy()
            t[idx] = 0
            c = self.state.contacts.copy()
            c[idx] = False
            self.state = SimState(sq, sqd, t, c)

    def observe(self) -> np.ndarray:
        nxt = self.frame + 1
        return build_observation(self.state, self.character, self._gather("positions", nxt)[:, self.mapped],
                                 self._gather("rotations", nxt)[:, self.mapped], self.mapped)

    def sim_features(self, state: SimState | None = None) -> TrackingFeatures:
        bk = body_kinematics(self.state if state is None else state, self.character)
        m = self.mapped
        return TrackingFeatures(bk.positions[:, m], bk.rotations[:, m], bk.linear_velocities[:, m],
                                bk.angular_velocities[:, m])

    def targets(self, actions) -> np.ndarray:
        actions = np.asarray(actions, dtype=np.float64)
        if actions.shape != (self.n_envs, self.act_dim):
            raise DimensionMismatch(f"actions must be {(self.n_envs, self.act_dim)}, got {actions.shape}")
        if self.config.action_mode == "residual":
            return self.reference_angles(self.frame + 1) + actions
        return actions

    def step(self, actions) -> StepResult:
        ch = self.character
        targets = self.targets(actions)
        new, diverged = step_masked(self.state, None, self.environment, self.dt, character=ch,
                                    n_sub=self.config.n_sub, pd_targets=targets)
        self.state = new
        self.frame = self.frame + 1
        tau = pd_torques(new, targets, ch)
        power = tau * ch.joint_rates(new.qdot)
        reward, terms = compute_reward(self.sim_features(), self.reference_features(self.frame), self.weights, power)
        reward = np.where(diverged, 0.0, reward)
        nonfoot = (new.contacts & ~ch.foot_mask).any(axis=1)
        self.contact_timer = np.where(nonfoot, self.contact_timer + self.dt, 0.0)
        terminated = diverged.copy()
        if self.config.early_termination:
            r = ch.skeleton.root_index
            ref_h = self._gather("positions", self.frame)[:, r, 1]
            sim_h = body_kinematics(new, ch).positions[:, r, 1]
            terminated |= np.abs(sim_h - ref_h) > self.config.height_tolerance * ch.hip_height
            terminated |= self.contact_timer > self.config.contact_time + 1e-9
        last = np.array([self.references[self.ref_id[e]].n_frames - 1 for e in range(self.n_envs)])
        truncated = (self.frame >= last) & ~terminated
        self.episode_return += reward
        terminal_obs = self.observe()
        done = terminated | truncated
        for e in np.flatnonzero(done):
            self.finished.append((int(self.frame[e]), float(self.episode_return[e])))
        self.reset(done)
        obs = self.observe() if done.any() else terminal_obs
        return StepResult(obs, reward, terminated, truncated, terminal_obs, terms)


# rollouts and advantages -----------------------------------------------------


@dataclass
class TransitionBatch:
    observations: np.ndarray   # (T, E, D)
    actions: np.ndarray        # (T, E, A)
    log_probs: np.ndarray      # (T, E)
    rewards: np.ndarray        # (T, E)
    values: np.ndarray         # (T + 1, E), last row bootstraps
    dones: np.ndarray          # (T, E)
    bootstrap: np.ndarray      # (T, E) value of the terminal state for truncated episodes
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    @property
    def horizon(self) -> int:
        return self.rewards.shape[0]


def rollout(policy, venv: TrackingEnv, horizon: int, rng: np.random.Generator | None,
            deterministic: bool = False) -> TransitionBatch:
    """Collect ``horizon`` steps from every environment with a frozen policy."""
    E = venv.n_envs
    obs_l, act_l, lp_l, rew_l, val_l, done_l, boot_l = [], [], [], [], [], [], []
    obs = venv.observe()
    for _ in range(horizon):
        action, logp = policy.act(obs, rng, deterministic)
        value = policy.value(obs)
        res = venv.step(action)
        boot = np.zeros(E)
        if res.truncated.any():
            boot = np.where(res.truncated, policy.value(res.terminal_obs), 0.0)
        obs_l.append(obs)
        act_l.append(action)
        lp_l.append(logp)
        rew_l.append(res.reward)
        val_l.append(value)
        done_l.append(res.terminated | res.truncated)
        boot_l.append(boot)
        obs = res.obs
    val_l.append(policy.value(obs))
    return TransitionBatch(np.stack(obs_l), np.stack(act_l), np.stack(lp_l), np.stack(rew_l), np.stack(val_l),
                           np.stack(done_l), np.stack(boot_l))


def gae(rewards, values, dones, gamma: float = 0.99, lam: float = 0.95):
    """Generalized advantage estimation over a ``(T, ...)`` rollout.

    ``values`` has ``T + 1`` rows; a done flag at step ``t`` cuts both the
    bootstrap and the recursion after ``t``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    T = rewards.shape[0]
    if values.shape[0] != T + 1 or values.shape[1:] != rewards.shape[1:] or dones.shape != rewards.shape:
        raise LengthMismatch(f"rewards {rewards.shape}, values {values.shape}, dones {dones.shape}")
    adv = np.zeros_like(rewards)
    last = np.zeros(rewards.shape[1:])
    for t in reversed(range(T)):
        keep = 1.0 - dones[t]
        delta = rewards[t] + gamma * values[t + 1] * keep - values[t]
        last = delta + gamma * lam * keep * last
        adv[t] = last
    return adv, adv + values[:-1]


def finish_batch(batch: TransitionBatch, gamma: float = 0.99, lam: float = 0.95) -> TransitionBatch:
    """Fill advantages and returns; truncated episodes bootstrap from their terminal state."""
    adv, ret = gae(batch.rewards + gamma * batch.bootstrap, batch.values, batch.dones, gamma, lam)
    batch.advantages, batch.returns = adv, ret
    return batch


# PPO ------------------------------------------------------------------------


@dataclass
class PPOConfig:
    iterations: int = 500
    n_envs: int = 16
    horizon: int = 15
    hidden: tuple = (256, 128, 64)
    action_std: float = 0.05
    lr: float = 1e-4
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    epochs: int = 5
    minibatches: int = 4
    value_coef: float = 1.0
    max_grad_norm: float | None = 1.0
    seed: int = 0
    tracking: TrackingConfig = field(default_factory=TrackingConfig)

    def __post_init__(self):
        if isinstance(self.tracking, dict):
            self.tracking = TrackingConfig(**self.tracking)
        self.hidden = tuple(self.hidden)


def clipped_surrogate(log_probs, old_log_probs, advantages, clip: float = 0.2) -> torch.Tensor:
    """Per-sample clipped objective (to be maximized)."""
    ratio = torch.exp(log_probs - old_log_probs)
    return torch.minimum(ratio * advantages, ratio.clamp(1 - clip, 1 + clip) * advantages)


def normalize_advantages(adv) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def ppo_update(policy: Policy, optimizer: Adam, batch: TransitionBatch, config: PPOConfig,
               rng: np.random.Generator) -> dict:
    if batch.advantages is None:
        raise ValueError("compute advantages before the update")
    obs = torch.as_tensor(batch.observations.reshape(-1, policy.obs_dim), dtype=torch.float32)
    act = torch.as_tensor(batch.actions.reshape(-1, policy.act_dim), dtype=torch.float32)
    # the acting policy is unchanged until the first step below, so its log-probabilities
    # are recomputed here in the same precision as the update (ratios start at exactly 1)
    with torch.no_grad():
        old = policy.log_prob(obs, act)
    adv = torch.as_tensor(normalize_advantages(batch.advantages.reshape(-1)), dtype=torch.float32)
    policy.ret_norm.update(batch.returns.reshape(-1, 1))
    std = math.sqrt(float(policy.ret_norm.var[0]) + 1e-8)
    ret = torch.as_tensor((batch.returns.reshape(-1) - float(policy.ret_norm.mean[0])) / std, dtype=torch.float32)
    B = obs.shape[0]
    size = max(1, B // config.minibatches)
    with torch.no_grad():
        first_ratio = torch.exp(policy.log_prob(obs, act) - old)
        behaviour_gap = (old.double() - torch.as_tensor(batch.log_probs.reshape(-1))).abs().max()
    actor_losses, value_losses = [], []
    for _ in range(config.epochs):
        perm = rng.permutation(B)
        for start in range(0, B, size):
            mb = torch.as_tensor(perm[start:start + size])
            surr = clipped_surrogate(policy.log_prob(obs[mb], act[mb]), old[mb], adv[mb], config.clip)
            actor_loss = -surr.mean()
            value_loss = ((policy.value_normalized(obs[mb]) - ret[mb]) ** 2).mean()
            optimizer.step(actor_loss + config.value_coef * value_loss)
            actor_losses.append(float(actor_loss.detach()))
            value_losses.append(float(value_loss.detach()))
    return {"actor_loss": float(np.mean(actor_losses)), "value_loss": float(np.mean(value_losses)),
            "first_ratio_deviation": float((first_ratio - 1).abs().max()),
            "behaviour_log_prob_gap": float(behaviour_gap)}


def make_policy(venv: TrackingEnv, config: PPOConfig) -> Policy:
    torch.manual_seed(config.seed)
    return Policy(venv.obs_dim, venv.act_dim, config.hidden, config.action_std)


def policy_parameters(policy: Policy) -> list:
    return [p for p in policy.parameters() if p.requires_grad]


CSV_FIELDS = ("iteration", "mean_reward", "episode_length", "actor_loss", "value_loss")


def train_controller(character: ArticulatedCharacter, environment: Environment, references,
                     config: PPOConfig = PPOConfig(), weights: RewardWeights = RewardWeights(),
                     log_path=None, callback=None, policy: Policy | None = None):
    """PPO training loop. Returns ``(policy, history)``; history rows follow :data:`CSV_FIELDS`."""
    rng = np.random.default_rng(config.seed)
    env_rng, act_rng, upd_rng = (np.random.default_rng(s) for s in rng.integers(0, 2 ** 63, 3))
    venv = TrackingEnv(character, environment, references, config.n_envs, weights, config.tracking, env_rng)
    with torch.random.fork_rng():
        policy = policy or make_policy(venv, config)
    opt = Adam(policy_parameters(policy), config.lr, max_grad_norm=config.max_grad_norm)
    history = []
    fh = writer = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(CSV_FIELDS)
    try:
        for it in range(config.iterations):
            n_done = len(venv.finished)
            batch = finish_batch(rollout(policy, venv, config.horizon, act_rng),
                                 config.gamma, config.lam)
            report = ppo_update(policy, opt, batch, config, upd_rng)
            policy.obs_norm.update(batch.observations.reshape(-1, policy.obs_dim))
            eps = venv.finished[n_done:]
            ep_len = float(np.mean([e[0] for e in eps])) if eps else float("nan")
            row = {"iteration": it, "mean_reward": float(batch.rewards.mean()), "episode_length": ep_len,
                   "actor_loss": report["actor_loss"], "value_loss": report["value_loss"]}
            history.append(row)
            if writer is not None:
                writer.writerow([row[k] for k in CSV_FIELDS])
            if callback is not None and callback(it, row, policy) is False:
                break
    finally:
        if fh is not None:
            fh.close()
    return policy, history


# adaptation ------------------------------------------------------------------


@dataclass
class AdaptResult:
    clip: MotionClip
    q: np.ndarray                 # (N, nq) simulated coordinates per frame
    positions: np.ndarray         # (N, J, 3) simulated joint positions
    rewards: np.ndarray           # (N - 1,)
    foot_penetration: np.ndarray  # (N,) deepest foot sphere below the ground, metres (>= 0)


def _foot_penetration(character: ArticulatedCharacter, q, environment: Environment) -> np.ndarray:
    from .physics import _kinematics
    if environment.ground is None:
        return np.zeros(np.shape(q)[0])
    kin = _kinematics(character, q)
    feet = character.foot_mask[character.sphere_body]
    if not feet.any():
        return np.zeros(np.shape(q)[0])
    b = character.sphere_body[feet]
    c = kin.x[:, b] + np.einsum("esab,sb->esa", kin.R[:, b], character.sphere_local[feet])
    pen = environment.ground - (c[..., 1] - character.sphere_radius[feet])
    return np.maximum(pen.max(axis=1), 0.0)


def track(policy, character: ArticulatedCharacter, environment: Environment, reference: ReferenceMotion,
          config: TrackingConfig | None = None, weights: RewardWeights = RewardWeights()) -> AdaptResult:
    """Deterministic (mean action) rollout over the whole reference, without early termination."""
    config = config or TrackingConfig()
    cfg = TrackingConfig(config.action_mode, config.height_tolerance, config.contact_time, False, config.n_sub)
    venv = TrackingEnv(character, environment, [reference], 1, weights, cfg)
    if isinstance(policy, type) and policy is OraclePolicy:
        policy = OraclePolicy(venv)
    elif isinstance(policy, OraclePolicy):
        policy = OraclePolicy(venv)
    N = reference.n_frames
    qs = [venv.state.q[0].copy()]
    rewards = []
    for n in range(N - 1):
        obs = venv.observe()
        action, _ = policy.act(obs, None, deterministic=True)
        targets = venv.targets(action)
        new, diverged = step_masked(venv.state, None, environment, venv.dt, character=character,
                                    n_sub=cfg.n_sub, pd_targets=targets)
        if diverged.any():
            raise SimDiverged("adaptation rollout diverged", frame=n + 1)
        venv.state = new
        venv.frame = venv.frame + 1
        power = pd_torques(new, targets, character) * character.joint_rates(new.qdot)
        r, _ = compute_reward(venv.sim_features(), venv.reference_features(venv.frame), weights, power)
        rewards.append(float(r[0]))
        qs.append(new.q[0].copy())
    q = np.stack(qs)
    sk = character.skeleton
    pos = body_kinematics(SimState(q, np.zeros((N, character.nv)), 0.0,
                                   np.zeros((N, character.n_bodies), dtype=bool)), character).positions
    rots = character.local_rotations(q)
    root = character.root_position(q) - sk.joints[sk.root_index].offset
    clip = extract_features(root, rots, sk, reference.fps)
    return AdaptResult(clip, q, pos, np.array(rewards), _foot_penetration(character, q, environment))


def adapt_motion(policy, character: ArticulatedCharacter, environment: Environment, clip: MotionClip,
                 mapping: JointMapping, config: TrackingConfig | None = None) -> MotionClip:
    """Stage-2 adaptation of a canonical clip onto ``character``."""
    return track(policy, character, environment, reference_features(clip, mapping, character), config).clip


def redistribute_keyframe_error(root_positions, keyframes: dict, window: int) -> np.ndarray:
    """Root trajectory ``(N, 3)`` with keyframe errors ramped in over the preceding ``window`` frames.

    ``keyframes`` maps frame index to the desired root position. The offset
    reaches the full error at the keyframe, falls linearly to the previous
    offset ``window`` frames earlier, and is held afterwards.
    """
    if window < 1:
        raise ValueError("window must be at least 1")
    root = np.asarray(root_positions, dtype=np.float64)
    N = root.shape[0]
    offset = np.zeros_like(root)
    held = np.zeros(root.shape[1:])
    prev_k = -1
    for k in sorted(keyframes):
        if not 0 <= k < N:
            raise LengthMismatch(f"keyframe {k} outside 0..{N - 1}")
        err = np.asarray(keyframes[k], dtype=np.float64) - root[k]
        offset[prev_k + 1:k + 1] = held
        for j in range(0, min(window, k - prev_k)):
            offset[k - j] = held + (err - held) * (window - j) / window
        held, prev_k = err, k
    offset[prev_k + 1:] = held
    return root + offset


def correct_clip(clip: MotionClip, adapted_root, keyframes: dict, window: int) -> MotionClip:
    """Reference clip whose root follows the redistributed trajectory; rotations are unchanged."""
    from .motion import clip_to_poses
    _, rots = clip_to_poses(clip)
    sk = clip.skeleton
    root = redistribute_keyframe_error(adapted_root, keyframes, window) - sk.joints[sk.root_index].offset
    return extract_features(root, rots, sk, clip.fps, clip.keyframe_indices)


def refine_motion(policy, character: ArticulatedCharacter, environment: Environment, reference: ReferenceMotion,
                  keyframes: dict, window: int, config: TrackingConfig | None = None):
    """One redistribute and re-adapt pass. Returns ``(first, second)`` :class:`AdaptResult`.

    The root error of the first pass at each keyframe (desired minus adapted)
    is ramped into the reference root over ``window`` frames, and the shifted
    reference is tracked again.
    """
    sk = character.skeleton
    first = track(policy, character, environment, reference, config)
    ref_root = character.root_position(reference.q)
    adapted = character.root_position(first.q)
    shifted = {k: ref_root[k] + np.asarray(p, dtype=np.float64) - adapted[k] for k, p in keyframes.items()}
    base = extract_features(ref_root - sk.joints[sk.root_index].offset, character.local_rotations(reference.q), sk,
                            reference.fps)
    corrected = correct_clip(base, ref_root, shifted, window)
    second = track(policy, character, environment,
                   reference_features(corrected, JointMapping.identity(sk), character), config)
    return first, second


def write_history(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for row in history:
            w.writerow([row[k] for k in CSV_FIELDS])


def save_policy(path, policy: Policy, tracking: TrackingConfig | None = None, **meta) -> None:
    info = {"kind": "policy", "obs_dim": policy.obs_dim, "act_dim": policy.act_dim, "hidden": list(policy.hidden),
            "action_std": policy.action_std, "tracking": asdict(tracking or TrackingConfig()), **meta}
    save_checkpoint(path, policy.state_dict(), info)


def load_policy(path):
    """Returns ``(policy, tracking_config, meta)``."""
    tensors, meta = load_checkpoint(path)
    if not meta or meta.get("kind") != "policy":
        raise ConfigError(f"{path} does not hold a policy")
    policy = Policy(meta["obs_dim"], meta["act_dim"], meta["hidden"], meta["action_std"])
    policy.load_state_dict(tensors)
    return policy, TrackingConfig(**meta["tracking"]), meta
