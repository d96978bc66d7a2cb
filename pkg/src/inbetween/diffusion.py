"""Keyframe-conditioned denoising diffusion over motion features.

The network predicts clean motion x0 directly. Reverse steps use the DDPM
posterior q(x_{t-1} | x_t, x0_hat). Keyframe rows are held at their clean
values by the input composition, by the masked transformer residuals, and
finally by overwriting them in feature space.
"""

import csv
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from .attention import RelativeSelfAttention, sinusoidal_embedding
from .autodiff import Adam
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import BadSchedule, ConfigError, IndexOutOfRange, ShapeMismatch, TooShort, UntrainedModel
from .motion import MotionClip, NormStats, Skeleton
from .synth import canonical_skeleton
from .torchfk import features_to_positions

ALPHA_BAR_T_MAX = 1e-3
MAX_BETA = 0.9999


# --- schedule -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)
    alpha_bars_prev: np.ndarray = field(init=False)
    posterior_variance: np.ndarray = field(init=False)
    posterior_c1: np.ndarray = field(init=False)   # weight on x0_hat
    posterior_c2: np.ndarray = field(init=False)   # weight on x_t

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size == 0 or np.any(b <= 0) or np.any(b >= 1):
            raise BadSchedule("betas must be a non-empty vector in (0, 1)")
        a = 1.0 - b
        ab = np.cumprod(a)
        if ab[-1] >= ALPHA_BAR_T_MAX:
            raise BadSchedule(f"alpha_bar_T = {ab[-1]:.3g} is not below {ALPHA_BAR_T_MAX}")
        prev = np.concatenate([[1.0], ab[:-1]])
        for name, val in [("betas", b), ("alphas", a), ("alpha_bars", ab), ("alpha_bars_prev", prev),
                          ("posterior_variance", b * (1 - prev) / (1 - ab)),
                          ("posterior_c1", np.sqrt(prev) * b / (1 - ab)),
                          ("posterior_c2", np.sqrt(a) * (1 - prev) / (1 - ab))]:
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def T(self) -> int:
        return self.betas.shape[0]


def make_schedule(T: int, kind: str = "linear", beta_start: float = 1e-4, beta_end: float = 0.02,
                  scale_with_T: bool = True, cosine_s: float = 0.008) -> NoiseSchedule:
    """Linear or cosine beta schedule.

    The linear endpoints are given for T=1000 and, with ``scale_with_T``,
    multiplied by ``1000 / T`` so shorter chains still reach near-pure noise.
    """
    if T < 1:
        raise BadSchedule("T must be at least 1")
    if kind == "linear":
        scale = 1000.0 / T if scale_with_T else 1.0
        b0, b1 = min(beta_start * scale, MAX_BETA), min(beta_end * scale, MAX_BETA)
        betas = np.linspace(b0, b1, T) if T > 1 else np.array([b1])
    elif kind == "cosine":
        s = np.arange(T + 1) / T
        f = np.cos((s + cosine_s) / (1 + cosine_s) * math.pi / 2) ** 2
        ab = f / f[0]
        betas = np.clip(1 - ab[1:] / ab[:-1], 1e-8, MAX_BETA)
    else:
        raise BadSchedule(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(betas)


def _at(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    """Schedule entries for 1-based steps ``t``, shaped to broadcast against ``like``."""
    t = torch.as_tensor(t)
    if torch.any(t < 1) or torch.any(t > len(values)):
        raise IndexOutOfRange(f"timestep outside [1, {len(values)}]")
    v = torch.tensor(values, dtype=like.dtype)[t - 1]
    return v.reshape(v.shape + (1,) * (like.dim() - v.dim()))


def q_sample(x0: torch.Tensor, t, noise: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    ab = _at(schedule.alpha_bars, t, x0)
    return ab.sqrt() * x0 + (1 - ab).sqrt() * noise


def mask_compose(x_t, x0, mask):
    """``x_t`` where ``mask`` is 1 and ``x0`` where it is 0 (keyframe rows copied exactly)."""
    if x_t.shape != x0.shape or x_t.shape != mask.shape:
        raise ShapeMismatch(f"shapes {tuple(x_t.shape)}, {tuple(x0.shape)}, {tuple(mask.shape)} differ")
    if isinstance(x_t, np.ndarray):
        return np.where(mask > 0.5, x_t, x0)
    return torch.where(mask > 0.5, x_t, x0)


# --- network ------------------------------------------------------------------

@dataclass
class DenoiserConfig:
    dim: int
    d_enc: int = 64
    d_time: int = 32
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    max_relative_distance: int = 512
    T: int = 100
    schedule: str = "linear"
    skeleton: str = "toy9"

    @property
    def d_model(self) -> int:
        return self.d_enc + self.d_time


def _mlp(d_in, d_hidden, d_out):
    return nn.Sequential(nn.Linear(d_in, d_hidden), nn.ReLU(), nn.Linear(d_hidden, d_out))


class MaskedLayer(nn.Module):
    def __init__(self, d_model, n_heads, d_ff, max_rel):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = RelativeSelfAttention(d_model, n_heads, max_rel)
        self.ln2 = nn.LayerNorm(d_model)
        self.ff = _mlp(d_model, d_ff, d_model)

    def forward(self, h, m):
        h = h + self.attn(self.ln1(h)) * m
        return h + self.ff(self.ln2(h)) * m


class Denoiser(nn.Module):
    """MLP encoder, keyframe-masked relative-attention layers, MLP decoder."""

    def __init__(self, config: DenoiserConfig, stats: NormStats | None = None):
        super().__init__()
        if config.d_time % 2:
            raise ConfigError("d_time must be even")
        self.config = config
        self.encoder = _mlp(config.dim, config.d_enc, config.d_enc)
        self.time_mlp = _mlp(config.d_time, config.d_time, config.d_time)
        self.layers = nn.ModuleList(MaskedLayer(config.d_model, config.n_heads, config.d_ff,
                                                config.max_relative_distance) for _ in range(config.n_layers))
        self.decoder = _mlp(config.d_model, config.d_model, config.dim)
        stats = stats or NormStats.identity(config.dim)
        self.register_buffer("mean", torch.as_tensor(stats.mean, dtype=torch.get_default_dtype()))
        self.register_buffer("std", torch.as_tensor(stats.std, dtype=torch.get_default_dtype()))
        self.register_buffer("trained", torch.zeros((), dtype=torch.uint8))

    @property
    def stats(self) -> NormStats:
        return NormStats(self.mean.double().numpy(), self.std.double().numpy())

    def forward(self, x_tilde, t, row_mask, return_latents: bool = False):
        """``x_tilde`` ``(B, N, D)``, ``t`` ``(B,)``, ``row_mask`` ``(B, N)`` with 0 at keyframes."""
        if x_tilde.shape[-1] != self.config.dim:
            raise ShapeMismatch(f"feature width {x_tilde.shape[-1]} != {self.config.dim}")
        B, N, _ = x_tilde.shape
        temb = self.time_mlp(sinusoidal_embedding(torch.as_tensor(t), self.config.d_time).to(x_tilde.dtype))
        h = torch.cat([self.encoder(x_tilde), temb.reshape(B, 1, -1).expand(B, N, -1)], dim=-1)
        m = row_mask.to(x_tilde.dtype)[..., None]
        latents = [h]
        for layer in self.layers:
            h = layer(h, m)
            latents.append(h)
        out = self.decoder(h)
        return (out, latents) if return_latents else out


def denoise_forward(model: Denoiser, x_tilde, t, mask):
    """Predict clean features from composed input; ``mask`` is an ``N x D`` or ``B x N x D`` keyframe mask."""
    if mask.shape != x_tilde.shape:
        raise ShapeMismatch(f"mask {tuple(mask.shape)} vs input {tuple(x_tilde.shape)}")
    single = x_tilde.dim() == 2
    if single:
        x_tilde, mask = x_tilde[None], mask[None]
    t = torch.as_tensor(t).reshape(-1).expand(x_tilde.shape[0])
    out = model(x_tilde, t, mask[..., 0])
    return out[0] if single else out


# --- losses -------------------------------------------------------------------

class LossTerms(NamedTuple):
    simple: torch.Tensor
    rot: torch.Tensor
    pos: torch.Tensor
    total: torch.Tensor


def losses(x0_hat, x0, skeleton: Skeleton, stats: NormStats | None = None,
           weights=(1.0, 1.0, 0.02)) -> LossTerms:
    """Reconstruction, rotation and FK position losses on normalized ``(..., N, D)`` features.

    Rotation and position terms are per-frame l1 sums averaged over frames,
    computed after denormalizing with ``stats``.
    """
    simple = ((x0_hat - x0) ** 2).mean()
    if stats is not None:
        mean = torch.as_tensor(stats.mean, dtype=x0.dtype)
        std = torch.as_tensor(stats.std, dtype=x0.dtype)
        x0_hat, x0 = x0_hat * std + mean, x0 * std + mean
    r = 6 * skeleton.n_joints
    rot = (x0_hat[..., :r] - x0[..., :r]).abs().sum(-1).mean()
    pos = (features_to_positions(x0_hat, skeleton) - features_to_positions(x0, skeleton)).abs().sum((-1, -2)).mean()
    w_s, w_r, w_p = weights
    return LossTerms(simple, rot, pos, w_s * simple + w_r * rot + w_p * pos)


# --- training -----------------------------------------------------------------

@dataclass
class TrainConfig:
    constrained_rate: float = 0.2
    window: int = 60
    batch_size: int = 16
    lr: float = 1e-3
    steps: int = 2000
    lambda_simple: float = 1.0
    lambda_rot: float = 1.0
    lambda_pos: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if min(self.lambda_simple, self.lambda_rot, self.lambda_pos) < 0:
            raise ConfigError("loss weights must be non-negative")
        if not 0.0 <= self.constrained_rate <= 1.0:
            raise ConfigError("constrained_rate must lie in [0, 1]")

    @property
    def weights(self):
        return (self.lambda_simple, self.lambda_rot, self.lambda_pos)


def sample_row_masks(rng: np.random.Generator, batch: int, n_frames: int, rate: float) -> np.ndarray:
    """``(batch, N)`` masks with 0 at keyframes; counts uniform on ``0..ceil(rate N)``."""
    masks = np.ones((batch, n_frames))
    cap = min(math.ceil(rate * n_frames), n_frames)
    for b in range(batch):
        k = rng.integers(0, cap + 1)
        masks[b, rng.choice(n_frames, size=k, replace=False)] = 0.0
    return masks


class Trainer:
    """Owns the optimizer state and the random stream for one training run."""

    def __init__(self, model: Denoiser, schedule: NoiseSchedule, config: TrainConfig, skeleton: Skeleton):
        self.model, self.schedule, self.config, self.skeleton = model, schedule, config, skeleton
        self.optimizer = Adam(model.parameters(), config.lr)
        self.rng = np.random.default_rng(config.seed)

    def train_step(self, batch: torch.Tensor) -> dict:
        """One Adam step on a normalized ``(B, N, D)`` batch."""
        cfg, rng = self.config, self.rng
        B, N, D = batch.shape
        row_mask = torch.as_tensor(sample_row_masks(rng, B, N, cfg.constrained_rate), dtype=batch.dtype)
        t = torch.as_tensor(rng.integers(1, self.schedule.T + 1, size=B))
        noise = torch.as_tensor(rng.standard_normal((B, N, D)), dtype=batch.dtype)
        mask = row_mask[..., None].expand(B, N, D)
        x_tilde = mask_compose(q_sample(batch, t, noise, self.schedule), batch, mask)
        terms = losses(self.model(x_tilde, t, row_mask), batch, self.skeleton, self.model.stats, cfg.weights)
        self.optimizer.step(terms.total)
        self.model.trained.fill_(1)
        row = {"step": self.optimizer.state.step}
        row.update({f"L_{k}": float(v.detach()) for k, v in terms._asdict().items()})
        return row

    def sample_batch(self, data: list) -> torch.Tensor:
        n = self.config.window
        out = []
        for i in self.rng.integers(0, len(data), size=self.config.batch_size):
            start = self.rng.integers(0, data[i].shape[0] - n + 1)
            out.append(data[i][start:start + n])
        return torch.as_tensor(np.stack(out), dtype=torch.get_default_dtype())


def train_diffusion(clips, config: TrainConfig, model_config: DenoiserConfig | None = None,
                    log_path=None, callback=None):
    """Train a denoiser on denormalized clips. Returns ``(model, schedule, history)``."""
    skeleton = clips[0].skeleton
    if min(c.n_frames for c in clips) < config.window:
        raise TooShort(f"every clip needs at least {config.window} frames")
    stats = NormStats.from_clips(clips)
    model_config = model_config or DenoiserConfig(dim=skeleton.feature_dim, skeleton=skeleton.name)
    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        model = Denoiser(model_config, stats)
    schedule = make_schedule(model_config.T, model_config.schedule)
    trainer = Trainer(model, schedule, config, skeleton)
    data = [stats.apply(c.frames) for c in clips]
    history = []
    writer = None
    fh = open(log_path, "w", newline="") if log_path else None
    try:
        for _ in range(config.steps):
            row = trainer.train_step(trainer.sample_batch(data))
            history.append(row)
            if fh is not None:
                if writer is None:
                    writer = csv.DictWriter(fh, fieldnames=list(row))
                    writer.writeheader()
                writer.writerow(row)
            if callback is not None:
                callback(row)
    finally:
        if fh is not None:
            fh.close()
    return model, schedule, history


# --- sampling -----------------------------------------------------------------

@torch.no_grad()
def reverse_process(model: Denoiser, schedule: NoiseSchedule, x0, row_mask, rng: np.random.Generator,
                    deterministic: bool = False, x_T=None):
    """Run t = T..1 on normalized ``(B, N, D)`` tensors. ``x0`` is read only at keyframe rows."""
    mask = row_mask[..., None].expand_as(x0)
    x = x_T if x_T is not None else torch.as_tensor(rng.standard_normal(tuple(x0.shape)), dtype=x0.dtype)
    B = x0.shape[0]
    for t in range(schedule.T, 0, -1):
        tt = torch.full((B,), t)
        x0_hat = mask_compose(model(mask_compose(x, x0, mask), tt, row_mask), x0, mask)
        x = schedule.posterior_c1[t - 1] * x0_hat + schedule.posterior_c2[t - 1] * x
        if t > 1 and not deterministic:
            z = torch.as_tensor(rng.standard_normal(tuple(x0.shape)), dtype=x0.dtype)
            x = x + math.sqrt(schedule.posterior_variance[t - 1]) * z
    return mask_compose(x, x0, mask)


def _check_keyframes(keyframes, indices, n_frames, dim):
    keyframes = np.asarray(keyframes, dtype=np.float64).reshape(-1, dim) if len(indices) else np.zeros((0, dim))
    idx = np.asarray(indices, dtype=int).reshape(-1)
    if keyframes.shape != (idx.size, dim):
        raise ShapeMismatch(f"expected {idx.size} keyframes of width {dim}, got {keyframes.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= n_frames):
        raise IndexOutOfRange(f"keyframe index outside [0, {n_frames})")
    if np.unique(idx).size != idx.size:
        raise IndexOutOfRange("duplicate keyframe index")
    return keyframes, idx


def sample_inbetween_batch(model: Denoiser, schedule: NoiseSchedule, keyframes_list, indices_list,
                           n_frames: int, rng: np.random.Generator, skeleton: Skeleton | None = None,
                           deterministic: bool = False, fps: float = 30.0) -> list:
    """Several in-betweening problems of equal length in one reverse pass."""
    if n_frames < 2:
        raise TooShort("need at least 2 frames")
    if not bool(model.trained):
        warnings.warn("sampling from an untrained denoiser", UntrainedModel, stacklevel=2)
    skeleton = skeleton or canonical_skeleton(model.config.skeleton)
    D = model.config.dim
    stats = model.stats
    checked = [_check_keyframes(k, i, n_frames, D) for k, i in zip(keyframes_list, indices_list)]
    B = len(checked)
    x0 = np.zeros((B, n_frames, D))
    row_mask = np.ones((B, n_frames))
    for b, (kf, idx) in enumerate(checked):
        x0[b, idx] = stats.apply(kf)
        row_mask[b, idx] = 0.0
    dtype = model.mean.dtype
    x = reverse_process(model, schedule, torch.as_tensor(x0, dtype=dtype), torch.as_tensor(row_mask, dtype=dtype),
                        rng, deterministic)
    frames = stats.invert(x.double().numpy())
    clips = []
    for b, (kf, idx) in enumerate(checked):
        frames[b, idx] = kf
        clips.append(MotionClip(frames[b], skeleton, fps, tuple(int(i) for i in np.sort(idx))))
    return clips


def sample_inbetween(model: Denoiser, schedule: NoiseSchedule, keyframes, indices, n_frames: int,
                     rng: np.random.Generator, skeleton: Skeleton | None = None,
                     deterministic: bool = False, fps: float = 30.0) -> MotionClip:
    """Generate an ``n_frames`` clip whose rows at ``indices`` equal ``keyframes`` (denormalized features)."""
    return sample_inbetween_batch(model, schedule, [keyframes], [indices], n_frames, rng, skeleton,
                                  deterministic, fps)[0]


# --- persistence --------------------------------------------------------------

def save_model(path, model: Denoiser) -> None:
    save_checkpoint(path, model.state_dict(), meta={"kind": "denoiser", **asdict(model.config)})


def load_model(path) -> tuple[Denoiser, NoiseSchedule]:
    tensors, meta = load_checkpoint(path)
    if not meta or meta.pop("kind", None) != "denoiser":
        raise ConfigError(f"{path} does not hold a denoiser")
    config = DenoiserConfig(**meta)
    model = Denoiser(config).to(tensors["mean"].dtype)
    model.load_state_dict(tensors)
    return model, make_schedule(config.T, config.schedule)


def write_history(path, history) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "L_simple", "L_rot", "L_pos", "L_total"])
        writer.writeheader()
        writer.writerows(history)
