"""Latent-space evaluation: autoencoder, K-FID, K-Diversity, K-Error, interpolation baseline."""

import csv
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.spatial.transform import Rotation, Slerp
from torch import nn

from .autodiff import Adam
from .errors import IndexOutOfRange, NeedTwoKeyframes, ShapeMismatch, SingularCovariance, UntrainedModel
from .motion import MotionClip, NormStats, Skeleton, forward_kinematics, matrix_to_rot6d, rot6d_to_matrix

RIDGE = 1e-6
MAX_CONDITION = 1e12
NEG_EIG_TOL = 1e-8


# --- autoencoder --------------------------------------------------------------

@dataclass
class AutoencoderConfig:
    d_z: int = 32
    hidden: int = 128
    steps: int = 1500
    batch_size: int = 256
    lr: float = 1e-3
    holdout: float = 0.1
    max_recon_error: float = 0.05   # held-out MSE on normalized features
    std_floor: float = 0.05         # channels that are constant in the corpus must not blow up unseen data
    seed: int = 0


class _AE(nn.Module):
    def __init__(self, dim, d_z, hidden):
        super().__init__()
        self.enc_lin = nn.Linear(dim, d_z)
        self.enc = nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, d_z))
        self.dec_lin = nn.Linear(d_z, dim)
        self.dec = nn.Sequential(nn.Linear(d_z, hidden), nn.ReLU(), nn.Linear(hidden, dim))

    def encode(self, x):
        return self.enc_lin(x) + self.enc(x)

    def decode(self, z):
        return self.dec_lin(z) + self.dec(z)


@dataclass
class LatentEncoder:
    """Per-frame encoder into a ``d_z`` latent, trained on normalized features."""
    net: _AE
    stats: NormStats
    config: AutoencoderConfig
    heldout_error: float = float("inf")
    history: list = field(default_factory=list)

    @property
    def ready(self) -> bool:
        return self.heldout_error < self.config.max_recon_error

    def encode(self, frames) -> np.ndarray:
        x = torch.as_tensor(self.stats.apply(np.asarray(frames, dtype=np.float64)), dtype=torch.float64)
        with torch.no_grad():
            return self.net.encode(x).numpy()

    def reconstruct(self, frames) -> np.ndarray:
        x = torch.as_tensor(self.stats.apply(np.asarray(frames, dtype=np.float64)), dtype=torch.float64)
        with torch.no_grad():
            return self.stats.invert(self.net.decode(self.net.encode(x)).numpy())

    def state_dict(self) -> dict:
        return self.net.state_dict()


def train_autoencoder(clips, config: AutoencoderConfig | None = None) -> LatentEncoder:
    """Fit the autoencoder on all frames of ``clips``; the last ``holdout`` fraction of frames is held out."""
    config = config or AutoencoderConfig()
    if not clips:
        raise ValueError("train_autoencoder needs at least one clip")
    frames = np.concatenate([c.frames for c in clips], axis=0)
    stats = NormStats.from_frames(frames)
    stats = NormStats(stats.mean, np.maximum(stats.std, config.std_floor))
    rng = np.random.default_rng(config.seed)
    x = stats.apply(frames)[rng.permutation(len(frames))]
    n_hold = max(1, int(round(config.holdout * len(x)))) if len(x) > 1 else 0
    train, held = torch.as_tensor(x[n_hold:]), torch.as_tensor(x[:n_hold] if n_hold else x)
    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        net = _AE(frames.shape[1], config.d_z, config.hidden).double()
    opt = Adam(net.parameters(), config.lr)
    history = []
    for step in range(config.steps):
        batch = train[torch.as_tensor(rng.integers(0, len(train), size=config.batch_size))]
        loss = ((net.decode(net.encode(batch)) - batch) ** 2).mean()
        opt.step(loss)
        history.append(float(loss.detach()))
    with torch.no_grad():
        err = float(((net.decode(net.encode(held)) - held) ** 2).mean())
    return LatentEncoder(net, stats, config, err, history)


# --- Frechet distance ---------------------------------------------------------

def _regularize(S: np.ndarray) -> np.ndarray:
    w = np.linalg.eigvalsh(S)
    if w[0] <= 0 or w[-1] / w[0] > MAX_CONDITION:
        S = S + RIDGE * np.eye(len(S))
    return S


def _psd_sqrt(S: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh((S + S.T) / 2)
    if w[0] < -NEG_EIG_TOL:
        raise SingularCovariance(f"covariance has eigenvalue {w[0]:.3g}")
    return (V * np.sqrt(np.clip(w, 0, None))) @ V.T


def _frechet_once(mu1, S1, mu2, S2) -> float:
    r = _psd_sqrt(S1)
    inner = r @ S2 @ r
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    if w[0] < -NEG_EIG_TOL:
        raise SingularCovariance(f"product has eigenvalue {w[0]:.3g}")
    tr_sqrt = np.sqrt(np.clip(w, 0, None)).sum()
    d = np.sum((np.asarray(mu1) - np.asarray(mu2)) ** 2) + np.trace(S1) + np.trace(S2) - 2 * tr_sqrt
    return float(max(d, 0.0))


def frechet_from_stats(mu1, S1, mu2, S2) -> float:
    """``|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))`` via the symmetric form ``S1^(1/2) S2 S1^(1/2)``.

    Rank-deficient covariances (fewer samples than latent dimensions) can
    leave round-off negatives in the product; the computation is retried
    with ridges scaled to the covariance magnitude before giving up.
    """
    S1 = _regularize(np.atleast_2d(S1))
    S2 = _regularize(np.atleast_2d(S2))
    scale = max(np.trace(S1), np.trace(S2)) / len(S1)
    err = None
    for ridge in (0.0, 1e-8, 1e-6, 1e-4):
        eye = ridge * scale * np.eye(len(S1))
        try:
            return _frechet_once(mu1, S1 + eye, mu2, S2 + eye)
        except SingularCovariance as exc:
            err = exc
    raise err


def frechet_distance(z1, z2) -> float:
    """Frechet distance between Gaussians fitted to latent sets ``(n, d_z)``."""
    z1, z2 = np.atleast_2d(np.asarray(z1, dtype=np.float64)), np.atleast_2d(np.asarray(z2, dtype=np.float64))
    if z1.ndim != 2 or z2.ndim != 2 or z1.shape[1] != z2.shape[1]:
        raise ShapeMismatch("latent sets must be (n, d) with equal d")
    if len(z1) < 2 or len(z2) < 2:
        raise ShapeMismatch("need at least two frames per side")
    return frechet_from_stats(z1.mean(0), np.cov(z1, rowvar=False), z2.mean(0), np.cov(z2, rowvar=False))


def _require(enc: LatentEncoder):
    if not enc.ready:
        raise UntrainedModel(f"encoder held-out error {enc.heldout_error:.3g} exceeds "
                             f"{enc.config.max_recon_error}")


def k_fid(gen, ref, enc: LatentEncoder) -> float:
    _require(enc)
    z_gen = enc.encode(np.concatenate([c.frames for c in gen]))
    z_ref = enc.encode(np.concatenate([c.frames for c in ref]))
    return frechet_distance(z_gen, z_ref)


# --- diversity and keyframe error ---------------------------------------------

def pair_distance_mean(z: np.ndarray, num_pairs: int, rng: np.random.Generator) -> float:
    """Mean latent distance over ``num_pairs`` random frame pairs with ``i != j``."""
    n = len(z)
    if n < 2:
        raise ShapeMismatch("need at least two frames")
    i = rng.integers(0, n, size=num_pairs)
    j = (i + rng.integers(1, n, size=num_pairs)) % n
    return float(np.linalg.norm(z[i] - z[j], axis=-1).mean())


def k_diversity(clips, enc: LatentEncoder, num_pairs: int = 200, seed: int = 0) -> float:
    _require(enc)
    rng = np.random.default_rng(seed)
    return float(np.mean([pair_distance_mean(enc.encode(c.frames), num_pairs, rng) for c in clips]))


def _positions(x) -> np.ndarray:
    return forward_kinematics(x) if isinstance(x, MotionClip) else np.asarray(x, dtype=np.float64)


def k_error(gen, ref, indices, skeleton: Skeleton | None = None) -> float:
    """Mean global joint position error at keyframes, in centimeters (positions in meters).

    ``gen`` and ``ref`` are clips or ``(N, J, 3)`` position arrays.
    """
    g, r = _positions(gen), _positions(ref)
    if g.shape[1:] != r.shape[1:]:
        raise ShapeMismatch(f"joint layouts differ: {g.shape} vs {r.shape}")
    idx = np.asarray(indices, dtype=int)
    if idx.size == 0:
        return 0.0
    if idx.min() < 0 or idx.max() >= min(len(g), len(r)):
        raise IndexOutOfRange("keyframe index outside clip")
    return float(100.0 * np.linalg.norm(g[idx] - r[idx], axis=-1).mean())


# --- interpolation baseline ---------------------------------------------------

def interpolation_baseline(keyframes, indices, n_frames: int, skeleton: Skeleton, fps: float = 30.0) -> MotionClip:
    """Slerp joint rotations and linearly blend the remaining channels between keyframes.

    Frames before the first or after the last keyframe hold its values.
    """
    idx = np.asarray(indices, dtype=int)
    kf = np.asarray(keyframes, dtype=np.float64)
    if idx.size < 2:
        raise NeedTwoKeyframes("interpolation needs at least two keyframes")
    if kf.shape != (idx.size, skeleton.feature_dim):
        raise ShapeMismatch(f"keyframes {kf.shape} do not match {idx.size} x {skeleton.feature_dim}")
    if idx.min() < 0 or idx.max() >= n_frames or np.any(np.diff(idx) <= 0):
        raise IndexOutOfRange("keyframe indices must be increasing and inside the clip")
    J = skeleton.n_joints
    frames = np.empty((n_frames, kf.shape[1]))
    t = np.clip(np.arange(n_frames), idx[0], idx[-1]).astype(np.float64)
    r = 6 * J
    for c in range(r, kf.shape[1]):
        frames[:, c] = np.interp(t, idx, kf[:, c])
    mats = rot6d_to_matrix(kf[:, :r].reshape(-1, J, 6))
    for j in range(J):
        R = Slerp(idx.astype(np.float64), Rotation.from_matrix(mats[:, j]))(t).as_matrix()
        frames[:, 6 * j:6 * j + 6] = matrix_to_rot6d(R)
    frames[idx] = kf
    return MotionClip(frames, skeleton, fps, tuple(int(i) for i in idx))


def keyframe_indices(n_frames: int, interval: int) -> list[int]:
    """Every ``interval``-th frame plus the last one."""
    idx = list(range(0, n_frames, interval))
    if idx[-1] != n_frames - 1:
        idx.append(n_frames - 1)
    return idx


# --- reports ------------------------------------------------------------------

@dataclass
class MetricsReport:
    k_fid: float
    k_diversity: float
    k_error: float
    per_length: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)


CSV_FIELDS = ["clip_id", "length", "keyframe_interval", "k_fid", "k_diversity", "k_error"]


def evaluate(gen, ref, enc: LatentEncoder, interval: int, num_pairs: int = 200, seed: int = 0) -> MetricsReport:
    """Per-clip rows plus set-level K-FID; ``gen[i]`` is compared to ``ref[i]`` at ``gen[i]``'s keyframes."""
    rows = []
    for i, (g, r) in enumerate(zip(gen, ref)):
        rows.append({"clip_id": i, "length": g.n_frames, "keyframe_interval": interval,
                     "k_fid": k_fid([g], [r], enc),
                     "k_diversity": k_diversity([g], enc, num_pairs, seed),
                     "k_error": k_error(g, r, g.keyframe_indices)})
    report = MetricsReport(k_fid(gen, ref, enc), k_diversity(gen, enc, num_pairs, seed),
                           float(np.mean([row["k_error"] for row in rows])) if rows else 0.0, rows=rows)
    for n in sorted({g.n_frames for g in gen}):
        sel = [i for i, g in enumerate(gen) if g.n_frames == n]
        report.per_length[n] = {
            "k_fid": k_fid([gen[i] for i in sel], [ref[i] for i in sel], enc),
            "k_diversity": k_diversity([gen[i] for i in sel], enc, num_pairs, seed),
            "k_error": float(np.mean([rows[i]["k_error"] for i in sel]))}
    return report


def write_metrics_csv(path, report: MetricsReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        writer.writerows(report.rows)
        writer.writerow({"clip_id": "all", "length": "", "keyframe_interval": report.rows[0]["keyframe_interval"]
                         if report.rows else "", "k_fid": report.k_fid, "k_diversity": report.k_diversity,
                         "k_error": report.k_error})

