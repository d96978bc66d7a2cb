import math

import numpy as np
import pytest
import torch

from inbetween.attention import sinusoidal_embedding
from inbetween.autodiff import grad_check
from inbetween.diffusion import (Denoiser, DenoiserConfig, NoiseSchedule, TrainConfig, denoise_forward,
                                 load_model, losses, make_schedule, mask_compose, q_sample, reverse_process,
                                 sample_inbetween, sample_row_masks, save_model,
                                 train_diffusion)
from inbetween.errors import BadSchedule, ConfigError, IndexOutOfRange, ShapeMismatch, UntrainedModel
from inbetween.motion import NormStats, forward_kinematics, keyframe_mask
from inbetween.synth import SynthConfig, synth_dataset
from inbetween.torchfk import features_to_positions


def tiny_model(dim, dtype=torch.float64, seed=0, stats=None, **kw):
    cfg = dict(dim=dim, d_enc=8, d_time=8, n_layers=2, n_heads=2, d_ff=16, max_relative_distance=8, T=10)
    cfg.update(kw)
    torch.manual_seed(seed)
    return Denoiser(DenoiserConfig(**cfg), stats).to(dtype)


@pytest.fixture(scope="module")
def clips():
    return synth_dataset(SynthConfig(n_clips=6, n_frames=40), 2)


# schedule


def test_linear_thousand_step_schedule():
    s = make_schedule(1000, "linear")
    assert s.betas[0] == pytest.approx(1e-4) and s.betas[-1] == pytest.approx(0.02)
    assert np.prod(1 - np.linspace(1e-4, 0.02, 1000)) == pytest.approx(s.alpha_bars[-1], rel=1e-12)
    assert s.alpha_bars[-1] < 1e-3


@pytest.mark.parametrize("kind", ["linear", "cosine"])
@pytest.mark.parametrize("T", [1, 2, 10, 100, 1000])
def test_alpha_bars_strictly_decreasing(kind, T):
    s = make_schedule(T, kind)
    assert s.T == T
    assert np.all(np.diff(np.concatenate([[1.0], s.alpha_bars])) < 0)
    assert s.alpha_bars[-1] < 1e-3


def test_unscaled_short_linear_schedule_rejected():
    with pytest.raises(BadSchedule):
        make_schedule(100, "linear", scale_with_T=False)
    with pytest.raises(BadSchedule):
        NoiseSchedule(np.full(5, 0.1))
    with pytest.raises(BadSchedule):
        make_schedule(0)


def test_single_step_schedule_is_one_denoise():
    s = make_schedule(1)
    assert s.posterior_c1[0] == pytest.approx(1.0) and s.posterior_c2[0] == 0.0
    dim = 75
    model = tiny_model(dim, T=1)
    x0 = torch.zeros(1, 6, dim)
    mask = torch.ones(1, 6)
    rng = np.random.default_rng(0)
    x_T = torch.as_tensor(np.random.default_rng(1).standard_normal((1, 6, dim)))
    out = reverse_process(model, s, x0, mask, rng, x_T=x_T)
    direct = model(x_T, torch.tensor([1]), mask)
    assert torch.allclose(out, direct, atol=1e-12)


def test_posterior_coefficients_match_closed_form():
    s = make_schedule(50, "cosine")
    t = 20
    ab, ab_prev, b = s.alpha_bars[t - 1], s.alpha_bars[t - 2], s.betas[t - 1]
    assert s.posterior_variance[t - 1] == pytest.approx((1 - ab_prev) / (1 - ab) * b)
    # mean of q(x_{t-1} | x_t, x0) for x0 = 1, x_t = 0 is c1, and for x0 = 0, x_t = 1 is c2
    assert s.posterior_c1[t - 1] == pytest.approx(math.sqrt(ab_prev) * b / (1 - ab))
    assert s.posterior_c2[t - 1] == pytest.approx(math.sqrt(1 - b) * (1 - ab_prev) / (1 - ab))


# forward process


def test_q_sample_at_T_is_standard_normal():
    s = make_schedule(100)
    g = torch.Generator().manual_seed(0)
    x0 = torch.full((10_000, 4), 3.0, dtype=torch.float64)
    noise = torch.randn(10_000, 4, generator=g, dtype=torch.float64)
    x = q_sample(x0, torch.full((10_000,), 100), noise, s)
    assert x.mean(0).abs().max() < 0.05
    assert torch.all((x.var(0) > 0.9) & (x.var(0) < 1.1))


def test_q_sample_zero_noise():
    s = make_schedule(100)
    x0 = torch.randn(5, 3, dtype=torch.float64)
    assert torch.equal(q_sample(x0, 1, torch.zeros_like(x0), s), math.sqrt(s.alpha_bars[0]) * x0)


def test_q_sample_variance():
    s = make_schedule(100)
    g = torch.Generator().manual_seed(1)
    n = 20_000
    for t in (5, 30, 70):
        x = q_sample(torch.zeros(n, 2, dtype=torch.float64), t, torch.randn(n, 2, generator=g, dtype=torch.float64), s)
        assert x.var(0).numpy() == pytest.approx([1 - s.alpha_bars[t - 1]] * 2, rel=0.02 * 2)


def test_q_sample_rejects_bad_t():
    with pytest.raises(IndexOutOfRange):
        q_sample(torch.zeros(2, 2), 0, torch.zeros(2, 2), make_schedule(10))


def test_mask_compose():
    g = torch.Generator().manual_seed(2)
    xt, x0 = torch.randn(6, 5, generator=g), torch.randn(6, 5, generator=g)
    assert torch.equal(mask_compose(xt, x0, torch.ones(6, 5)), xt)
    assert torch.equal(mask_compose(xt, x0, torch.zeros(6, 5)), x0)
    m = torch.as_tensor(keyframe_mask(6, 5, [0, 3]))
    out = mask_compose(xt, x0, m)
    assert torch.equal(out[[0, 3]], x0[[0, 3]]) and torch.equal(out[[1, 2, 4, 5]], xt[[1, 2, 4, 5]])
    with pytest.raises(ShapeMismatch):
        mask_compose(xt, x0, torch.ones(6, 4))


# network


def test_keyframe_latents_pass_through():
    model = tiny_model(75, n_layers=3)
    x = torch.randn(2, 9, 75, dtype=torch.float64)
    row_mask = torch.ones(2, 9, dtype=torch.float64)
    row_mask[0, [0, 8]] = 0
    row_mask[1, 4] = 0
    _, lat = model(x, torch.tensor([3, 7]), row_mask, return_latents=True)
    kf = row_mask == 0
    for h in lat[1:]:
        assert torch.equal(h[kf], lat[0][kf])
    assert not torch.equal(lat[-1][~kf], lat[0][~kf])


def test_all_keyframes_is_rowwise_autoencoder():
    model = tiny_model(75)
    x = torch.randn(1, 7, 75, dtype=torch.float64)
    out = denoise_forward(model, x[0], 4, torch.zeros(7, 75, dtype=torch.float64))
    temb = model.time_mlp(sinusoidal_embedding(torch.tensor([4]), 8).double())
    h0 = torch.cat([model.encoder(x[0]), temb.expand(7, -1)], -1)
    assert torch.allclose(out, model.decoder(h0), atol=1e-14)
    # no mixing: changing one row leaves the others unchanged
    x2 = x[0].clone()
    x2[3] += 1
    out2 = denoise_forward(model, x2, 4, torch.zeros(7, 75, dtype=torch.float64))
    assert torch.equal(out2[[0, 1, 2, 4, 5, 6]], out[[0, 1, 2, 4, 5, 6]])


def test_output_shape_any_length():
    model = tiny_model(75, dtype=torch.float32)
    for n in (2, 5, 31, 200):
        x = torch.randn(1, n, 75)
        assert model(x, torch.tensor([1]), torch.ones(1, n)).shape == (1, n, 75)


def test_width_mismatch():
    with pytest.raises(ShapeMismatch):
        tiny_model(75)(torch.zeros(1, 3, 74, dtype=torch.float64), torch.tensor([1]), torch.ones(1, 3))


# losses


def _norm_batch(clips, n=8):
    stats = NormStats.from_clips(clips)
    return stats, torch.as_tensor(np.stack([stats.apply(c.frames[:n]) for c in clips[:2]]))


def test_losses_zero_at_target(clips):
    stats, x = _norm_batch(clips)
    terms = losses(x, x, clips[0].skeleton, stats)
    assert all(float(v) == 0.0 for v in terms)


def test_rotation_perturbation_moves_only_descendants(clips):
    sk = clips[0].skeleton
    stats, x = _norm_batch(clips)
    j = sk.index("LeftUpLeg")
    raw = x * torch.as_tensor(stats.std) + torch.as_tensor(stats.mean)
    pert = raw.clone()
    pert[..., 6 * j:6 * j + 6] += torch.tensor([0.0, 0.2, 0.1, 0.1, 0.0, 0.0], dtype=torch.float64)
    xp = (pert - torch.as_tensor(stats.mean)) / torch.as_tensor(stats.std)
    terms = losses(xp, x, sk, stats)
    assert terms.rot > 0 and terms.pos > 0
    moved = (features_to_positions(pert, sk) - features_to_positions(raw, sk)).abs().amax((0, 1, 3))
    expected = sk.descendants(j)
    for k in range(sk.n_joints):
        assert (moved[k] > 1e-9) == (k in expected), sk.names[k]


def test_torch_fk_matches_numpy(clips):
    c = clips[3]
    pos = features_to_positions(torch.tensor(c.frames), c.skeleton).numpy()
    assert np.abs(pos - forward_kinematics(c)).max() < 1e-12


def test_total_is_linear_in_weights(clips):
    stats, x = _norm_batch(clips)
    y = x + 0.1 * torch.randn_like(x)
    a = losses(y, x, clips[0].skeleton, stats, (1.0, 1.0, 0.02))
    b = losses(y, x, clips[0].skeleton, stats, (0.5, 3.0, 2.0))
    assert float(a.total) == pytest.approx(float(a.simple + a.rot + 0.02 * a.pos), rel=1e-12)
    assert float(b.total) == pytest.approx(float(0.5 * b.simple + 3 * b.rot + 2 * b.pos), rel=1e-12)


def _loss_fn(model, stats, sk, x0, x_tilde, t, row_mask):
    names = [n for n, _ in model.named_parameters()]

    def fn(xt, *ps):
        out = torch.func.functional_call(model, dict(zip(names, ps)), (xt, t, row_mask))
        return losses(out, x0, sk, stats).total
    return fn, [x_tilde] + [p.detach() for _, p in model.named_parameters()]


def _loss_check_setup(clips, dtype, seed=3):
    stats, x = _norm_batch(clips)
    x0 = x[:1].to(dtype)
    sk = clips[0].skeleton
    model = tiny_model(sk.feature_dim, dtype=dtype, seed=seed, n_layers=1, stats=stats)
    row_mask = torch.ones(1, 8, dtype=dtype)
    row_mask[0, [0, 7]] = 0
    g = torch.Generator().manual_seed(4)
    noise = torch.randn(x0.shape, generator=g, dtype=torch.float64).to(dtype)
    x_tilde = mask_compose(q_sample(x0, 5, noise, make_schedule(10)), x0, row_mask[..., None].expand_as(x0))
    fn, inputs = _loss_fn(model, stats, sk, x0, x_tilde, torch.tensor([5]), row_mask)
    # the encoder input and the first and last parameter tensors keep the check quick
    keep = [0, 1, len(inputs) - 1]

    def sub(*xs):
        return fn(*[xs[keep.index(i)] if i in keep else inputs[i] for i in range(len(inputs))])
    return sub, [inputs[i] for i in keep]


def test_full_loss_gradient_check_64bit(clips):
    fn, inputs = _loss_check_setup(clips, torch.float64)
    rep = grad_check(fn, inputs, h=1e-6)
    assert rep.max_rel_error < 1e-5, rep.rel_errors


def test_full_loss_gradient_check_32bit(clips):
    fn32, inputs = _loss_check_setup(clips, torch.float32)
    fn64, _ = _loss_check_setup(clips, torch.float64)
    rep = grad_check(fn32, inputs, h=1e-6, reference_fn=fn64)
    assert rep.max_rel_error < 1e-3, rep.rel_errors


# training


def test_zero_rate_gives_no_keyframes():
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert np.all(sample_row_masks(rng, 4, 30, 0.0) == 1.0)


def test_keyframe_count_bounds():
    rng = np.random.default_rng(1)
    counts = [(1 - sample_row_masks(rng, 1, 60, 0.1)).sum() for _ in range(400)]
    assert min(counts) == 0 and max(counts) == 6


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lambda_pos=-1)
    with pytest.raises(ConfigError):
        TrainConfig(constrained_rate=1.5)


def test_training_is_deterministic(clips):
    cfg = TrainConfig(steps=5, window=30, batch_size=4, seed=9)
    mcfg = DenoiserConfig(dim=75, d_enc=16, d_time=16, n_layers=1, n_heads=2, d_ff=32, T=20)
    _, _, h1 = train_diffusion(clips, cfg, mcfg)
    _, _, h2 = train_diffusion(clips, cfg, mcfg)
    assert h1 == h2
    assert [r["step"] for r in h1] == [1, 2, 3, 4, 5]


def test_loss_csv(clips, tmp_path):
    cfg = TrainConfig(steps=3, window=30, batch_size=2)
    mcfg = DenoiserConfig(dim=75, d_enc=16, d_time=16, n_layers=1, n_heads=2, d_ff=32, T=20)
    train_diffusion(clips, cfg, mcfg, log_path=tmp_path / "loss.csv")
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,L_simple,L_rot,L_pos,L_total" and len(lines) == 4


# sampling


def _kf(clip, idx):
    return clip.frames[idx]


def test_fully_constrained_pair(clips):
    model = tiny_model(75, stats=NormStats.from_clips(clips))
    with pytest.warns(UntrainedModel):
        out = sample_inbetween(model, make_schedule(10), _kf(clips[0], [0, 1]), [0, 1], 2, np.random.default_rng(0))
    assert np.array_equal(out.frames, clips[0].frames[:2])


@pytest.mark.parametrize("n", [3, 17, 64])
def test_keyframes_bitwise_preserved(clips, n):
    model = tiny_model(75, stats=NormStats.from_clips(clips), dtype=torch.float32)
    idx = [0, n // 2, n - 1]
    kf = clips[1].frames[[0, 10, 20]]
    with pytest.warns(UntrainedModel):
        out = sample_inbetween(model, make_schedule(10), kf, idx, n, np.random.default_rng(n))
    assert np.array_equal(out.frames[idx], kf)
    assert out.keyframe_indices == tuple(idx)


def test_sampler_index_errors(clips):
    model = tiny_model(75)
    model.trained.fill_(1)
    with pytest.raises(IndexOutOfRange):
        sample_inbetween(model, make_schedule(10), _kf(clips[0], [0, 1]), [0, 12], 10, np.random.default_rng(0))
    with pytest.raises(ShapeMismatch):
        sample_inbetween(model, make_schedule(10), _kf(clips[0], [0, 1]), [0], 10, np.random.default_rng(0))


def test_zero_noise_sampling_is_deterministic(clips):
    model = tiny_model(75, stats=NormStats.from_clips(clips))
    model.trained.fill_(1)
    s = make_schedule(10)
    kw = dict(deterministic=True)
    x_T = torch.randn(1, 12, 75, dtype=torch.float64)
    x0 = torch.zeros(1, 12, 75, dtype=torch.float64)
    m = torch.ones(1, 12, dtype=torch.float64)
    a = reverse_process(model, s, x0, m, np.random.default_rng(0), x_T=x_T, **kw)
    b = reverse_process(model, s, x0, m, np.random.default_rng(1), x_T=x_T, **kw)
    assert torch.equal(a, b)


def test_model_checkpoint_round_trip(clips, tmp_path):
    model = tiny_model(75, stats=NormStats.from_clips(clips))
    model.trained.fill_(1)
    save_model(tmp_path / "m.bin", model)
    back, sched = load_model(tmp_path / "m.bin")
    assert sched.T == 10 and bool(back.trained)
    x = torch.randn(1, 5, 75, dtype=torch.float64)
    args = (torch.tensor([3]), torch.ones(1, 5, dtype=torch.float64))
    assert torch.equal(model(x, *args), back(x, *args))
    assert np.array_equal(back.stats.mean, model.stats.mean)
