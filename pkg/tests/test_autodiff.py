import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from inbetween.attention import (RelativeSelfAttention, gather_relative, relative_indices, sinusoidal_embedding,
                                 skew)
from inbetween.autodiff import AdamState, adam_step, grad_check
from inbetween.checkpoint import load_checkpoint, load_into, save_checkpoint, save_module
from inbetween.errors import OddDim, ShapeMismatch

F = torch.nn.functional


@pytest.fixture(autouse=True)
def _double():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def _rand(g, *shape):
    return torch.randn(*shape, generator=g)


def test_matmul_gradients():
    g = torch.Generator().manual_seed(0)
    rep = grad_check(lambda a, b: (a @ b).sin().sum(), [_rand(g, 2, 3), _rand(g, 3, 2)])
    assert rep.max_rel_error < 1e-5


CORE_OPS = {
    "add": (lambda a, b: ((a + b) ** 2).sum(), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: (a * b).exp().sum(), [(3, 4), (3, 4)]),
    "layer_norm": (lambda a, w: (F.layer_norm(a, (4,)) * w).sum(), [(3, 4), (3, 4)]),
    "relu": (lambda a, w: (F.relu(a) * w).sum(), [(3, 4), (3, 4)]),
    "softmax": (lambda a, w: (torch.softmax(a, -1) * w).sum(), [(3, 4), (3, 4)]),
    "concat": (lambda a, b: (torch.cat([a, b], -1) ** 3).sum(), [(3, 4), (3, 2)]),
    "slice": (lambda a, w: (a[1:, :3] * w).sum(), [(3, 4), (2, 3)]),
    "transpose": (lambda a, w: (a.T * w).sum() ** 2, [(3, 4), (4, 3)]),
    "embedding": (lambda tab, w: (F.embedding(torch.tensor([2, 0, 2]), tab) * w).sum() ** 2, [(3, 4), (3, 4)]),
}


@pytest.mark.parametrize("name", sorted(CORE_OPS))
def test_core_op_gradients(name):
    fn, shapes = CORE_OPS[name]
    g = torch.Generator().manual_seed(1)
    rep = grad_check(fn, [_rand(g, *s) for s in shapes])
    assert rep.max_rel_error < 1e-5, (name, rep)


def test_layer_norm_constant_is_zero():
    assert torch.equal(F.layer_norm(torch.full((1, 7), 3.0), (7,)), torch.zeros(1, 7))


def test_softmax_rows_sum_to_one():
    x = torch.randn(50, 9, generator=torch.Generator().manual_seed(2)) * 10
    assert (torch.softmax(x, -1).sum(-1) - 1).abs().max() < 1e-12


def test_quadratic_form():
    g = torch.Generator().manual_seed(3)
    A = _rand(g, 5, 5)
    rep = grad_check(lambda x: x @ A @ x, [_rand(g, 5)])
    assert rep.max_rel_error < 1e-7
    x = _rand(g, 5).requires_grad_()
    (x @ A @ x).backward()
    assert torch.allclose(x.grad, (A + A.T) @ x.detach())


def test_relu_kink_is_excluded():
    x = torch.tensor([0.0, 0.7, -0.4])
    rep = grad_check(lambda v: F.relu(v).sum(), [x])
    assert rep.excluded == [(0, 0)]
    assert rep.passed and rep.max_rel_error < 1e-8


def test_linearity_of_backward():
    g = torch.Generator().manual_seed(4)
    x = _rand(g, 6).requires_grad_()
    f1 = lambda v: (v.sin() ** 2).sum()
    f2 = lambda v: torch.softmax(v, 0)[2]
    g_sum, = torch.autograd.grad(f1(x) + f2(x), x)
    g1, = torch.autograd.grad(f1(x), x)
    g2, = torch.autograd.grad(f2(x), x)
    assert torch.allclose(g_sum, g1 + g2, atol=1e-14)


def test_shape_mismatch_on_non_scalar():
    with pytest.raises(ShapeMismatch):
        grad_check(lambda v: v * 2, [torch.ones(3)])


# attention


def test_skew_three_by_three_matches_gather():
    rel = torch.arange(15.0).reshape(3, 5)
    expected = torch.tensor([[rel[i, j - i + 2] for j in range(3)] for i in range(3)])
    assert torch.equal(skew(rel), expected)
    assert torch.equal(gather_relative(rel), expected)


@pytest.mark.parametrize("n", range(1, 17))
def test_skew_equals_gather_all_lengths(n):
    rel = torch.randn(2, 3, n, 2 * n - 1, generator=torch.Generator().manual_seed(n))
    assert torch.equal(skew(rel), gather_relative(rel))


def test_skew_rejects_wrong_width():
    with pytest.raises(ShapeMismatch):
        skew(torch.zeros(3, 4))


def test_relative_index_clipping():
    idx = relative_indices(6, 2)
    assert idx.tolist() == [0, 0, 0, 0, 1, 2, 3, 4, 4, 4, 4]


def test_uniform_attention_gives_sequence_mean():
    d = 5
    att = RelativeSelfAttention(d, 1, max_relative_distance=8)
    with torch.no_grad():
        att.qkv.weight.zero_()
        att.qkv.bias.zero_()
        att.qkv.weight[2 * d:] = torch.eye(d)
        att.out.weight.copy_(torch.eye(d))
        att.out.bias.zero_()
        att.rel.zero_()
    x = torch.eye(d)[None]
    y = att(x)
    assert torch.allclose(y, x.mean(1, keepdim=True).expand_as(y), atol=1e-15)


def test_attention_skew_and_gather_paths_agree():
    torch.manual_seed(0)
    att = RelativeSelfAttention(8, 2, max_relative_distance=3)
    x = torch.randn(2, 11, 8)
    assert torch.allclose(att(x), att(x, use_skew=False), atol=1e-14)


def test_attention_gradient_check():
    torch.manual_seed(5)
    att = RelativeSelfAttention(4, 2, max_relative_distance=4)
    w = torch.randn(1, 4, 4)
    x = torch.randn(1, 4, 4)
    names, params = zip(*att.named_parameters())

    def loss(x, *ps):
        out = torch.func.functional_call(att, dict(zip(names, ps)), (x,))
        return (out * w).sum()

    rep = grad_check(loss, [x, *[p.detach() for p in params]])
    assert rep.max_rel_error < 1e-4


def test_attention_head_divisibility():
    with pytest.raises(ShapeMismatch):
        RelativeSelfAttention(10, 4)


def test_key_mask_blocks_keys():
    torch.manual_seed(1)
    att = RelativeSelfAttention(4, 1)
    x = torch.randn(1, 5, 4)
    mask = torch.tensor([[True, True, False, True, True]])
    x2 = x.clone()
    x2[0, 2] += 10
    y1, y2 = att(x, mask), att(x2, mask)
    keep = [0, 1, 3, 4]
    assert torch.allclose(y1[0, keep], y2[0, keep], atol=1e-14)


def test_sinusoidal_at_zero():
    e = sinusoidal_embedding(0, 16)
    assert torch.equal(e[0::2], torch.zeros(8))
    assert torch.equal(e[1::2], torch.ones(8))


def test_sinusoidal_period_of_lowest_frequency():
    dim, t = 32, 7.0
    w_min = 10000.0 ** (-(dim - 2) / dim)
    period = 2 * math.pi / w_min
    a, b = sinusoidal_embedding(t, dim), sinusoidal_embedding(t + period, dim)
    assert torch.allclose(a[-2:], b[-2:], atol=1e-9)
    assert torch.allclose(b[:2], torch.tensor([math.sin(t + period), math.cos(t + period)]), atol=1e-12)
    assert (b[:2] - a[:2]).abs().max() > 0.1


def test_sinusoidal_distinct_over_range():
    e = sinusoidal_embedding(torch.arange(1001.0), 32)
    d = torch.cdist(e, e)
    d.fill_diagonal_(float("inf"))
    assert d.min() > 1e-3


def test_sinusoidal_odd_dim():
    with pytest.raises(OddDim):
        sinusoidal_embedding(3, 7)


# adam


def test_adam_zero_gradient_is_noop():
    p = [torch.randn(3, 2)]
    new, st_ = adam_step(p, [torch.zeros(3, 2)], AdamState.zeros_like(p), lr=0.1)
    assert torch.equal(new[0], p[0]) and st_.step == 1


def test_adam_hand_evaluated_step():
    p = [torch.tensor(2.0)]
    new, _ = adam_step(p, [torch.tensor(1.0)], AdamState.zeros_like(p), lr=0.1)
    m_hat = (0.1 * 1.0) / (1 - 0.9)
    v_hat = (0.001 * 1.0) / (1 - 0.999)
    assert float(new[0]) == pytest.approx(2.0 - 0.1 * m_hat / (math.sqrt(v_hat) + 1e-8), abs=1e-15)


def test_adam_matches_torch_optimizer():
    torch.manual_seed(0)
    p = torch.randn(4, 3)
    ref = p.clone().requires_grad_()
    opt = torch.optim.Adam([ref], lr=1e-2)
    params, state = [p.clone()], AdamState.zeros_like([p])
    for k in range(20):
        g = torch.sin(torch.arange(12.0).reshape(4, 3) * (k + 1))
        ref.grad = g.clone()
        opt.step()
        params, state = adam_step(params, [g], state, lr=1e-2)
    assert torch.allclose(params[0], ref.detach(), atol=1e-12)


def test_adam_deterministic():
    def run():
        p = [torch.linspace(-1, 1, 7)]
        s = AdamState.zeros_like(p)
        for k in range(50):
            p, s = adam_step(p, [torch.cos(p[0] * k)], s, lr=1e-3)
        return p[0]
    assert torch.equal(run(), run())


def test_adam_shape_mismatch():
    p = [torch.zeros(2)]
    with pytest.raises(ShapeMismatch):
        adam_step(p, [torch.zeros(3)], AdamState.zeros_like(p), lr=0.1)


# checkpoint


def test_checkpoint_round_trip(tmp_path):
    tensors = {"a": torch.randn(2, 3), "b.weight": torch.arange(5, dtype=torch.float32),
               "scalar": torch.tensor(1.5)}
    save_checkpoint(tmp_path / "c.bin", tensors, meta={"d_model": 96})
    back, meta = load_checkpoint(tmp_path / "c.bin")
    assert meta == {"d_model": 96}
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype and torch.equal(back[k], v)


def test_checkpoint_header(tmp_path):
    save_checkpoint(tmp_path / "c.bin", {"x": torch.ones(2)})
    raw = (tmp_path / "c.bin").read_bytes()
    assert raw[:4] == b"IBCK"
    assert np.frombuffer(raw[4:12], "<u4").tolist() == [1, 1]


def test_module_round_trip(tmp_path):
    torch.manual_seed(0)
    a = RelativeSelfAttention(8, 2, 16)
    save_module(tmp_path / "m.bin", a)
    b = load_into(RelativeSelfAttention(8, 2, 16), load_checkpoint(tmp_path / "m.bin")[0])
    x = torch.randn(1, 5, 8)
    assert torch.equal(a(x), b(x))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=0, max_size=3), st.integers(0, 2 ** 31 - 1))
def test_checkpoint_arbitrary_shapes(tmp_path_factory, shape, seed):
    path = tmp_path_factory.mktemp("ck") / "x.bin"
    t = torch.randn(tuple(shape), generator=torch.Generator().manual_seed(seed))
    save_checkpoint(path, {"t": t})
    assert torch.equal(load_checkpoint(path)[0]["t"], t)
