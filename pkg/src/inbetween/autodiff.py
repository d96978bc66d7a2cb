"""Gradient checking and a functional Adam update on torch tensors.

Reverse-mode differentiation itself is torch's autograd; this module holds
the pieces checked against it: central differences and the optimizer rule.
"""

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ShapeMismatch

TEST_DTYPE = torch.float64
TRAIN_DTYPE = torch.float32


@dataclass
class GradCheckReport:
    max_rel_error: float
    rel_errors: list
    excluded: list = field(default_factory=list)   # (input index, flat index) at kinks
    passed: bool = True


def grad_check(fn, inputs, tolerance: float = 1e-5, h: float = 1e-5,
               kink_tol: float | None = None, reference_fn=None) -> GradCheckReport:
    """Compare autograd gradients of scalar ``fn(*inputs)`` with central differences.

    Coordinates where the one-sided difference quotients disagree by more
    than ``kink_tol`` are treated as non-differentiable points (e.g. relu at
    zero) and excluded from the error. With ``reference_fn`` the differences
    are taken on that function at float64 copies of the inputs, which is how
    32-bit gradients are checked.
    """
    kink_tol = np.sqrt(h) if kink_tol is None else kink_tol
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = fn(*inputs)
    if out.numel() != 1:
        raise ShapeMismatch("grad_check needs a scalar-valued function")
    grads = torch.autograd.grad(out, inputs, allow_unused=True)
    if reference_fn is not None:
        fn = reference_fn
        inputs = [x.detach().double() for x in inputs]
    with torch.no_grad():
        f0 = float(fn(*inputs))
    rel, excluded = [], []
    with torch.no_grad():
        for k, x in enumerate(inputs):
            analytic = np.zeros(x.numel()) if grads[k] is None else grads[k].reshape(-1).double().numpy()
            numeric = np.zeros(x.numel())
            keep = np.ones(x.numel(), dtype=bool)
            flat = x.view(-1)
            for i in range(x.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                fp = float(fn(*inputs))
                flat[i] = orig - h
                fm = float(fn(*inputs))
                flat[i] = orig
                fwd, bwd = (fp - f0) / h, (f0 - fm) / h
                if abs(fwd - bwd) > kink_tol * max(1.0, abs(fwd), abs(bwd)):
                    keep[i] = False
                    excluded.append((k, i))
                numeric[i] = (fp - fm) / (2 * h)
            a, n = analytic[keep], numeric[keep]
            denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
            rel.append(float(np.linalg.norm(a - n) / denom) if a.size else 0.0)
    worst = max(rel) if rel else 0.0
    return GradCheckReport(worst, rel, excluded, worst < tolerance)


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state: AdamState, lr: float,
              betas: tuple = (0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``; inputs are not modified."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatch("params, grads and state must have equal length")
    b1, b2 = betas
    step = state.step + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeMismatch(f"parameter {tuple(p.shape)} vs gradient {tuple(g.shape)}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** step)
        v_hat = v / (1 - b2 ** step)
        new_p.append(p - lr * m_hat / (v_hat.sqrt() + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, step)


class Adam:
    """:func:`adam_step` applied in place to a list of torch parameters."""

    def __init__(self, params, lr: float, betas: tuple = (0.9, 0.999), eps: float = 1e-8,
                 max_grad_norm: float | None = None):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.max_grad_norm = max_grad_norm
        self.state = AdamState.zeros_like([p.detach() for p in self.params])

    def step(self, loss: torch.Tensor) -> None:
        grads = torch.autograd.grad(loss, self.params, allow_unused=True)
        grads = [torch.zeros_like(p) if g is None else g for p, g in zip(self.params, grads)]
        if self.max_grad_norm is not None:
            norm = torch.sqrt(sum((g * g).sum() for g in grads))
            if norm > self.max_grad_norm:
                grads = [g * (self.max_grad_norm / norm) for g in grads]
        new, self.state = adam_step([p.detach() for p in self.params], grads, self.state,
                                    self.lr, self.betas, self.eps)
        with torch.no_grad():
            for p, q in zip(self.params, new):
                p.copy_(q)
