"""Multi-head self-attention with learned relative positions, and timestep embeddings."""

import math

import torch
from torch import nn

from .errors import OddDim, ShapeMismatch


def skew(rel_logits: torch.Tensor) -> torch.Tensor:
    """Turn ``(..., N, 2N-1)`` relative logits into ``(..., N, N)`` absolute ones.

    Column ``c`` of the input holds relative distance ``c - (N - 1)``
    (key index minus query index). Output ``[i, j]`` is input
    ``[i, j - i + N - 1]``, obtained by padding one column, flattening,
    shifting by ``N - 1`` and reshaping.
    """
    *batch, n, width = rel_logits.shape
    if width != 2 * n - 1:
        raise ShapeMismatch(f"expected last dim {2 * n - 1}, got {width}")
    padded = nn.functional.pad(rel_logits, (0, 1))
    flat = padded.reshape(*batch, n * 2 * n)
    shifted = flat[..., n - 1:n - 1 + n * (2 * n - 1)]
    return shifted.reshape(*batch, n, 2 * n - 1)[..., :n]


def gather_relative(rel_logits: torch.Tensor) -> torch.Tensor:
    """Direct O(N^2) gather with the same contract as :func:`skew`."""
    n = rel_logits.shape[-2]
    i = torch.arange(n)[:, None]
    j = torch.arange(n)[None, :]
    idx = (j - i + n - 1).expand(*rel_logits.shape[:-1], n)
    return torch.gather(rel_logits, -1, idx)


def relative_indices(n: int, max_distance: int) -> torch.Tensor:
    """Table rows for distances ``-(n-1) .. n-1``, clipped to ``+-max_distance``."""
    d = torch.arange(-(n - 1), n).clamp(-max_distance, max_distance)
    return d + max_distance


class RelativeSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, max_relative_distance: int = 512):
        super().__init__()
        if d_model % n_heads:
            raise ShapeMismatch(f"d_model {d_model} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.max_relative_distance = max_relative_distance
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)
        # one row per clipped distance, heads side by side
        self.rel = nn.Parameter(torch.randn(2 * max_relative_distance + 1, d_model) * 0.02)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None = None,
                use_skew: bool = True) -> torch.Tensor:
        """``x`` is ``(B, N, d)``; ``key_mask`` ``(B, N)`` is True where keys may be attended."""
        B, N, d = x.shape
        q, k, v = self.qkv(x).reshape(B, N, 3, self.n_heads, self.d_head).permute(2, 0, 3, 1, 4)
        table = nn.functional.embedding(relative_indices(N, self.max_relative_distance).to(x.device), self.rel)
        table = table.reshape(2 * N - 1, self.n_heads, self.d_head)
        rel = torch.einsum("bhnd,mhd->bhnm", q, table)
        rel = skew(rel) if use_skew else gather_relative(rel)
        logits = (q @ k.transpose(-1, -2) + rel) / math.sqrt(self.d_head)
        if key_mask is not None:
            logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(logits, dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(B, N, d)
        return self.out(y)


def sinusoidal_embedding(t, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Interleaved ``[sin(t w_0), cos(t w_0), sin(t w_1), ...]`` with ``w_i = max_period^(-2i/dim)``."""
    if dim % 2:
        raise OddDim(f"embedding dimension must be even, got {dim}")
    t = torch.as_tensor(t, dtype=torch.get_default_dtype())
    freqs = max_period ** (-torch.arange(0, dim, 2, dtype=t.dtype) / dim)
    angles = t[..., None] * freqs
    return torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1).reshape(*t.shape, dim)
