"""Transformer building blocks shared by the vision encoder and the decoder."""

from __future__ import annotations

import math

import torch
from torch import nn

from . import numerics as nx
from .crope import rotate_pairs


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True, std: float = 0.02):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d_out, d_in))
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None
        self.std = std

    def reset_parameters(self, gen: torch.Generator) -> None:
        with torch.no_grad():
            self.weight.copy_(torch.randn(self.weight.shape, generator=gen) * self.std)
            if self.bias is not None:
                self.bias.zero_()

    def forward(self, x: torch.Tensor, weight=None, bias=None) -> torch.Tensor:
        w = self.weight if weight is None else weight
        b = self.bias if bias is None else bias
        return nx.linear(x, w, b)


class LayerNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return nx.layer_norm(x, self.gain, self.bias)


class Attention(nn.Module):
    """Pre-norm multi-head self-attention with residual.

    ``angles`` (broadcastable to ``[B, 1, N, head_dim/2]``) rotates q and k when
    given; ``bias`` is an additive mask broadcastable to ``[B, heads, N, N]``.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.norm = LayerNorm(dim)
        self.q = Linear(dim, dim)
        self.k = Linear(dim, dim)
        self.v = Linear(dim, dim)
        self.o = Linear(dim, dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.reshape(b, n, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, z: torch.Tensor, angles=None, bias=None) -> torch.Tensor:
        h = self.norm(z)
        q, k, v = self._split(self.q(h)), self._split(self.k(h)), self._split(self.v(h))
        if angles is not None:
            q = rotate_pairs(q, angles)
            k = rotate_pairs(k, angles)
        scores = nx.matmul(q * (1.0 / math.sqrt(self.head_dim)), k.transpose(-1, -2))
        if bias is not None:
            scores = scores + bias
        attn = nx.softmax(scores, axis=-1)
        out = nx.matmul(attn, v).transpose(1, 2).reshape(z.shape)
        return z + self.o(out)


class FeedForward(nn.Module):
    """Pre-norm two-layer GELU MLP with residual."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.norm = LayerNorm(dim)
        self.fc1 = Linear(dim, hidden)
        self.fc2 = Linear(hidden, dim)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        return y + self.fc2(nx.gelu(self.fc1(self.norm(y))))


def init_linears(module: nn.Module, gen: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, Linear):
            m.reset_parameters(gen)


def key_padding_bias(valid: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
    """``[B, N]`` validity mask -> additive ``[B, 1, 1, N]`` bias (0 or -inf)."""
    bias = torch.zeros(valid.shape, dtype=dtype)
    bias = bias.masked_fill(~valid, float("-inf"))
    return bias[:, None, None, :]
