"""Continual rotary position encoding for patch grids.

Absolute positions come from a learned G x G table resampled to the target
grid; relative positions come from 2D rotary rotation of queries and keys.
``RotaryConfig.mode`` selects either mechanism alone or both.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .errors import ContractError, ParameterError

RotaryMode = Literal["crope", "rope2d_only", "learned_only"]
ROTARY_MODES = ("crope", "rope2d_only", "learned_only")


@dataclass(frozen=True)
class RotaryConfig:
    head_dim: int
    base: float = 10000.0
    mode: RotaryMode = "crope"

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 4:
            raise ParameterError(f"rotary head_dim must be a positive multiple of 4, got {self.head_dim}")
        if not self.base > 0:
            raise ParameterError(f"rotary base must be positive, got {self.base}")
        if self.mode not in ROTARY_MODES:
            raise ParameterError(f"unknown rotary mode {self.mode!r}")

    @property
    def uses_rotation(self) -> bool:
        return self.mode != "learned_only"

    @property
    def uses_table(self) -> bool:
        return self.mode != "rope2d_only"


def _lerp_axis(t: torch.Tensor, size: int, axis: int) -> torch.Tensor:
    n = t.shape[axis]
    if n == size:
        return t
    if size == 1:
        src = torch.zeros(1, dtype=torch.float64)
    else:
        src = torch.arange(size, dtype=torch.float64) * ((n - 1) / (size - 1))
    i0 = src.floor().long().clamp(0, n - 1)
    i1 = (i0 + 1).clamp(max=n - 1)
    w = (src - i0).to(t.dtype)
    shape = [1] * t.dim()
    shape[axis] = size
    w = w.reshape(shape)
    t0 = t.index_select(axis, i0)
    t1 = t.index_select(axis, i1)
    return t0 + w * (t1 - t0)


def interpolate_pos(table: torch.Tensor, grid_size: int, target: tuple[int, int]) -> torch.Tensor:
    """Align-corners bilinear resampling of a flattened G*G x D table to rows*cols x D."""
    rows, cols = target
    if rows < 1 or cols < 1:
        raise ParameterError(f"target grid must be positive, got {target}")
    if table.shape[0] != grid_size * grid_size:
        raise ContractError(f"table has {table.shape[0]} rows, expected {grid_size}^2")
    t = table.reshape(grid_size, grid_size, -1)
    t = _lerp_axis(t, rows, 0)
    t = _lerp_axis(t, cols, 1)
    return t.reshape(rows * cols, -1)


def sincos_table(grid_size: int, dim: int) -> np.ndarray:
    """Smooth 2D sine-cosine table, used to initialise the learned table."""
    if dim % 4:
        raise ParameterError(f"sincos table width must be a multiple of 4, got {dim}")
    quarter = dim // 4
    omega = 1.0 / 10000 ** (np.arange(quarter, dtype=np.float64) / quarter)
    r, c = np.meshgrid(np.arange(grid_size), np.arange(grid_size), indexing="ij")
    out_r = r.reshape(-1, 1) * omega
    out_c = c.reshape(-1, 1) * omega
    return np.concatenate([np.sin(out_c), np.cos(out_c), np.sin(out_r), np.cos(out_r)], axis=1)


class LearnedPosTable(nn.Module):
    def __init__(self, grid_size: int, dim: int):
        super().__init__()
        self.grid_size = grid_size
        self.table = nn.Parameter(torch.from_numpy(sincos_table(grid_size, dim)).float())

    def forward(self, target: tuple[int, int]) -> torch.Tensor:
        return interpolate_pos(self.table, self.grid_size, target)


def rotation_angles(x, y, head_dim: int, base: float = 10000.0) -> torch.Tensor:
    """Per-token rotation angles, shape (N, head_dim // 2).

    Pair ``j < head_dim // 4`` uses frequency ``base ** (-4 j / head_dim)``;
    the first quarter of the channels' pairs rotate by ``x``, the rest by ``y``.
    """
    if head_dim % 4:
        raise ParameterError(f"head_dim must be divisible by 4, got {head_dim}")
    x = torch.as_tensor(x, dtype=torch.float64).reshape(-1, 1)
    y = torch.as_tensor(y, dtype=torch.float64).reshape(-1, 1)
    if x.shape != y.shape:
        raise ContractError(f"x and y coordinate counts differ: {x.shape[0]} vs {y.shape[0]}")
    j = torch.arange(head_dim // 4, dtype=torch.float64)
    theta = base ** (-4.0 * j / head_dim)
    return torch.cat([x * theta, y * theta], dim=1)


def rotate_pairs(v: torch.Tensor, angles: torch.Tensor) -> torch.Tensor:
    """Rotate consecutive channel pairs (2i, 2i+1) of ``v[..., N, D]`` by ``angles[..., N, D/2]``.

    Leading dimensions of ``angles`` broadcast against those of ``v``.
    """
    n, d = v.shape[-2], v.shape[-1]
    if tuple(angles.shape[-2:]) != (n, d // 2):
        raise ContractError(f"angles {tuple(angles.shape)} do not match tokens/pairs ({n}, {d // 2})")
    cos = torch.cos(angles).to(v.dtype)
    sin = torch.sin(angles).to(v.dtype)
    pairs = v.reshape(*v.shape[:-1], d // 2, 2)
    a, b = pairs[..., 0], pairs[..., 1]
    out = torch.stack([a * cos - b * sin, a * sin + b * cos], dim=-1)
    return nx.check_finite(out.reshape(v.shape), "rope_rotate")


def rope2d_rotate(v: torch.Tensor, coords, base: float = 10000.0) -> torch.Tensor:
    """Apply the 2D rotary matrix of each token's (x, y) coordinate to ``v[..., N, head_dim]``."""
    coords = torch.as_tensor(np.asarray(coords), dtype=torch.float64).reshape(-1, 2)
    if coords.shape[0] != v.shape[-2]:
        raise ContractError(f"{coords.shape[0]} coordinates for {v.shape[-2]} tokens")
    angles = rotation_angles(coords[:, 0], coords[:, 1], v.shape[-1], base)
    return rotate_pairs(v, angles)


def rope1d_angles(positions, head_dim: int, base: float = 10000.0) -> torch.Tensor:
    """Standard 1D rotary angles, shape (N, head_dim // 2)."""
    pos = torch.as_tensor(positions, dtype=torch.float64).reshape(-1, 1)
    j = torch.arange(head_dim // 2, dtype=torch.float64)
    return pos * base ** (-2.0 * j / head_dim)


def implied_matrix(x: float, y: float, head_dim: int, base: float = 10000.0) -> torch.Tensor:
    """Dense block-diagonal rotation matrix for one coordinate (for orthogonality checks)."""
    angles = rotation_angles([x], [y], head_dim, base)[0]
    m = torch.zeros(head_dim, head_dim, dtype=torch.float64)
    for p, a in enumerate(angles.tolist()):
        c, s = math.cos(a), math.sin(a)
        m[2 * p, 2 * p], m[2 * p, 2 * p + 1] = c, -s
        m[2 * p + 1, 2 * p], m[2 * p + 1, 2 * p + 1] = s, c
    return m
