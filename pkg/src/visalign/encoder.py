"""Vision transformer over variable-size patch grids."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .crope import LearnedPosTable, RotaryConfig, RotaryMode, rotation_angles
from .errors import ContractError, ParameterError
from .layers import Attention, FeedForward, LayerNorm, init_linears, key_padding_bias
from .patcher import ImageSpec, PatchGrid, ResolutionPolicy, prepare_image


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 4
    width: int = 64
    heads: int = 4
    patch_size: int = 14
    mlp_ratio: int = 4
    channels: int = 3
    pos_grid: int = 8
    rope_base: float = 10000.0
    rotary_mode: RotaryMode = "crope"

    def __post_init__(self):
        if self.layers < 1 or self.width < 1 or self.heads < 1 or self.patch_size < 1:
            raise ParameterError(f"encoder sizes must be positive: {self}")
        if self.width % self.heads:
            raise ParameterError(f"width {self.width} not divisible by heads {self.heads}")
        if (self.width // self.heads) % 4:
            raise ParameterError(f"head dim {self.width // self.heads} must be divisible by 4")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def rotary(self) -> RotaryConfig:
        return RotaryConfig(head_dim=self.head_dim, base=self.rope_base, mode=self.rotary_mode)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass
class VisualFeatures:
    """Encoder output for a batch; ``z[b, :n_b]`` are the valid rows of sample b."""

    z: torch.Tensor  # (B, N_max, D)
    valid: torch.Tensor  # (B, N_max) bool
    grids: list[PatchGrid] = field(default_factory=list)

    def rows(self, b: int) -> torch.Tensor:
        return self.z[b, : self.grids[b].n]


class VisionEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.rotary_mode: RotaryMode = cfg.rotary_mode
        self.patch_embed = nn.Parameter(torch.empty(cfg.patch_dim, cfg.width))
        self.pos = LearnedPosTable(cfg.pos_grid, cfg.width)
        self.blocks = nn.ModuleList()
        for _ in range(cfg.layers):
            blk = nn.Module()
            blk.attn = Attention(cfg.width, cfg.heads)
            blk.ffn = FeedForward(cfg.width, cfg.width * cfg.mlp_ratio)
            self.blocks.append(blk)
        self.norm = LayerNorm(cfg.width)

    def reset_parameters(self, gen: torch.Generator) -> None:
        with torch.no_grad():
            self.patch_embed.copy_(torch.randn(self.patch_embed.shape, generator=gen) / np.sqrt(self.cfg.patch_dim))
        init_linears(self, gen)

    @property
    def rotary(self) -> RotaryConfig:
        return replace(self.cfg.rotary, mode=self.rotary_mode)

    def embed(self, grid: PatchGrid) -> torch.Tensor:
        """Patch projection plus the table resampled to the grid: (N, D)."""
        x = torch.as_tensor(grid.patches, dtype=self.patch_embed.dtype)
        if x.shape[1] != self.patch_embed.shape[0]:
            raise ContractError(f"patch width {x.shape[1]} != embedding input {self.patch_embed.shape[0]}")
        z = nx.matmul(x, self.patch_embed)
        if self.rotary.uses_table:
            z = z + self.pos((grid.rows, grid.cols))
        return z

    def angles(self, grid: PatchGrid) -> torch.Tensor:
        # x is the column index, y the row index
        coords = grid.coords
        return rotation_angles(coords[:, 1], coords[:, 0], self.cfg.head_dim, self.cfg.rope_base)

    def run_blocks(self, z: torch.Tensor, angles=None, bias=None) -> torch.Tensor:
        for blk in self.blocks:
            z = blk.attn(z, angles, bias)
            z = blk.ffn(z)
        return self.norm(z)

    def forward(self, grids: list[PatchGrid]) -> VisualFeatures:
        if not grids:
            raise ContractError("encoder needs at least one grid")
        n_max = max(g.n for g in grids)
        d = self.cfg.width
        dtype = self.patch_embed.dtype
        rows, valid, angs = [], torch.zeros(len(grids), n_max, dtype=torch.bool), []
        for b, g in enumerate(grids):
            z0 = self.embed(g)
            pad = n_max - g.n
            rows.append(torch.cat([z0, z0.new_zeros(pad, d)]) if pad else z0)
            valid[b, : g.n] = True
            if self.rotary.uses_rotation:
                a = self.angles(g)
                angs.append(torch.cat([a, a.new_zeros(pad, a.shape[1])]) if pad else a)
        z = torch.stack(rows)
        angles = torch.stack(angs)[:, None] if angs else None
        bias = key_padding_bias(valid, dtype) if not bool(valid.all()) else None
        z = self.run_blocks(z, angles, bias)
        return VisualFeatures(z=z, valid=valid, grids=list(grids))


def encode(
    encoder: VisionEncoder, image: ImageSpec, policy: ResolutionPolicy, merge: int = 1
) -> VisualFeatures:
    """Single image: resolve -> patchify -> embed -> blocks -> final norm."""
    grid = prepare_image(image, policy, encoder.cfg.patch_size, merge)
    return encoder([grid])
