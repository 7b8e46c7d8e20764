"""Language side: the 2x2 merge adapter and a small weight-tied causal decoder."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from . import numerics as nx
from .crope import rope1d_angles
from .encoder import VisualFeatures
from .errors import ContractError, ParameterError
from .layers import Attention, FeedForward, LayerNorm, Linear, init_linears


@dataclass(frozen=True)
class AdapterConfig:
    vision_width: int
    text_width: int
    merge: int = 2


@dataclass(frozen=True)
class DecoderConfig:
    layers: int = 2
    width: int = 64
    heads: int = 4
    vocab_size: int = 512
    max_positions: int = 256
    mlp_ratio: int = 4
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.width % self.heads or (self.width // self.heads) % 2:
            raise ParameterError(f"decoder width {self.width} / heads {self.heads} must give an even head dim")
        if self.vocab_size < 2:
            raise ParameterError(f"vocab_size must be at least 2, got {self.vocab_size}")


@dataclass
class TokenSequence:
    """Text token ids (including BOS/EOS); visual slots are supplied separately."""

    ids: list[int]

    @property
    def T(self) -> int:
        return len(self.ids)


@dataclass
class VisualTokens:
    h: torch.Tensor  # (B, V_max, D_t)
    valid: torch.Tensor  # (B, V_max) bool
    shapes: list[tuple[int, int]]  # merged (rows, cols) per sample

    @property
    def lengths(self) -> list[int]:
        return [r * c for r, c in self.shapes]


def merge_2x2(z: torch.Tensor, rows: int, cols: int, merge: int = 2) -> torch.Tensor:
    """(rows*cols, D) -> (rows/m * cols/m, m*m*D), neighbours concatenated row-major."""
    if rows % merge or cols % merge:
        raise ContractError(f"grid {rows}x{cols} is not divisible by the {merge}x{merge} merge")
    d = z.shape[-1]
    x = z.reshape(rows // merge, merge, cols // merge, merge, d).permute(0, 2, 1, 3, 4)
    return x.reshape((rows // merge) * (cols // merge), merge * merge * d)


class Adapter(nn.Module):
    def __init__(self, cfg: AdapterConfig):
        super().__init__()
        self.cfg = cfg
        m2 = cfg.merge * cfg.merge
        self.fc1 = Linear(m2 * cfg.vision_width, cfg.text_width)
        self.fc2 = Linear(cfg.text_width, cfg.text_width)

    def reset_parameters(self, gen: torch.Generator) -> None:
        init_linears(self, gen)

    def mlp(self, x: torch.Tensor, detach_params: bool = False) -> torch.Tensor:
        if detach_params:
            h = self.fc1(x, self.fc1.weight.detach(), self.fc1.bias.detach())
            return self.fc2(nx.gelu(h), self.fc2.weight.detach(), self.fc2.bias.detach())
        return self.fc2(nx.gelu(self.fc1(x)))

    def forward(self, feats: VisualFeatures, detach_params: bool = False) -> VisualTokens:
        m = self.cfg.merge
        merged, shapes = [], []
        for b, g in enumerate(feats.grids):
            merged.append(merge_2x2(feats.rows(b), g.rows, g.cols, m))
            shapes.append((g.rows // m, g.cols // m))
        v_max = max(x.shape[0] for x in merged)
        valid = torch.zeros(len(merged), v_max, dtype=torch.bool)
        padded = []
        for b, x in enumerate(merged):
            pad = v_max - x.shape[0]
            padded.append(torch.cat([x, x.new_zeros(pad, x.shape[1])]) if pad else x)
            valid[b, : x.shape[0]] = True
        h = self.mlp(torch.stack(padded), detach_params)
        return VisualTokens(h=h, valid=valid, shapes=shapes)


def causal_bias(n: int, dtype: torch.dtype) -> torch.Tensor:
    # right padding never precedes a valid token, so a causal mask covers it
    return torch.full((n, n), float("-inf"), dtype=dtype).triu(1)[None, None]


class CausalDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        # doubles as the output head and the alignment prototypes (W = embed.T)
        self.embed = nn.Parameter(torch.empty(cfg.vocab_size, cfg.width))
        self.blocks = nn.ModuleList()
        for _ in range(cfg.layers):
            blk = nn.Module()
            blk.attn = Attention(cfg.width, cfg.heads)
            blk.ffn = FeedForward(cfg.width, cfg.width * cfg.mlp_ratio)
            self.blocks.append(blk)
        self.norm = LayerNorm(cfg.width)

    def reset_parameters(self, gen: torch.Generator) -> None:
        with torch.no_grad():
            self.embed.copy_(torch.randn(self.embed.shape, generator=gen) * 0.02)
        init_linears(self, gen)

    @property
    def prototypes(self) -> torch.Tensor:
        """W with shape (D_t, K)."""
        return self.embed.transpose(0, 1)

    def token_embeddings(self, ids) -> torch.Tensor:
        return nx.embedding(self.embed, torch.as_tensor(ids, dtype=torch.long))

    def hidden(self, x: torch.Tensor) -> torch.Tensor:
        """Causal transformer over right-padded inputs ``x[B, L, D]``; returns normed states."""
        n = x.shape[1]
        if n > self.cfg.max_positions:
            raise ContractError(f"sequence length {n} exceeds max_positions {self.cfg.max_positions}")
        angles = rope1d_angles(torch.arange(n), self.cfg.width // self.cfg.heads, self.cfg.rope_base)
        bias = causal_bias(n, x.dtype)
        for blk in self.blocks:
            x = blk.attn(x, angles, bias)
            x = blk.ffn(x)
        return self.norm(x)

    def logits(self, h: torch.Tensor) -> torch.Tensor:
        return nx.matmul(h, self.prototypes)


def _pad_stack(rows: list[torch.Tensor]) -> torch.Tensor:
    n = max(r.shape[0] for r in rows)
    return torch.stack([torch.cat([r, r.new_zeros(n - r.shape[0], r.shape[1])]) if r.shape[0] < n else r for r in rows])


def assemble(decoder: CausalDecoder, vis: VisualTokens | None, seqs: list[TokenSequence]) -> tuple[torch.Tensor, list[int]]:
    """Right-padded ``[H_v; embed(X_t)]`` rows and the per-sample visual lengths."""
    rows, v_lens = [], []
    for b, seq in enumerate(seqs):
        parts = []
        v = 0
        if vis is not None:
            v = vis.lengths[b]
            parts.append(vis.h[b, :v])
        if seq.T:
            parts.append(decoder.token_embeddings(seq.ids))
        rows.append(torch.cat(parts) if len(parts) > 1 else parts[0])
        v_lens.append(v)
    return _pad_stack(rows), v_lens


def decode_loss(decoder: CausalDecoder, vis: VisualTokens, seqs: list[TokenSequence]) -> torch.Tensor:
    """Mean next-token NLL over every text position in the batch.

    Text token i of sample b is predicted from sequence position V_b + i - 1,
    so the first text token is conditioned on the visual prefix alone.
    """
    if len(seqs) != vis.h.shape[0]:
        raise ContractError(f"{len(seqs)} sequences for {vis.h.shape[0]} images")
    for seq in seqs:
        if seq.T < 1:
            raise ContractError("decode loss needs at least one text token")
    for v in vis.lengths:
        if v < 1:
            raise ContractError("decode loss needs at least one visual token")
    x, v_lens = assemble(decoder, vis, seqs)
    h = decoder.hidden(x)
    bi, pi, targets = [], [], []
    for b, seq in enumerate(seqs):
        for i, tok in enumerate(seq.ids):
            bi.append(b)
            pi.append(v_lens[b] + i - 1)
            targets.append(tok)
    sel = h[torch.tensor(bi), torch.tensor(pi)]
    logp = nx.log_softmax(decoder.logits(sel), axis=-1)
    nll = -logp.gather(1, torch.tensor(targets)[:, None]).squeeze(1)
    return nx.mean(nll)


def forward_text_only(decoder: CausalDecoder, seqs: list[TokenSequence]) -> tuple[torch.Tensor, torch.Tensor]:
    """Final hidden states without any visual prefix: ``(h[B, T_max, D], valid[B, T_max])``."""
    for seq in seqs:
        if seq.T < 1:
            raise ContractError("text-only forward needs at least one token")
    x, _ = assemble(decoder, None, seqs)
    valid = torch.zeros(x.shape[0], x.shape[1], dtype=torch.bool)
    for b, seq in enumerate(seqs):
        valid[b, : seq.T] = True
    return decoder.hidden(x), valid


@torch.no_grad()
def greedy_decode(decoder: CausalDecoder, vis: VisualTokens, b: int, bos: int, eos: int, max_len: int = 40) -> list[int]:
    """Greedy continuation for sample ``b``; returns ids after BOS up to (excluding) EOS."""
    prefix = vis.h[b : b + 1, : vis.lengths[b]]
    ids = [bos]
    out: list[int] = []
    for _ in range(max_len):
        x = torch.cat([prefix, decoder.token_embeddings(ids)[None]], dim=1)
        nxt = int(decoder.logits(decoder.hidden(x)[0, -1]).argmax())
        if nxt == eos:
            break
        out.append(nxt)
        ids.append(nxt)
    return out
