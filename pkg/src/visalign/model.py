"""Encoder + adapter + decoder, and the two training losses over a batch."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .align import (
    TEMPERATURE,
    PriorMarginal,
    SinkhornConfig,
    alignment_loss,
    pool,
    project_prototypes,
    sinkhorn_targets,
)
from .crope import RotaryMode
from .encoder import EncoderConfig, VisionEncoder
from .lm import AdapterConfig, Adapter, CausalDecoder, DecoderConfig, TokenSequence, decode_loss, forward_text_only
from .patcher import PatchGrid

PREFIXES = ("adapter", "encoder", "decoder")


@dataclass
class Batch:
    grids: list[PatchGrid]
    seqs: list[TokenSequence]

    def __len__(self) -> int:
        return len(self.seqs)


@dataclass
class AlignSettings:
    prior: PriorMarginal
    sinkhorn: SinkhornConfig = SinkhornConfig()
    temperature: float = TEMPERATURE
    # also stop the alignment gradient at the adapter parameters
    strict: bool = False


@dataclass
class LossParts:
    l_dec: torch.Tensor
    l_align: torch.Tensor | None = None
    targets: torch.Tensor | None = None
    text_scores: torch.Tensor | None = None
    vision_scores: torch.Tensor | None = None


class MultimodalModel(nn.Module):
    def __init__(self, enc: EncoderConfig, dec: DecoderConfig, merge: int = 2):
        super().__init__()
        self.merge = merge
        self.encoder = VisionEncoder(enc)
        self.adapter = Adapter(AdapterConfig(enc.width, dec.width, merge))
        self.decoder = CausalDecoder(dec)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        self.encoder.reset_parameters(gen)
        self.adapter.reset_parameters(gen)
        self.decoder.reset_parameters(gen)

    def set_rotary_mode(self, mode: RotaryMode) -> None:
        self.encoder.rotary_mode = mode

    def visual_tokens(self, grids: list[PatchGrid], detach_adapter: bool = False):
        return self.adapter(self.encoder(grids), detach_params=detach_adapter)

    def text_targets(self, seqs: list[TokenSequence], settings: AlignSettings) -> tuple[torch.Tensor, torch.Tensor]:
        """Sinkhorn targets from the text-only decoder pass; no gradient anywhere."""
        with torch.no_grad():
            h, valid = forward_text_only(self.decoder, seqs)
            scores = project_prototypes(pool(h, valid), self.decoder.prototypes)
        return sinkhorn_targets(scores, settings.prior, settings.sinkhorn), scores

    def losses(
        self,
        batch: Batch,
        align: AlignSettings | None = None,
        frozen_prototypes: torch.Tensor | None = None,
        frozen_targets: torch.Tensor | None = None,
    ) -> LossParts:
        """Decoding loss, plus the alignment loss when ``align`` is given.

        ``frozen_prototypes`` / ``frozen_targets`` pin the stop-gradient
        quantities to fixed values, which turns the stop-gradient objective
        into an ordinary function for finite-difference checks.
        """
        feats = self.encoder(batch.grids)
        vis = self.adapter(feats)
        parts = LossParts(l_dec=decode_loss(self.decoder, vis, batch.seqs))
        if align is None:
            return parts
        if frozen_targets is None:
            targets, text_scores = self.text_targets(batch.seqs, align)
        else:
            targets, text_scores = frozen_targets, None
        vis_a = self.adapter(feats, detach_params=True) if align.strict else vis
        protos = self.decoder.prototypes if frozen_prototypes is None else frozen_prototypes
        scores = project_prototypes(pool(vis_a.h, vis_a.valid), protos)
        parts.l_align = alignment_loss(scores, targets, align.temperature)
        parts.targets = targets
        parts.text_scores = text_scores
        parts.vision_scores = scores
        return parts

    def named_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        groups: dict[str, list] = {p: [] for p in PREFIXES}
        for name, param in self.named_parameters():
            groups[name.split(".", 1)[0]].append((name, param))
        return groups
