"""Held-out evaluation: decoding loss, perplexity, greedy exact match, token-budget sweeps."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import torch

from .data import DataSource
from .lm import decode_loss, greedy_decode
from .model import MultimodalModel
from .patcher import ResolutionPolicy

CSV_FIELDS = ("m", "l_dec", "perplexity", "exact_match")


@dataclass(frozen=True)
class EvalReport:
    m: int | None
    l_dec: float
    perplexity: float
    exact_match: float | None
    samples: int

    def row(self) -> dict:
        return {"m": self.m, "l_dec": self.l_dec, "perplexity": self.perplexity, "exact_match": self.exact_match}


@torch.no_grad()
def evaluate(
    model: MultimodalModel,
    data: DataSource,
    split: str = "holdout",
    policy: ResolutionPolicy | None = None,
    count: int | None = None,
    batch_size: int = 16,
    exact_match: bool = True,
) -> EvalReport:
    """Token-weighted mean L_dec over ``count`` samples of ``split``."""
    policy = policy or ResolutionPolicy("native", max_visual_tokens=256)
    count = count if count is not None else data.corpus.holdout_pairs
    was_training = model.training
    model.eval()
    total, tokens, hits = 0.0, 0, 0
    vocab = data.vocab
    for start in range(0, count, batch_size):
        idx = list(range(start, min(count, start + batch_size)))
        batch = data.batch(split, idx, policy)
        vis = model.visual_tokens(batch.grids)
        n = sum(s.T for s in batch.seqs)
        total += float(decode_loss(model.decoder, vis, batch.seqs)) * n
        tokens += n
        if exact_match:
            for b, seq in enumerate(batch.seqs):
                out = greedy_decode(model.decoder, vis, b, vocab.bos, vocab.eos, max_len=seq.T + 4)
                hits += vocab.detokenize(out) == vocab.detokenize(seq.ids)
    model.train(was_training)
    l_dec = total / tokens
    return EvalReport(
        m=policy.max_visual_tokens,
        l_dec=l_dec,
        perplexity=math.exp(l_dec),
        exact_match=hits / count if exact_match else None,
        samples=count,
    )


def budget_sweep(model, data, budgets, split="holdout", count=None, exact_match=True) -> list[EvalReport]:
    """One report per visual-token cap ``m`` (native resolution, aspect preserved)."""
    return [
        evaluate(model, data, split, ResolutionPolicy("native", max_visual_tokens=m), count, exact_match=exact_match)
        for m in budgets
    ]


def write_csv(reports: list[EvalReport], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in reports:
            w.writerow(r.row())
