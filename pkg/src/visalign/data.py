"""Turning corpus indices into model batches."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .corpus import CorpusConfig, Vocabulary, render
from .lm import TokenSequence
from .model import Batch
from .patcher import PatchGrid, ResolutionPolicy, prepare_image, resolve_resolution


def worker_threads() -> int:
    try:
        return max(1, int(os.environ.get("COMP_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class DataSource:
    corpus: CorpusConfig
    vocab: Vocabulary
    patch_size: int
    merge: int = 2

    def grid_shape(self, split: str, index: int, policy: ResolutionPolicy) -> tuple[int, int]:
        scene = self.corpus.scene(split, index)
        h, w = resolve_resolution((scene.height, scene.width), policy, self.patch_size, self.merge)
        return h // self.patch_size, w // self.patch_size

    def example(self, split: str, index: int, policy: ResolutionPolicy) -> tuple[PatchGrid, TokenSequence]:
        scene = self.corpus.scene(split, index)
        grid = prepare_image(render(scene), policy, self.patch_size, self.merge)
        return grid, self.vocab.tokenize(self.corpus.text(split, index))

    def batch(self, split: str, indices, policy: ResolutionPolicy) -> Batch:
        # each example depends only on its own seed, so thread scheduling cannot change results
        n = worker_threads()
        if n > 1 and len(indices) > 1:
            with ThreadPoolExecutor(n) as pool:
                items = list(pool.map(lambda i: self.example(split, int(i), policy), indices))
        else:
            items = [self.example(split, int(i), policy) for i in indices]
        return Batch(grids=[g for g, _ in items], seqs=[s for _, s in items])


def plan_batches(
    indices, batch_size: int, rng: np.random.Generator, sizes: dict[int, int] | None = None
) -> list[list[int]]:
    """Shuffle ``indices`` into batches.

    With ``sizes`` (index -> token count), samples are sorted by size inside
    windows of eight batches so each batch holds similar grids and little
    padding; the batch order is then shuffled again.
    """
    perm = [int(i) for i in rng.permutation(np.asarray(indices))]
    if sizes is None:
        return [perm[i : i + batch_size] for i in range(0, len(perm), batch_size)]
    window = batch_size * 8
    batches = []
    for start in range(0, len(perm), window):
        chunk = sorted(perm[start : start + window], key=lambda i: (sizes[i], i))
        batches.extend(chunk[i : i + batch_size] for i in range(0, len(chunk), batch_size))
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]
