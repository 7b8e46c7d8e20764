"""Three-stage orchestration: model construction, stage ordering, resume, metrics files."""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint as ckpt_io
from .align import PriorMarginal
from .config import RunConfig, dumps
from .corpus import Vocabulary, compute_prior
from .data import DataSource
from .errors import ConfigError
from .model import AlignSettings, MultimodalModel
from .trainer import STAGE_ORDER, StageResult, run_stage

STAGE_REQUESTS = {
    "I": ("I",),
    "II": ("II-fixed", "II-native"),
    "III": ("III",),
    "all": STAGE_ORDER,
}
METRICS_FILE = "metrics.jsonl"


def build_model(cfg: RunConfig, vocab: Vocabulary) -> MultimodalModel:
    return MultimodalModel(cfg.encoder, replace(cfg.decoder, vocab_size=len(vocab)))


def data_source(cfg: RunConfig, vocab: Vocabulary) -> DataSource:
    return DataSource(cfg.corpus, vocab, cfg.encoder.patch_size)


def corpus_prior(cfg: RunConfig, vocab: Vocabulary) -> PriorMarginal:
    return compute_prior((cfg.corpus.text("train", i) for i in range(cfg.corpus.train_pairs)), vocab)


def check_order(stages: tuple[str, ...], resume_stage: str | None) -> None:
    """Stages must run in recipe order, strictly after the resumed checkpoint's stage."""
    first = STAGE_ORDER.index(stages[0])
    if resume_stage is None:
        if first != 0:
            raise ConfigError([f"stage {stages[0]} needs --resume with a checkpoint from an earlier stage"])
        return
    if resume_stage not in STAGE_ORDER:
        raise ConfigError([f"checkpoint has unknown stage {resume_stage!r}"])
    if STAGE_ORDER.index(resume_stage) >= first:
        raise ConfigError(
            [f"cannot run stage {stages[0]} after a stage-{resume_stage} checkpoint; recipe order is {' < '.join(STAGE_ORDER)}"]
        )


class Recipe:
    """A model plus everything needed to continue the recipe deterministically."""

    def __init__(self, cfg: RunConfig, vocab: Vocabulary | None = None, resume: ckpt_io.Checkpoint | None = None):
        self.cfg = cfg
        self.vocab = vocab or Vocabulary.default()
        self.data = data_source(cfg, self.vocab)
        self.model = build_model(cfg, self.vocab)
        # single source of randomness: model init seed and every shuffle
        self.rng = np.random.default_rng(cfg.seed)
        self.step = 0
        self.last_stage: str | None = None
        if resume is None:
            self.model.reset_parameters(int(self.rng.integers(2**31)))
            self.prior = corpus_prior(cfg, self.vocab)
        else:
            ckpt_io.load_into(self.model, resume)
            self.rng.bit_generator.state = resume.meta["rng_state"]
            self.step = int(resume.meta.get("step", 0))
            self.last_stage = resume.stage
            self.prior = PriorMarginal(resume.prior) if resume.prior is not None else corpus_prior(cfg, self.vocab)
        self.align = AlignSettings(
            prior=self.prior,
            sinkhorn=cfg.align.sinkhorn,
            temperature=cfg.align.temperature,
            strict=cfg.align.strict,
        )

    def run(
        self,
        stages: tuple[str, ...],
        out_dir: str | Path | None = None,
        on_metrics: Callable[[dict], None] | None = None,
        spy: Callable[[dict], None] | None = None,
        stage_hook: Callable[[str, MultimodalModel], None] | None = None,
    ) -> list[StageResult]:
        check_order(stages, self.last_stage)
        results = []
        for name in stages:
            if stage_hook is not None:
                stage_hook(name, self.model)
            res = run_stage(
                self.cfg.stages[name], self.data, self.model, self.rng, self.align,
                out_dir=out_dir, on_metrics=on_metrics, spy=spy, global_step=self.step,
                meta={"config": dumps(self.cfg)},
            )
            self.step += res.steps
            self.last_stage = name
            results.append(res)
        return results


def train(
    cfg: RunConfig,
    request: str = "all",
    resume: ckpt_io.Checkpoint | None = None,
    out_dir: str | Path | None = None,
) -> list[StageResult]:
    """Run the requested stages, writing checkpoints and ``metrics.jsonl`` to ``out_dir``."""
    stages = STAGE_REQUESTS[request]
    check_order(stages, resume.stage if resume is not None else None)
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    recipe = Recipe(cfg, resume=resume)
    # a fresh run starts a new metrics file; a resumed one continues it
    with open(out / METRICS_FILE, "w" if resume is None else "a", encoding="utf-8") as fh:

        def write(record: dict) -> None:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

        return recipe.run(stages, out_dir=out, on_metrics=write)
