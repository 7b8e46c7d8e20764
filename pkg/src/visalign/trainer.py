"""Staged training: trainability masks, loss combination, optimiser groups, schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .crope import ROTARY_MODES, RotaryMode
from .data import DataSource, plan_batches
from .errors import ContractError, NumericalError, ParameterError, TrainingAborted
from .model import PREFIXES, AlignSettings, MultimodalModel
from .patcher import ResolutionPolicy

STAGE_ORDER = ("I", "II-fixed", "II-native", "III")
ALL_GROUPS = ("adapter", "encoder", "decoder")
DEFAULT_ALPHA = 0.05
BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
WEIGHT_DECAY = 0.05
CLIP_NORM = 1.0


@dataclass(frozen=True)
class StageConfig:
    name: str
    trainable: tuple[str, ...]
    resolution: ResolutionPolicy
    rotary_mode: RotaryMode
    alpha: float
    lr_adapter: float
    lr_vfm: float
    lr_llm: float
    epochs: int = 1
    batch_size: int = 16
    warmup_ratio: float = 0.05
    min_lr: float = 0.0
    num_pairs: int = 2000
    split: str = "train"

    def __post_init__(self):
        if self.name not in STAGE_ORDER:
            raise ParameterError(f"unknown stage {self.name!r}; expected one of {STAGE_ORDER}")
        unknown = set(self.trainable) - set(ALL_GROUPS)
        if unknown:
            raise ParameterError(f"stage {self.name}: unknown trainable groups {sorted(unknown)}")
        if self.rotary_mode not in ROTARY_MODES:
            raise ParameterError(f"stage {self.name}: unknown rotary mode {self.rotary_mode!r}")
        if self.alpha < 0:
            raise ParameterError(f"stage {self.name}: alpha must be nonnegative")
        if self.name == "III" and self.alpha != 0:
            raise ParameterError("stage III trains on the decoding loss alone; alpha must be 0")
        for key in ("lr_adapter", "lr_vfm", "lr_llm"):
            if getattr(self, key) < 0:
                raise ParameterError(f"stage {self.name}: {key} must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1 or self.num_pairs < 1:
            raise ParameterError(f"stage {self.name}: epochs, batch_size and num_pairs must be positive")
        if not 0 <= self.warmup_ratio < 1:
            raise ParameterError(f"stage {self.name}: warmup_ratio must be in [0, 1)")

    @property
    def lrs(self) -> dict[str, float]:
        return {"adapter": self.lr_adapter, "encoder": self.lr_vfm, "decoder": self.lr_llm}

    @property
    def total_steps(self) -> int:
        return self.epochs * math.ceil(self.num_pairs / self.batch_size)


def default_stages() -> dict[str, StageConfig]:
    """Desk-scale recipe.

    Learning rates follow the reference table except the stage-II LLM rate,
    which is 50x larger because the toy decoder starts from random weights
    rather than a pretrained language model. By stage III the decoder is
    trained, so the small fine-tuning rates apply unchanged.
    """
    native = ResolutionPolicy("native", max_visual_tokens=256)
    return {
        "I": StageConfig(
            "I", ("adapter",), ResolutionPolicy("fixed", side=112), "learned_only", DEFAULT_ALPHA,
            lr_adapter=1e-3, lr_vfm=0.0, lr_llm=0.0, num_pairs=2000,
        ),
        "II-fixed": StageConfig(
            "II-fixed", ALL_GROUPS, ResolutionPolicy("fixed", side=224), "crope", DEFAULT_ALPHA,
            lr_adapter=5e-3, lr_vfm=1e-4, lr_llm=1e-3, num_pairs=4000,
        ),
        "II-native": StageConfig(
            "II-native", ALL_GROUPS, native, "crope", DEFAULT_ALPHA,
            lr_adapter=5e-3, lr_vfm=1e-4, lr_llm=1e-3, num_pairs=4000,
        ),
        "III": StageConfig(
            "III", ALL_GROUPS, native, "crope", 0.0,
            lr_adapter=1e-5, lr_vfm=2e-5, lr_llm=1e-5, num_pairs=2000, split="instruct",
        ),
    }


def combined_loss(l_dec: torch.Tensor, l_align, stage: str, alpha: float = DEFAULT_ALPHA) -> torch.Tensor:
    """L_dec + alpha * L_align in stages I and II; L_dec alone in stage III."""
    if stage == "III" or alpha == 0 or l_align is None:
        return l_dec
    return l_dec + alpha * l_align


def lr_at(step: int, total: int, peak: float, warmup_ratio: float, floor: float = 0.0) -> float:
    """Linear warmup from 0, then cosine decay to ``floor`` at ``total``."""
    warmup = max(1, round(warmup_ratio * total)) if warmup_ratio > 0 else 0
    if step < warmup:
        return peak * step / warmup
    span = max(1, total - warmup)
    progress = min(1.0, (step - warmup) / span)
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class ParamGroup:
    prefix: str
    names: list[str]
    lr: float
    trainable: bool


def _no_decay(name: str) -> bool:
    return ".norm." in name or name in ("encoder.pos.table", "decoder.embed") or name.endswith("norm.gain") or name.endswith("norm.bias")


def build_param_groups(model: MultimodalModel, stage: StageConfig) -> list[ParamGroup]:
    groups = {p: ParamGroup(p, [], stage.lrs[p], p in stage.trainable) for p in PREFIXES}
    for name, _ in model.named_parameters():
        prefix = name.split(".", 1)[0]
        if prefix not in groups:
            raise ContractError(f"parameter {name!r} has no optimiser group")
        groups[prefix].names.append(name)
    return [groups[p] for p in PREFIXES]


def make_optimizer(model: MultimodalModel, groups: list[ParamGroup]) -> torch.optim.AdamW:
    params = dict(model.named_parameters())
    torch_groups = []
    for g in groups:
        if not g.trainable:
            continue
        for decay in (True, False):
            ps = [params[n] for n in g.names if _no_decay(n) != decay]
            if ps:
                torch_groups.append(
                    {"params": ps, "lr": 0.0, "weight_decay": WEIGHT_DECAY if decay else 0.0, "prefix": g.prefix}
                )
    return torch.optim.AdamW(torch_groups, lr=0.0, betas=BETAS, eps=ADAM_EPS, foreach=False)


def apply_trainability(model: MultimodalModel, groups: list[ParamGroup]) -> None:
    params = dict(model.named_parameters())
    for g in groups:
        for n in g.names:
            params[n].requires_grad_(g.trainable)


@dataclass
class StageResult:
    stage: str
    steps: int
    metrics: list[dict] = field(default_factory=list)
    checkpoint: ckpt_io.Checkpoint | None = None
    path: Path | None = None


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def run_stage(
    cfg: StageConfig,
    data: DataSource,
    model: MultimodalModel,
    rng: np.random.Generator,
    align: AlignSettings | None,
    *,
    out_dir: str | Path | None = None,
    on_metrics: Callable[[dict], None] | None = None,
    spy: Callable[[dict], None] | None = None,
    max_steps: int | None = None,
    global_step: int = 0,
    meta: dict | None = None,
) -> StageResult:
    """Train one stage and return its metrics and end-of-stage checkpoint.

    ``spy`` receives the raw loss terms of every step (for instrumentation);
    ``on_metrics`` receives the public metrics record.
    """
    model.set_rotary_mode(cfg.rotary_mode)
    model.train()
    groups = build_param_groups(model, cfg)
    apply_trainability(model, groups)
    opt = make_optimizer(model, groups)
    trainable = [p for g in opt.param_groups for p in g["params"]]
    use_align = cfg.name != "III" and cfg.alpha > 0 and align is not None

    indices = list(range(cfg.num_pairs))
    sizes = None
    if cfg.resolution.mode == "native":
        sizes = {}
        for i in indices:
            r, c = data.grid_shape(cfg.split, i, cfg.resolution)
            sizes[i] = r * c
    plan = []
    for _ in range(cfg.epochs):
        plan.extend(plan_batches(indices, cfg.batch_size, rng, sizes))
    total = len(plan)
    if max_steps is not None:
        plan = plan[:max_steps]

    result = StageResult(stage=cfg.name, steps=0)
    for step, idx in enumerate(plan):
        lrs = {p: lr_at(step, total, lr, cfg.warmup_ratio, cfg.min_lr) for p, lr in cfg.lrs.items()}
        for g in opt.param_groups:
            g["lr"] = lrs[g["prefix"]]
        batch = data.batch(cfg.split, idx, cfg.resolution)
        try:
            parts = model.losses(batch, align if use_align else None)
            loss = combined_loss(parts.l_dec, parts.l_align, cfg.name, cfg.alpha)
            if not torch.isfinite(loss):
                raise NumericalError("combined_loss", f"loss is {float(loss)}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            grad_norm = float(torch.nn.utils.clip_grad_norm_(trainable, CLIP_NORM)) if trainable else 0.0
            if not math.isfinite(grad_norm):
                raise NumericalError("backward", f"gradient norm is {grad_norm}")
        except NumericalError as exc:
            raise TrainingAborted(step, cfg.name, exc) from exc
        if trainable:
            opt.step()
        l_align = float(parts.l_align.detach()) if parts.l_align is not None else None
        if spy is not None:
            spy({"step": step, "stage": cfg.name, "alpha": cfg.alpha if use_align else 0.0,
                 "l_dec": parts.l_dec, "l_align": parts.l_align, "loss": loss})
        tokens = sum(g.n // (data.merge * data.merge) for g in batch.grids) + sum(s.T for s in batch.seqs)
        record = {
            "step": global_step + step,
            "stage": cfg.name,
            "l_dec": float(parts.l_dec.detach()),
            "l_align": l_align,
            "lr_adapter": lrs["adapter"],
            "lr_vfm": lrs["encoder"],
            "lr_llm": lrs["decoder"],
            "grad_norm": grad_norm,
            "tokens": tokens,
        }
        result.metrics.append(record)
        if on_metrics is not None:
            on_metrics(record)
        result.steps += 1
    opt.zero_grad(set_to_none=True)
    for p in model.parameters():
        p.requires_grad_(True)

    prior = align.prior.u if align is not None else None
    info = {**(meta or {}), "stage": cfg.name, "step": global_step + result.steps, "rng_state": rng_state(rng)}
    result.checkpoint = ckpt_io.from_model(model, prior, info)
    if out_dir is not None:
        path = Path(out_dir) / f"stage-{cfg.name}.cmpk"
        path.parent.mkdir(parents=True, exist_ok=True)
        ckpt_io.save(path, result.checkpoint)
        result.path = path
    return result
