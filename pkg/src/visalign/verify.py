"""Property suites behind ``visalign verify``.

Each check returns a :class:`Check`; a suite is a list of checks. Everything
runs in float64 on freshly seeded random instances.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
import torch

from . import numerics as nx
from .align import PriorMarginal, SinkhornConfig, sinkhorn_targets
from .corpus import CorpusConfig, Vocabulary, caption, generate_scene
from .crope import implied_matrix, interpolate_pos, rope2d_rotate
from .data import DataSource
from .encoder import EncoderConfig
from .lm import DecoderConfig
from .model import AlignSettings, Batch, MultimodalModel
from .patcher import ImageSpec, ResolutionPolicy, patchify
from .trainer import DEFAULT_ALPHA, StageConfig, combined_loss, run_stage

SUITES = ("gradcheck", "sinkhorn", "rope", "freeze")


@dataclass
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<34} {self.detail}"


# --- shared fixtures ----------------------------------------------------------


def toy_model(seed: int = 0, dtype=torch.float64, encoder: EncoderConfig | None = None,
              decoder: DecoderConfig | None = None, vocab: Vocabulary | None = None) -> MultimodalModel:
    vocab = vocab or Vocabulary.default()
    dec = replace(decoder or DecoderConfig(), vocab_size=len(vocab))
    model = MultimodalModel(encoder or EncoderConfig(), dec)
    model.reset_parameters(seed)
    return model.to(dtype)


def random_batch(seed: int, patch_size: int = 14, shapes=((4, 6), (2, 4)), vocab: Vocabulary | None = None) -> Batch:
    """Random-pixel grids of the given patch shapes with real captions; shapes differ so padding is exercised."""
    vocab = vocab or Vocabulary.default()
    rng = np.random.default_rng(seed)
    grids, seqs = [], []
    for i, (r, c) in enumerate(shapes):
        pixels = rng.random((3, r * patch_size, c * patch_size), dtype=np.float32)
        grids.append(patchify(ImageSpec(pixels), patch_size))
        seqs.append(vocab.tokenize(caption(generate_scene(seed * 1000 + i))))
    return Batch(grids=grids, seqs=seqs)


def uniform_align(model: MultimodalModel) -> AlignSettings:
    return AlignSettings(prior=PriorMarginal.uniform(model.decoder.cfg.vocab_size))


# --- gradcheck ----------------------------------------------------------------


def gradcheck_model(
    model: MultimodalModel,
    batch: Batch,
    alpha: float = DEFAULT_ALPHA,
    per_tensor: int | None = 8,
    h: float = 1e-5,
    seed: int = 0,
) -> tuple[float, str, int]:
    """Max relative error between autograd and central differences of L_dec + alpha*L_align.

    The stop-gradient quantities (prototype snapshot and Sinkhorn targets) are
    pinned at the base point so the objective is an ordinary function of the
    parameters. ``per_tensor`` entries are sampled from every parameter tensor
    (``None`` checks every entry). Returns (max error, worst tensor, entries checked).
    """
    align = uniform_align(model)
    base = model.losses(batch, align)
    protos = model.decoder.prototypes.detach().clone()
    targets = base.targets.detach().clone()

    def objective():
        parts = model.losses(batch, align, frozen_prototypes=protos, frozen_targets=targets)
        return combined_loss(parts.l_dec, parts.l_align, "II-fixed", alpha)

    model.zero_grad(set_to_none=True)
    objective().backward()
    gen = torch.Generator().manual_seed(seed)
    worst, worst_name, count = 0.0, "", 0
    for name, p in model.named_parameters():
        numel = p.numel()
        idx = list(range(numel)) if per_tensor is None else nx.sample_indices(numel, per_tensor, gen)
        analytic = p.grad.reshape(-1)[idx] if p.grad is not None else torch.zeros(len(idx), dtype=p.dtype)
        numeric = nx.finite_difference_inplace(objective, p, idx, h)
        err = nx.relative_error(analytic, numeric)
        count += len(idx)
        if err > worst:
            worst, worst_name = err, name
    model.zero_grad(set_to_none=True)
    return worst, worst_name, count


def check_gradcheck(per_tensor: int = 8, tol: float = 1e-4) -> list[Check]:
    t0 = time.perf_counter()
    model = toy_model(seed=1)
    batch = random_batch(seed=2)
    err, name, count = gradcheck_model(model, batch, per_tensor=per_tensor)
    secs = time.perf_counter() - t0
    detail = f"max rel err {err:.2e} at {name or '-'} over {count} entries, {secs:.0f}s"
    return [Check("gradcheck.end_to_end", err < tol, detail)]


# --- sinkhorn -----------------------------------------------------------------


def _random_instance(rng: np.random.Generator, k_max: int = 16, b_max: int = 8, scale: float = 1.0):
    k = int(rng.integers(2, k_max + 1))
    b = int(rng.integers(1, b_max + 1))
    scores = rng.normal(size=(k, b)) * scale
    prior = PriorMarginal(rng.dirichlet(np.ones(k)))
    return scores, prior


def _column_tv(a: np.ndarray, b: np.ndarray) -> float:
    return float(0.5 * np.abs(a - b).sum(axis=0).max())


def check_sinkhorn(instances: int = 200, seed: int = 0, oracle_scale: float = 1.0) -> list[Check]:
    rng = np.random.default_rng(seed)
    col_err, mono_bad, closed_err, b1_err, oracle_tv = 0.0, 0, 0.0, 0.0, 0.0
    for _ in range(instances):
        scores, prior = _random_instance(rng)
        trace: list[float] = []
        p = sinkhorn_targets(scores, prior, SinkhornConfig(n_iters=30), trace=trace).numpy()
        col_err = max(col_err, float(np.abs(p.sum(axis=0) - 1).max()))
        mono_bad += any(trace[i + 1] > trace[i] + 1e-12 for i in range(len(trace) - 1))

        # B = 1: diag(u) exp(C / eps), normalised
        c1 = scores[:, :1]
        one = sinkhorn_targets(c1, prior, SinkhornConfig(mode="one_sided")).numpy()[:, 0]
        w = np.log(prior.u) + c1[:, 0] / SinkhornConfig().epsilon
        ref = np.exp(w - w.max())
        closed_err = max(closed_err, float(np.abs(one - ref / ref.sum()).max()))
        two = sinkhorn_targets(c1, prior, SinkhornConfig()).numpy()[:, 0]
        b1_err = max(b1_err, float(np.abs(two - prior.u).max()))

    for _ in range(instances):
        scores, prior = _random_instance(rng, scale=oracle_scale)
        fast = sinkhorn_targets(scores, prior, SinkhornConfig(n_iters=3)).numpy()
        slow = sinkhorn_targets(scores, prior, SinkhornConfig(n_iters=1000)).numpy()
        oracle_tv = max(oracle_tv, _column_tv(fast, slow))
    return [
        Check("sinkhorn.column_sums", col_err <= 1e-6, f"max |colsum-1| {col_err:.1e}"),
        Check("sinkhorn.row_tv_monotone", mono_bad == 0, f"{mono_bad}/{instances} instances increased"),
        Check("sinkhorn.b1_closed_form", closed_err <= 1e-9, f"one-sided max abs err {closed_err:.1e}"),
        Check("sinkhorn.b1_two_sided_prior", b1_err <= 1e-9, f"two-sided B=1 vs u_W {b1_err:.1e}"),
        Check("sinkhorn.oracle_3_vs_1000", oracle_tv <= 1e-3,
              f"max column TV {oracle_tv:.2e} (scores ~ N(0, {oracle_scale}^2), eps 0.005)"),
    ]


# --- rope ---------------------------------------------------------------------


def check_rope(instances: int = 100, seed: int = 0, head_dim: int = 16) -> list[Check]:
    rng = np.random.default_rng(seed)
    shift_err, norm_err, orth_err = 0.0, 0.0, 0.0
    for _ in range(instances):
        rows, cols = (int(v) for v in rng.integers(1, 17, size=2))
        n = rows * cols
        r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
        coords = np.stack([c.reshape(-1), r.reshape(-1)], axis=1).astype(np.float64)
        shift = rng.uniform(-64, 64, size=2)
        q = torch.from_numpy(rng.normal(size=(n, head_dim)))
        k = torch.from_numpy(rng.normal(size=(n, head_dim)))
        logits = rope2d_rotate(q, coords) @ rope2d_rotate(k, coords).T
        moved = rope2d_rotate(q, coords + shift) @ rope2d_rotate(k, coords + shift).T
        shift_err = max(shift_err, float((logits - moved).abs().max()))
        rq = rope2d_rotate(q, coords)
        norm_err = max(norm_err, float((rq.norm(dim=-1) - q.norm(dim=-1)).abs().max()))
        m = implied_matrix(float(coords[-1, 0] + shift[0]), float(coords[-1, 1] + shift[1]), head_dim)
        orth_err = max(orth_err, float((m.T @ m - torch.eye(head_dim, dtype=torch.float64)).abs().max()))

    table = torch.from_numpy(rng.normal(size=(64, 8)))
    identity = torch.equal(interpolate_pos(table, 8, (8, 8)), table)
    small = torch.tensor([[0.0], [1.0], [2.0], [3.0]], dtype=torch.float64)
    hand = torch.tensor([0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0], dtype=torch.float64)[:, None]
    bilinear = torch.equal(interpolate_pos(small, 2, (3, 3)), hand)
    return [
        Check("rope.translation_invariance", shift_err <= 1e-5, f"max logit change {shift_err:.1e}"),
        Check("rope.norm_preservation", norm_err <= 1e-6, f"max norm change {norm_err:.1e}"),
        Check("rope.orthogonality", orth_err <= 1e-12, f"max |R^T R - I| {orth_err:.1e}"),
        Check("rope.interp_identity", identity, "source grid reproduced bit-exactly" if identity else "mismatch"),
        Check("rope.interp_2x2_to_3x3", bilinear, "hand-computed values" if bilinear else "mismatch"),
    ]


# --- freeze -------------------------------------------------------------------


def _param_bytes(model: MultimodalModel, prefix: str) -> dict[str, bytes]:
    return {n: p.detach().cpu().numpy().tobytes() for n, p in model.named_parameters() if n.startswith(prefix + ".")}


def check_freeze(steps: int = 3) -> list[Check]:
    vocab = Vocabulary.default()
    model = toy_model(seed=3, dtype=torch.float32, vocab=vocab)
    data = DataSource(CorpusConfig(seed=5), vocab, model.encoder.cfg.patch_size)
    stage = StageConfig("I", ("adapter",), ResolutionPolicy("fixed", side=56), "learned_only", DEFAULT_ALPHA,
                        lr_adapter=1e-3, lr_vfm=0.0, lr_llm=0.0, num_pairs=4 * steps, batch_size=4)
    before = {p: _param_bytes(model, p) for p in ("encoder", "decoder", "adapter")}
    run_stage(stage, data, model, np.random.default_rng(0), uniform_align(model))
    after = {p: _param_bytes(model, p) for p in ("encoder", "decoder", "adapter")}
    frozen_same = before["encoder"] == after["encoder"] and before["decoder"] == after["decoder"]
    adapter_moved = before["adapter"] != after["adapter"]

    # gradient-stop contract: L_align alone reaches the vision path only
    model64 = toy_model(seed=4)
    batch = random_batch(seed=6)
    parts = model64.losses(batch, uniform_align(model64))
    model64.zero_grad(set_to_none=True)
    parts.l_align.backward()
    dec_zero = all(p.grad is None or not bool(p.grad.any()) for p in model64.decoder.parameters())
    enc_nonzero = any(p.grad is not None and bool(p.grad.any()) for p in model64.encoder.parameters())
    return [
        Check("freeze.stage1_bytes", frozen_same, f"encoder+decoder identical after {steps} stage-I steps"
              if frozen_same else "frozen parameters changed"),
        Check("freeze.stage1_adapter_moves", adapter_moved, "adapter updated" if adapter_moved else "adapter unchanged"),
        Check("freeze.align_stops_at_decoder", dec_zero, "decoder/W grads exactly zero" if dec_zero else "nonzero"),
        Check("freeze.align_reaches_encoder", enc_nonzero, "encoder grads nonzero" if enc_nonzero else "all zero"),
    ]


RUNNERS: dict[str, Callable[[], list[Check]]] = {
    "gradcheck": check_gradcheck,
    "sinkhorn": check_sinkhorn,
    "rope": check_rope,
    "freeze": check_freeze,
}


def run_suites(names) -> list[Check]:
    checks: list[Check] = []
    for name in names:
        checks.extend(RUNNERS[name]())
    return checks
