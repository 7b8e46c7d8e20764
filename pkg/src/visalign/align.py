"""Vision-language alignment through frozen word-embedding prototypes.

Text features are scored against the decoder's word embeddings and turned
into soft targets with prior-weighted Sinkhorn-Knopp; the loss is the cross
entropy from those targets to a sharp softmax over the vision-side scores.
Only the vision path receives gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
import torch
from scipy.special import logsumexp

from . import numerics as nx
from .errors import ContractError, DimensionError, NumericalError, ParameterError

TEMPERATURE = 0.005
PRIOR_FLOOR = 0.1  # unseen words get PRIOR_FLOOR / K before renormalisation


@dataclass(frozen=True)
class SinkhornConfig:
    epsilon: float = TEMPERATURE
    n_iters: int = 3
    tol: float = 1e-6
    mode: Literal["two_sided", "one_sided"] = "two_sided"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ParameterError(f"Sinkhorn epsilon must be positive, got {self.epsilon}")
        if self.n_iters < 1:
            raise ParameterError(f"Sinkhorn needs at least one iteration, got {self.n_iters}")
        if self.mode not in ("two_sided", "one_sided"):
            raise ParameterError(f"unknown Sinkhorn mode {self.mode!r}")


@dataclass
class PriorMarginal:
    u: np.ndarray  # (K,) float64, sums to 1

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        if self.u.ndim != 1 or (self.u < 0).any():
            raise ContractError("prior must be a nonnegative vector")
        if abs(self.u.sum() - 1.0) > 1e-9:
            raise ContractError(f"prior sums to {self.u.sum()!r}, expected 1")

    @classmethod
    def from_counts(cls, counts, floor: float = PRIOR_FLOOR) -> "PriorMarginal":
        counts = np.asarray(counts, dtype=np.float64)
        k = counts.size
        total = counts.sum()
        u = counts / total if total > 0 else np.zeros(k)
        u = np.where(counts > 0, u, floor / k)
        return cls(u / u.sum())

    @classmethod
    def uniform(cls, k: int) -> "PriorMarginal":
        return cls(np.full(k, 1.0 / k))

    @property
    def K(self) -> int:
        return self.u.size


def pool(features: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
    """Mean over the token axis; ``features`` is (n, D) or masked (B, n, D)."""
    if features.dim() == 2:
        if features.shape[0] < 1:
            raise ContractError("cannot pool zero tokens")
        return nx.mean(features, axis=0)
    if valid is None:
        return nx.mean(features, axis=1)
    counts = valid.sum(dim=1, keepdim=True)
    if (counts == 0).any():
        raise ContractError("cannot pool a sample with zero tokens")
    w = valid.to(features.dtype)[..., None]
    return nx.check_finite((features * w).sum(dim=1) / counts.to(features.dtype), "pool")


def project_prototypes(features: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
    """C = W^T F^T with shape (K, B); W is detached so only F gets gradient."""
    if features.shape[-1] != prototypes.shape[0]:
        raise ContractError(
            f"features {tuple(features.shape)} incompatible with prototypes {tuple(prototypes.shape)}"
        )
    return nx.matmul(nx.detach(prototypes).transpose(0, 1), features.transpose(0, 1))


def _tv_rows(m: np.ndarray, u: np.ndarray) -> float:
    r = m.sum(axis=1)
    return 0.5 * float(np.abs(r / r.sum() - u).sum())


def sinkhorn_targets(
    scores, prior: PriorMarginal, cfg: SinkhornConfig = SinkhornConfig(), trace: list | None = None
) -> torch.Tensor:
    """Soft per-sample targets (K, B) from text-side prototype scores.

    Runs in float64 on detached values; columns of the result sum to 1.
    Two-sided mode alternates row scaling to the prior and column scaling to
    1/B for ``n_iters`` rounds. One-sided mode only rescales columns of
    ``diag(u) exp(C / eps)``. When ``trace`` is a list it receives the row-sum
    total-variation distance to the prior after every round.
    """
    c = torch.as_tensor(scores).detach().to(torch.float64).cpu().numpy()
    if c.ndim != 2:
        raise DimensionError(f"scores must be (K, B), got shape {c.shape}")
    k, b = c.shape
    if k != prior.K:
        raise DimensionError(f"scores have K={k} rows but the prior has {prior.K}")
    if not np.isfinite(c).all():
        raise NumericalError("sinkhorn_targets", "text-side scores are not finite")
    u = prior.u
    log_u = np.log(u)
    # log domain: exp(C / eps) overflows f64 once scores exceed ~3.5; a per-column
    # shift is avoided on purpose since it would change the truncated iteration
    lm = c / cfg.epsilon
    if cfg.mode == "one_sided":
        lm = lm + log_u[:, None]
    else:
        for _ in range(cfg.n_iters):
            lm += (log_u - logsumexp(lm, axis=1))[:, None]
            lm += -np.log(b) - logsumexp(lm, axis=0)[None, :]
            if trace is not None:
                trace.append(_tv_rows(np.exp(lm), u))
    p = np.exp(lm - logsumexp(lm, axis=0)[None, :])
    if not np.isfinite(p).all() or (p.sum(axis=0) <= 0).any():
        raise NumericalError("sinkhorn_targets", "column normalisation produced non-finite mass")
    return torch.from_numpy(p)


def alignment_loss(
    vision_scores: torch.Tensor, targets: torch.Tensor, temperature: float = TEMPERATURE, tol: float = 1e-6
) -> torch.Tensor:
    """-(1/B) sum_b sum_k p_t[k, b] log softmax(C_v[:, b] / temperature)[k]."""
    if vision_scores.shape != targets.shape:
        raise DimensionError(f"scores {tuple(vision_scores.shape)} vs targets {tuple(targets.shape)}")
    t = targets.detach().to(vision_scores.dtype)
    colsum = t.sum(dim=0)
    if (colsum - 1).abs().max() > tol:
        raise ContractError(f"target columns must sum to 1, worst deviation {float((colsum - 1).abs().max()):.3g}")
    ce = nx.soft_cross_entropy(vision_scores, t, axis=0, temperature=temperature)
    return nx.mean(ce)


def column_entropy(p: torch.Tensor) -> torch.Tensor:
    """Mean over columns of the Shannon entropy of each column of ``p``."""
    p = p.to(torch.float64)
    terms = torch.where(p > 0, -p * torch.log(p.clamp_min(1e-300)), torch.zeros_like(p))
    return terms.sum(dim=0).mean()
