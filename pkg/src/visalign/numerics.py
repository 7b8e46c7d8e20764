"""Dense-tensor substrate.

Reverse-mode differentiation is delegated to torch autograd; every op here
adds the shape contracts and the non-finite guard on top of it. The finite
difference routines at the bottom are the independent oracle used by the
gradient checks and never touch autograd.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import torch
import torch.nn.functional as F

from .errors import ContractError, DimensionError, NumericalError, ParameterError

Tensor = torch.Tensor

LN_EPS = 1e-6


def check_finite(x: Tensor, op: str) -> Tensor:
    # the sum is a cheap screen; only a non-finite sum triggers the full scan
    if not torch.isfinite(x.detach().sum()) and not torch.isfinite(x).all():
        bad = int((~torch.isfinite(x)).sum())
        raise NumericalError(op, f"{bad} of {x.numel()} entries are NaN/Inf, shape {tuple(x.shape)}")
    return x


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 1 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    return check_finite(a @ b, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    if x.shape[-1] != weight.shape[-1]:
        raise DimensionError(f"linear: input {tuple(x.shape)} vs weight {tuple(weight.shape)}")
    out = x @ weight.transpose(0, 1)
    if bias is not None:
        out = out + bias
    return check_finite(out, "linear")


def add(a: Tensor, b: Tensor) -> Tensor:
    return check_finite(a + b, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    return check_finite(a * b, "mul")


def exp(x: Tensor) -> Tensor:
    return check_finite(torch.exp(x), "exp")


def log(x: Tensor) -> Tensor:
    return check_finite(torch.log(x), "log")


def gelu(x: Tensor) -> Tensor:
    # exact erf form
    return check_finite(F.gelu(x), "gelu")


def sum(x: Tensor, axis: int | None = None, keepdim: bool = False) -> Tensor:  # noqa: A001
    out = x.sum() if axis is None else x.sum(dim=axis, keepdim=keepdim)
    return check_finite(out, "sum")


def mean(x: Tensor, axis: int | None = None, keepdim: bool = False) -> Tensor:
    if x.numel() == 0:
        raise ContractError("mean of an empty tensor")
    out = x.mean() if axis is None else x.mean(dim=axis, keepdim=keepdim)
    return check_finite(out, "mean")


def _check_temperature(temperature: float) -> None:
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")


def softmax(x: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    """Max-subtracted softmax of ``x / temperature`` along ``axis``.

    ``-inf`` entries (masked positions) get exactly zero probability.
    """
    _check_temperature(temperature)
    s = x if temperature == 1.0 else x / temperature
    # torch's kernel subtracts the running max internally
    return check_finite(torch.softmax(s, dim=axis), "softmax")


def log_softmax(x: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    _check_temperature(temperature)
    s = x if temperature == 1.0 else x / temperature
    return check_finite(torch.log_softmax(s, dim=axis), "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise DimensionError(
            f"layer_norm: gain {tuple(gain.shape)} / bias {tuple(bias.shape)} vs input {tuple(x.shape)}"
        )
    # biased variance, eps inside the square root
    out = F.layer_norm(x, x.shape[-1:], gain, bias, eps)
    return check_finite(out, "layer_norm")


def detach(x: Tensor) -> Tensor:
    """Same values, no gradient path upstream."""
    return x.detach()


def embedding(table: Tensor, ids: Tensor) -> Tensor:
    if ids.dtype not in (torch.int64, torch.int32):
        raise ContractError(f"embedding ids must be integer, got {ids.dtype}")
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise DimensionError(f"embedding: ids out of range for table {tuple(table.shape)}")
    return table[ids]


def soft_cross_entropy(
    logits: Tensor, target_probs: Tensor, axis: int = -1, temperature: float = 1.0
) -> Tensor:
    """``-sum(target * log_softmax(logits / T))`` along ``axis``, per slice."""
    if logits.shape != target_probs.shape:
        raise DimensionError(
            f"soft_cross_entropy: logits {tuple(logits.shape)} vs targets {tuple(target_probs.shape)}"
        )
    lp = log_softmax(logits, axis=axis, temperature=temperature)
    return check_finite(-(target_probs * lp).sum(dim=axis), "soft_cross_entropy")


# --- finite-difference oracle -------------------------------------------------


def _scalar(value) -> float:
    if isinstance(value, torch.Tensor):
        if value.numel() != 1:
            raise ContractError(f"finite differences need a scalar function, got shape {tuple(value.shape)}")
        return float(value.item())
    return float(value)


def finite_difference_grad(f: Callable[[Tensor], object], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``, one element at a time."""
    base = x.detach().clone()
    grad = torch.zeros_like(base)
    flat = base.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + h
            fp = _scalar(f(base.clone()))
            flat[i] = orig - h
            fm = _scalar(f(base.clone()))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return grad


def finite_difference_inplace(
    f: Callable[[], object], target: Tensor, indices: Iterable[int], h: float = 1e-5
) -> list[float]:
    """Central differences of ``f()`` w.r.t. selected flat entries of ``target``.

    ``target`` (typically a parameter) is perturbed in place and restored.
    """
    out = []
    with torch.no_grad():
        flat = target.data.view(-1)
        for i in indices:
            orig = flat[i].clone()
            flat[i] = orig + h
            fp = _scalar(f())
            flat[i] = orig - h
            fm = _scalar(f())
            flat[i] = orig
            out.append((fp - fm) / (2 * h))
    return out


def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``.

    ``floor`` keeps near-zero gradients from being judged on roundoff alone.
    """
    a = torch.as_tensor(analytic, dtype=torch.float64).reshape(-1)
    n = torch.as_tensor(numeric, dtype=torch.float64).reshape(-1)
    if a.shape != n.shape:
        raise DimensionError(f"relative_error: {tuple(a.shape)} vs {tuple(n.shape)}")
    if a.numel() == 0:
        return 0.0
    denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(a, floor))
    return float(((a - n).abs() / denom).max())


def sample_indices(numel: int, k: int, gen: torch.Generator) -> Sequence[int]:
    if numel <= k:
        return list(range(numel))
    return sorted(torch.randperm(numel, generator=gen)[:k].tolist())
