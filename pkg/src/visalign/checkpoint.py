"""CMPK checkpoint files.

Layout (all integers u32 little-endian):

    "CMPK" | version | meta_len | meta (UTF-8 JSON, sorted keys) | n_records
    per record, sorted by name:
        name_len | name (UTF-8) | dtype (0 = f32, 1 = f64) | rank | extents... | payload (LE)

Model parameters are stored as f32; the alignment prior ``align.prior`` as f64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"CMPK"
VERSION = 1
PRIOR_KEY = "align.prior"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def stage(self) -> str | None:
        return self.meta.get("stage")

    @property
    def prior(self) -> np.ndarray | None:
        return self.tensors.get(PRIOR_KEY)


def to_bytes(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name])
        # itemsize, not dtype equality: a big-endian f8 must stay f8
        dt = np.dtype("<f8") if arr.dtype.kind == "f" and arr.dtype.itemsize == 8 else np.dtype("<f4")
        arr = np.ascontiguousarray(arr, dtype=dt)
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<II{arr.ndim}I", _CODES[dt], arr.ndim, *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def from_bytes(data: bytes, source: str = "<bytes>") -> Checkpoint:
    try:
        if data[:4] != MAGIC:
            raise CheckpointError(f"{source}: bad magic {data[:4]!r}")
        version, meta_len = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise CheckpointError(f"{source}: unsupported version {version}")
        pos = 12
        meta = json.loads(data[pos : pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            code, rank = struct.unpack_from("<II", data, pos)
            pos += 8
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            if code not in _DTYPES:
                raise CheckpointError(f"{source}: record {name!r} has unknown dtype code {code}")
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(data):
                raise CheckpointError(f"{source}: record {name!r} is truncated")
            tensors[name] = np.frombuffer(data, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
            pos += nbytes
        if pos != len(data):
            raise CheckpointError(f"{source}: {len(data) - pos} trailing bytes")
    except CheckpointError:
        raise
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"{source}: corrupt checkpoint ({exc})") from exc
    return Checkpoint(tensors=tensors, meta=meta)


def save(path: str | Path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load(path: str | Path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read ({exc})") from exc
    return from_bytes(data, str(path))


def from_model(model: torch.nn.Module, prior=None, meta: dict | None = None) -> Checkpoint:
    tensors = {name: p.detach().to(torch.float32).cpu().numpy().copy() for name, p in model.named_parameters()}
    if prior is not None:
        tensors[PRIOR_KEY] = np.asarray(prior, dtype=np.float64)
    return Checkpoint(tensors=tensors, meta=dict(meta or {}))


def load_into(model: torch.nn.Module, ckpt: Checkpoint) -> None:
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(ckpt.tensors))
    extra = sorted(set(ckpt.tensors) - set(params) - {PRIOR_KEY})
    if missing or extra:
        raise CheckpointError(f"parameter mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    with torch.no_grad():
        for name, p in params.items():
            arr = ckpt.tensors[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointError(f"{name}: checkpoint shape {arr.shape} != model shape {tuple(p.shape)}")
            p.copy_(torch.from_numpy(np.array(arr, dtype=np.float32)).to(p.dtype))
