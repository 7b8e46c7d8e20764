"""Variable-resolution images to patch sequences."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .errors import ContractError, ParameterError

PIXEL_MEAN = 0.5
PIXEL_STD = 0.5

CPGR_MAGIC = b"CPGR"
CPGR_VERSION = 1


@dataclass
class ImageSpec:
    """Channel-first float image with values in [0, 1]."""

    pixels: np.ndarray  # (C, H, W) float32

    def __post_init__(self):
        if self.pixels.ndim != 3:
            raise ContractError(f"image pixels must be (C, H, W), got shape {self.pixels.shape}")

    @property
    def channels(self) -> int:
        return self.pixels.shape[0]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]


@dataclass
class PatchGrid:
    rows: int
    cols: int
    patch_size: int
    channels: int
    patches: np.ndarray  # (N, C*P*P)
    coords: np.ndarray = field(default=None)  # (N, 2) integer (row, col), row-major

    def __post_init__(self):
        if self.coords is None:
            self.coords = grid_coords(self.rows, self.cols)
        if self.patches.shape != (self.rows * self.cols, self.channels * self.patch_size**2):
            raise ContractError(
                f"patch tensor {self.patches.shape} inconsistent with "
                f"{self.rows}x{self.cols} grid, P={self.patch_size}, C={self.channels}"
            )

    @property
    def n(self) -> int:
        return self.rows * self.cols

    @property
    def height(self) -> int:
        return self.rows * self.patch_size

    @property
    def width(self) -> int:
        return self.cols * self.patch_size


@dataclass(frozen=True)
class ResolutionPolicy:
    mode: Literal["fixed", "native"] = "native"
    side: int | None = None
    max_visual_tokens: int | None = None

    def validate(self, patch_size: int, merge: int = 1) -> None:
        unit = patch_size * merge
        if self.mode not in ("fixed", "native"):
            raise ParameterError(f"unknown resolution mode {self.mode!r}")
        if self.mode == "fixed":
            if self.side is None or self.side < unit or self.side % unit:
                raise ParameterError(f"fixed side {self.side} must be a positive multiple of {unit}")
        if self.max_visual_tokens is not None and self.max_visual_tokens < merge * merge:
            raise ParameterError(
                f"max_visual_tokens={self.max_visual_tokens} is below the minimum grid of {merge}x{merge}"
            )


def grid_coords(rows: int, cols: int) -> np.ndarray:
    r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    return np.stack([r.reshape(-1), c.reshape(-1)], axis=1).astype(np.int64)


def _round_to_unit(x: int, unit: int) -> int:
    # nearest multiple, ties up
    return max(unit, int(math.floor(x / unit + 0.5)) * unit)


def resolve_resolution(
    native: tuple[int, int], policy: ResolutionPolicy, patch_size: int, merge: int = 1
) -> tuple[int, int]:
    """Target (H, W) for an image of native size ``native`` under ``policy``.

    Dimensions are snapped to multiples of ``patch_size * merge`` so that a
    ``merge x merge`` adapter always sees an even grid.
    """
    h, w = native
    if h < 1 or w < 1:
        raise ParameterError(f"image dimensions must be positive, got {native}")
    if patch_size < 1 or merge < 1:
        raise ParameterError(f"patch size and merge must be positive, got {patch_size}, {merge}")
    policy.validate(patch_size, merge)
    unit = patch_size * merge
    if policy.mode == "fixed":
        h2 = w2 = policy.side
    else:
        h2, w2 = _round_to_unit(h, unit), _round_to_unit(w, unit)

    budget = policy.max_visual_tokens
    if budget is not None and (h2 // patch_size) * (w2 // patch_size) > budget:
        s = math.sqrt(budget * patch_size**2 / (h2 * w2))
        ru = max(1, int(math.floor(h2 * s / unit + 1e-9)))
        cu = max(1, int(math.floor(w2 * s / unit + 1e-9)))
        per_unit = merge * merge
        # min-clamping on extreme aspect ratios can still overshoot
        while ru * cu * per_unit > budget:
            if ru >= cu:
                ru -= 1
            else:
                cu -= 1
        h2, w2 = ru * unit, cu * unit
    return h2, w2


def _resize_axis(a: np.ndarray, size: int, axis: int) -> np.ndarray:
    n = a.shape[axis]
    if n == size:
        return a
    if size == 1:
        src = np.zeros(1)
    else:
        src = np.arange(size, dtype=np.float64) * ((n - 1) / (size - 1))
    i0 = np.clip(np.floor(src).astype(np.int64), 0, n - 1)
    i1 = np.minimum(i0 + 1, n - 1)
    wgt = (src - i0).astype(a.dtype)
    shape = [1] * a.ndim
    shape[axis] = size
    wgt = wgt.reshape(shape)
    a0 = np.take(a, i0, axis=axis)
    a1 = np.take(a, i1, axis=axis)
    return a0 + wgt * (a1 - a0)


def resize_bilinear(image: ImageSpec, size: tuple[int, int]) -> ImageSpec:
    """Separable bilinear resampling with corner pixel centers aligned."""
    h, w = size
    if h < 1 or w < 1:
        raise ParameterError(f"target size must be positive, got {size}")
    px = _resize_axis(image.pixels, h, axis=1)
    px = _resize_axis(px, w, axis=2)
    return ImageSpec(np.ascontiguousarray(px, dtype=image.pixels.dtype))


def normalize_pixels(pixels: np.ndarray) -> np.ndarray:
    return ((pixels - PIXEL_MEAN) / PIXEL_STD).astype(np.float32)


def patchify(image: ImageSpec, patch_size: int) -> PatchGrid:
    c, h, w = image.pixels.shape
    p = patch_size
    if h % p or w % p:
        raise ContractError(
            f"image {h}x{w} is not a multiple of patch size {p}; resolve the resolution first"
        )
    rows, cols = h // p, w // p
    x = image.pixels.reshape(c, rows, p, cols, p).transpose(1, 3, 0, 2, 4)
    patches = np.ascontiguousarray(x.reshape(rows * cols, c * p * p))
    return PatchGrid(rows=rows, cols=cols, patch_size=p, channels=c, patches=patches)


def unpatchify(grid: PatchGrid) -> ImageSpec:
    p, c = grid.patch_size, grid.channels
    x = grid.patches.reshape(grid.rows, grid.cols, c, p, p).transpose(2, 0, 3, 1, 4)
    return ImageSpec(np.ascontiguousarray(x.reshape(c, grid.rows * p, grid.cols * p)))


def prepare_image(
    image: ImageSpec, policy: ResolutionPolicy, patch_size: int, merge: int = 1
) -> PatchGrid:
    """resolve -> resize -> normalize -> patchify."""
    size = resolve_resolution((image.height, image.width), policy, patch_size, merge)
    resized = resize_bilinear(image, size)
    return patchify(ImageSpec(normalize_pixels(resized.pixels)), patch_size)


def write_patch_grid(grid: PatchGrid, path: str | Path) -> None:
    """Dump ``grid`` as CPGR: magic, u32 version, u32 rows/cols/P/C, f32 LE payload."""
    header = CPGR_MAGIC + struct.pack("<5I", CPGR_VERSION, grid.rows, grid.cols, grid.patch_size, grid.channels)
    payload = np.asarray(grid.patches, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_patch_grid(path: str | Path) -> PatchGrid:
    data = Path(path).read_bytes()
    if len(data) < 24 or data[:4] != CPGR_MAGIC:
        raise ContractError(f"{path}: not a CPGR file")
    version, rows, cols, p, c = struct.unpack_from("<5I", data, 4)
    if version != CPGR_VERSION:
        raise ContractError(f"{path}: unsupported CPGR version {version}")
    n = rows * cols * c * p * p
    if len(data) != 24 + 4 * n:
        raise ContractError(f"{path}: payload length {len(data) - 24} != {4 * n}")
    patches = np.frombuffer(data, dtype="<f4", offset=24).astype(np.float32).reshape(rows * cols, c * p * p)
    return PatchGrid(rows=rows, cols=cols, patch_size=p, channels=c, patches=patches)
