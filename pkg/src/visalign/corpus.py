"""Deterministic synthetic image-caption corpus.

Every pair is a pure function of a 64-bit seed: the seed fixes the canvas size
and 1-4 objects placed in distinct cells of a 3x3 layout; the caption is a
template over the same scene description, so it is true by construction.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .align import PriorMarginal
from .errors import ContractError, TokenizerError
from .lm import TokenSequence
from .patcher import ImageSpec

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
SPECIALS = (PAD, BOS, EOS)

SHAPES = ("circle", "square", "triangle", "bar")
PALETTE = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.75, 0.20),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.90, 0.10),
    "purple": (0.60, 0.15, 0.75),
    "orange": (1.00, 0.55, 0.05),
    "cyan": (0.10, 0.85, 0.90),
    "white": (1.00, 1.00, 1.00),
}
COLORS = tuple(PALETTE)
SIZES = ("small", "large")
ROW_WORDS = ("top", "middle", "bottom")
COL_WORDS = ("left", "center", "right")
NUMBERS = ("one", "two", "three", "four")
FUNCTION_WORDS = ("a", "the", "and", "at", "is", "what", "color", "where", "how", "many", "objects", "are", "there", "?")

BACKGROUND = 0.5
SPLITS = {"train": 0, "holdout": 1, "instruct": 2}


def default_words() -> list[str]:
    return [*SPECIALS, *FUNCTION_WORDS, *SIZES, *COLORS, *SHAPES, *ROW_WORDS, *COL_WORDS, *NUMBERS]


class Vocabulary:
    def __init__(self, words: Iterable[str]):
        self.words = list(words)
        if len(set(self.words)) != len(self.words):
            raise ContractError("vocabulary contains duplicate words")
        for s in SPECIALS:
            if s not in self.words:
                raise ContractError(f"vocabulary is missing special token {s!r}")
        self.index = {w: i for i, w in enumerate(self.words)}

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls(default_words())

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        return cls([ln for ln in text.split("\n") if ln])

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.words) + "\n", encoding="utf-8")

    def __len__(self) -> int:
        return len(self.words)

    @property
    def bos(self) -> int:
        return self.index[BOS]

    @property
    def eos(self) -> int:
        return self.index[EOS]

    @property
    def pad(self) -> int:
        return self.index[PAD]

    def tokenize(self, text: str) -> TokenSequence:
        ids = [self.bos]
        for w in text.split():
            if w not in self.index or w in SPECIALS:
                raise TokenizerError(w)
            ids.append(self.index[w])
        ids.append(self.eos)
        return TokenSequence(ids)

    def detokenize(self, ids: Iterable[int]) -> str:
        specials = {self.index[s] for s in SPECIALS}
        return " ".join(self.words[i] for i in ids if i not in specials)


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cell: tuple[int, int]  # (row, col) in the 3x3 layout
    size: str
    jitter: tuple[float, float]  # centre offset as a fraction of the cell, in [-1, 1]

    @property
    def position(self) -> str:
        return f"{ROW_WORDS[self.cell[0]]} {COL_WORDS[self.cell[1]]}"

    @property
    def phrase(self) -> str:
        return f"a {self.size} {self.color} {self.shape} at the {self.position}"


@dataclass(frozen=True)
class SceneSpec:
    height: int
    width: int
    objects: tuple[SceneObject, ...]


def sample_side(rng: np.random.Generator, lo: int, hi: int) -> int:
    return int(round(math.exp(rng.uniform(math.log(lo), math.log(hi)))))


def generate_scene(seed: int, min_side: int = 112, max_side: int = 896) -> SceneSpec:
    rng = np.random.default_rng(seed)
    h = sample_side(rng, min_side, max_side)
    w = sample_side(rng, min_side, max_side)
    n = int(rng.integers(1, 5))
    cells = sorted(rng.choice(9, size=n, replace=False).tolist())
    objs = []
    for cell in cells:
        objs.append(
            SceneObject(
                shape=SHAPES[int(rng.integers(len(SHAPES)))],
                color=COLORS[int(rng.integers(len(COLORS)))],
                cell=(cell // 3, cell % 3),
                size=SIZES[int(rng.integers(len(SIZES)))],
                jitter=(float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1))),
            )
        )
    return SceneSpec(height=h, width=w, objects=tuple(objs))


def caption(scene: SceneSpec) -> str:
    return " and ".join(o.phrase for o in scene.objects)


def instruction(scene: SceneSpec, seed: int) -> str:
    """Question-answer text about ``scene``; the answer follows the '?' token."""
    rng = np.random.default_rng([seed, 7])
    shape_counts = Counter(o.shape for o in scene.objects)
    pair_counts = Counter((o.color, o.shape) for o in scene.objects)
    options = ["count"]
    unique_shapes = [o for o in scene.objects if shape_counts[o.shape] == 1]
    unique_pairs = [o for o in scene.objects if pair_counts[(o.color, o.shape)] == 1]
    if unique_shapes:
        options.append("color")
    if unique_pairs:
        options.append("where")
    kind = options[int(rng.integers(len(options)))]
    if kind == "color":
        o = unique_shapes[int(rng.integers(len(unique_shapes)))]
        return f"what color is the {o.shape} ? {o.color}"
    if kind == "where":
        o = unique_pairs[int(rng.integers(len(unique_pairs)))]
        return f"where is the {o.color} {o.shape} ? {o.position}"
    return f"how many objects are there ? {NUMBERS[len(scene.objects) - 1]}"


def missing_mentions(scene: SceneSpec, text: str) -> list[str]:
    """Scene attributes (from the SceneSpec, not pixels) that ``text`` fails to state."""
    return [o.phrase for o in scene.objects if o.phrase not in text]


def _object_geometry(scene: SceneSpec, o: SceneObject) -> tuple[float, float, float]:
    ch, cw = scene.height / 3, scene.width / 3
    r = (0.38 if o.size == "large" else 0.2) * min(ch, cw)
    slack_y = max(0.0, ch / 2 - r) * 0.8
    slack_x = max(0.0, cw / 2 - r) * 0.8
    cy = (o.cell[0] + 0.5) * ch + o.jitter[0] * slack_y
    cx = (o.cell[1] + 0.5) * cw + o.jitter[1] * slack_x
    return cy, cx, r


def _signed_distance(shape: str, dy: np.ndarray, dx: np.ndarray, r: float) -> np.ndarray:
    if shape == "circle":
        return np.sqrt(dx * dx + dy * dy) - r
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) - 0.85 * r
    if shape == "bar":
        return np.maximum(np.abs(dx) - 0.35 * r, np.abs(dy) - r)
    # upward triangle: apex (0, -r), base corners (+-0.95r, 0.75r)
    base = dy - 0.75 * r
    ex, ey = 0.95 * r, 1.75 * r
    norm = math.hypot(ex, ey)
    left = (-ey * dx - ex * (dy + r)) / norm
    right = (ey * dx - ex * (dy + r)) / norm
    return np.maximum(base, np.maximum(left, right))


def render(scene: SceneSpec) -> ImageSpec:
    """Rasterise ``scene`` with one-pixel analytic anti-aliasing."""
    h, w = scene.height, scene.width
    img = np.full((3, h, w), BACKGROUND, dtype=np.float32)
    for o in scene.objects:
        cy, cx, r = _object_geometry(scene, o)
        y0, y1 = max(0, int(cy - r - 2)), min(h, int(cy + r + 3))
        x0, x1 = max(0, int(cx - r - 2)), min(w, int(cx + r + 3))
        if y0 >= y1 or x0 >= x1:
            continue
        dy = (np.arange(y0, y1, dtype=np.float32) + 0.5 - cy)[:, None]
        dx = (np.arange(x0, x1, dtype=np.float32) + 0.5 - cx)[None, :]
        alpha = np.clip(0.5 - _signed_distance(o.shape, dy, dx, r), 0.0, 1.0).astype(np.float32)
        for ch, v in enumerate(PALETTE[o.color]):
            patch = img[ch, y0:y1, x0:x1]
            img[ch, y0:y1, x0:x1] = patch + alpha * (np.float32(v) - patch)
    return ImageSpec(img)


def generate_pair(seed: int, min_side: int = 112, max_side: int = 896) -> tuple[ImageSpec, str]:
    scene = generate_scene(seed, min_side, max_side)
    return render(scene), caption(scene)


@dataclass(frozen=True)
class CorpusConfig:
    seed: int = 0
    min_side: int = 112
    max_side: int = 896
    train_pairs: int = 4000
    holdout_pairs: int = 128

    def sample_seed(self, split: str, index: int) -> int:
        words = np.random.SeedSequence([self.seed, SPLITS[split], index]).generate_state(2, np.uint32)
        return int(words[0]) << 32 | int(words[1])

    def scene(self, split: str, index: int) -> SceneSpec:
        return generate_scene(self.sample_seed(split, index), self.min_side, self.max_side)

    def text(self, split: str, index: int) -> str:
        scene = self.scene(split, index)
        if split == "instruct":
            return instruction(scene, self.sample_seed(split, index))
        return caption(scene)


def compute_prior(captions: Iterable[str], vocab: Vocabulary) -> PriorMarginal:
    """Word-frequency prior over the vocabulary, specials excluded, unseen words floored."""
    counts = np.zeros(len(vocab), dtype=np.float64)
    n = 0
    for text in captions:
        n += 1
        for w in text.split():
            if w not in vocab.index:
                raise TokenizerError(w)
            if w not in SPECIALS:
                counts[vocab.index[w]] += 1
    if n == 0:
        raise ContractError("prior needs at least one caption")
    return PriorMarginal.from_counts(counts)


def dump_corpus(cfg: CorpusConfig, split: str, count: int, out_dir: str | Path) -> None:
    """Debug dump: ``<i>.f32`` (u32 C,H,W header + f32 LE pixels) and ``<i>.txt`` per pair."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        scene = cfg.scene(split, i)
        img = render(scene).pixels
        header = np.asarray(img.shape, dtype="<u4").tobytes()
        (out / f"{i:06d}.f32").write_bytes(header + img.astype("<f4").tobytes())
        (out / f"{i:06d}.txt").write_text(cfg.text(split, i) + "\n", encoding="utf-8")
