"""Run configuration: TOML files with one section per component and per stage.

Unknown sections or keys and ill-typed values are hard errors; every
diagnostic carries the line number of the offending entry.
"""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import tomli
import tomli_w

from .align import TEMPERATURE, SinkhornConfig
from .corpus import CorpusConfig
from .encoder import EncoderConfig
from .errors import ConfigError, VisalignError
from .lm import DecoderConfig
from .patcher import ResolutionPolicy
from .trainer import STAGE_ORDER, StageConfig, default_stages


@dataclass(frozen=True)
class AlignConfig:
    epsilon: float = TEMPERATURE
    temperature: float = TEMPERATURE
    n_iters: int = 3
    mode: str = "two_sided"
    strict: bool = False

    @property
    def sinkhorn(self) -> SinkhornConfig:
        return SinkhornConfig(epsilon=self.epsilon, n_iters=self.n_iters, mode=self.mode)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/toy"
    encoder: EncoderConfig = EncoderConfig()
    decoder: DecoderConfig = DecoderConfig()
    corpus: CorpusConfig = CorpusConfig()
    align: AlignConfig = AlignConfig()
    stages: dict[str, StageConfig] = field(default_factory=default_stages)


# keys accepted per section, with their expected Python types
_ENCODER_KEYS = {"layers": int, "width": int, "heads": int, "patch_size": int, "mlp_ratio": int,
                 "channels": int, "pos_grid": int, "rope_base": float}
_DECODER_KEYS = {"layers": int, "width": int, "heads": int, "max_positions": int, "mlp_ratio": int,
                 "rope_base": float}
_CORPUS_KEYS = {"seed": int, "min_side": int, "max_side": int, "train_pairs": int, "holdout_pairs": int}
_ALIGN_KEYS = {"epsilon": float, "temperature": float, "n_iters": int, "mode": str, "strict": bool}
_RUN_KEYS = {"seed": int, "out_dir": str}
_STAGE_KEYS = {"trainable": list, "resolution": str, "side": int, "max_visual_tokens": int,
               "rotary_mode": str, "alpha": float, "lr_adapter": float, "lr_vfm": float, "lr_llm": float,
               "epochs": int, "batch_size": int, "warmup_ratio": float, "min_lr": float,
               "num_pairs": int, "split": str}
_SECTIONS = {"run": _RUN_KEYS, "encoder": _ENCODER_KEYS, "decoder": _DECODER_KEYS,
             "corpus": _CORPUS_KEYS, "align": _ALIGN_KEYS}

_HEADER = re.compile(r"^\s*\[\s*([^\]]+?)\s*\]\s*(#.*)?$")
_KEY = re.compile(r"^\s*([A-Za-z0-9_\-\"]+)\s*=")


def _line_index(text: str) -> dict[tuple[str, ...], int]:
    """Map (section..., key) and (section...) to 1-based line numbers."""
    index: dict[tuple[str, ...], int] = {}
    section: tuple[str, ...] = ()
    for n, line in enumerate(text.splitlines(), start=1):
        m = _HEADER.match(line)
        if m:
            section = tuple(p.strip().strip('"') for p in m.group(1).split("."))
            index.setdefault(section, n)
            continue
        m = _KEY.match(line)
        if m:
            index.setdefault(section + (m.group(1).strip('"'),), n)
    return index


class _Diagnostics:
    def __init__(self, source: str, lines: dict[tuple[str, ...], int]):
        self.source = source
        self.lines = lines
        self.items: list[str] = []

    def add(self, where: tuple[str, ...], message: str) -> None:
        line = self.lines.get(where) or self.lines.get(where[:-1]) or 0
        self.items.append(f"{self.source}:{line}: [{'.'.join(where)}] {message}")


def _typed(value, kind, where, diag: _Diagnostics):
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if kind is int and isinstance(value, bool):
        diag.add(where, f"expected int, got {value!r}")
        return None
    if not isinstance(value, kind):
        diag.add(where, f"expected {kind.__name__}, got {type(value).__name__} {value!r}")
        return None
    return value


def _section(table, name: tuple[str, ...], keys: dict, diag: _Diagnostics) -> dict:
    if not isinstance(table, dict):
        diag.add(name, "expected a table")
        return {}
    out = {}
    for key, value in table.items():
        where = name + (key,)
        if key not in keys:
            diag.add(where, f"unknown key {key!r}")
            continue
        v = _typed(value, keys[key], where, diag)
        if v is not None:
            out[key] = v
    return out


def _build(cls_default, values: dict, where: tuple[str, ...], diag: _Diagnostics):
    try:
        return replace(cls_default, **values)
    except VisalignError as exc:
        diag.add(where, str(exc))
    except (TypeError, ValueError) as exc:
        diag.add(where, str(exc))
    return cls_default


def _stage(name: str, table, base: StageConfig, diag: _Diagnostics) -> StageConfig:
    where = ("stage", name)
    v = _section(table, where, _STAGE_KEYS, diag)
    if "trainable" in v:
        if not all(isinstance(x, str) for x in v["trainable"]):
            diag.add(where + ("trainable",), "expected a list of strings")
            v.pop("trainable")
        else:
            v["trainable"] = tuple(v["trainable"])
    res = base.resolution
    res_keys = {k: v.pop(k) for k in ("resolution", "side", "max_visual_tokens") if k in v}
    if res_keys:
        mode = res_keys.get("resolution", res.mode)
        if mode not in ("fixed", "native"):
            diag.add(where + ("resolution",), f"unknown resolution mode {mode!r}")
            mode = res.mode
        # switching the mode drops the other mode's setting unless given explicitly
        side = res_keys.get("side", res.side if mode == res.mode else None)
        budget = res_keys.get("max_visual_tokens", res.max_visual_tokens if mode == res.mode else None)
        res = ResolutionPolicy(mode, side=side, max_visual_tokens=budget)
    return _build(base, {**v, "resolution": res}, where, diag)


def parse(text: str, source: str = "<config>") -> RunConfig:
    """Parse and validate a config; raises :class:`ConfigError` with every problem found."""
    lines = _line_index(text)
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError([f"{source}: {exc}"]) from exc
    diag = _Diagnostics(source, lines)
    base = RunConfig()
    parts = {}
    for section, table in data.items():
        if section == "stage":
            continue
        if section not in _SECTIONS:
            diag.add((section,), f"unknown section [{section}]")
            continue
        parts[section] = _section(table, (section,), _SECTIONS[section], diag)

    run = parts.get("run", {})
    encoder = _build(base.encoder, parts.get("encoder", {}), ("encoder",), diag)
    decoder = _build(base.decoder, parts.get("decoder", {}), ("decoder",), diag)
    corpus = _build(base.corpus, parts.get("corpus", {}), ("corpus",), diag)
    align = _build(base.align, parts.get("align", {}), ("align",), diag)
    try:
        align.sinkhorn
    except VisalignError as exc:
        diag.add(("align",), str(exc))

    stages = dict(base.stages)
    stage_tables = data.get("stage", {})
    if not isinstance(stage_tables, dict):
        diag.add(("stage",), "expected [stage.<name>] tables")
        stage_tables = {}
    for name, table in stage_tables.items():
        if name not in STAGE_ORDER:
            diag.add(("stage", name), f"unknown stage {name!r}; expected one of {', '.join(STAGE_ORDER)}")
            continue
        stages[name] = _stage(name, table, stages[name], diag)
    for name, st in stages.items():
        try:
            st.resolution.validate(encoder.patch_size, 2)
        except VisalignError as exc:
            diag.add(("stage", name, "resolution"), str(exc))
        if st.split not in ("train", "instruct"):
            diag.add(("stage", name, "split"), f"training split must be train or instruct, got {st.split!r}")

    if diag.items:
        raise ConfigError(diag.items)
    return RunConfig(
        seed=run.get("seed", base.seed),
        out_dir=run.get("out_dir", base.out_dir),
        encoder=encoder,
        decoder=decoder,
        corpus=corpus,
        align=align,
        stages=stages,
    )


def load(path: str | Path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([f"{p}: cannot read ({exc})"]) from exc
    return parse(text, str(p))


def to_dict(cfg: RunConfig) -> dict:
    def plain(obj, keys):
        d = asdict(obj)
        return {k: d[k] for k in keys}

    out = {
        "run": {"seed": cfg.seed, "out_dir": cfg.out_dir},
        "encoder": plain(cfg.encoder, _ENCODER_KEYS),
        "decoder": plain(cfg.decoder, _DECODER_KEYS),
        "corpus": plain(cfg.corpus, _CORPUS_KEYS),
        "align": plain(cfg.align, _ALIGN_KEYS),
        "stage": {},
    }
    for name in STAGE_ORDER:
        st = cfg.stages[name]
        d = {f.name: getattr(st, f.name) for f in fields(st) if f.name not in ("name", "resolution")}
        d["trainable"] = list(st.trainable)
        d["resolution"] = st.resolution.mode
        if st.resolution.side is not None:
            d["side"] = st.resolution.side
        if st.resolution.max_visual_tokens is not None:
            d["max_visual_tokens"] = st.resolution.max_visual_tokens
        out["stage"][name] = d
    return out


def dumps(cfg: RunConfig) -> str:
    return tomli_w.dumps(to_dict(cfg))


def default_toml() -> str:
    return dumps(RunConfig())
