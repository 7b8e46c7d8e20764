"""Command-line entry point: ``visalign {train,verify,eval,patches,corpus-dump,default-config}``.

Exit codes: 0 success, 1 failed verification, 2 invalid config or stage order,
3 training aborted on a non-finite value, 4 unreadable checkpoint.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import torch

from . import checkpoint as ckpt_io
from . import config as config_io
from .corpus import CorpusConfig, Vocabulary, dump_corpus, render
from .data import worker_threads
from .errors import CheckpointError, ConfigError, TrainingAborted, VisalignError
from .evaluate import budget_sweep, evaluate, write_csv
from .patcher import ResolutionPolicy, prepare_image, write_patch_grid
from .recipe import STAGE_REQUESTS, build_model, data_source, train
from .verify import SUITES, run_suites

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_NAN, EXIT_CHECKPOINT = 0, 1, 2, 3, 4


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def cmd_train(args) -> int:
    try:
        cfg = config_io.load(args.config)
    except ConfigError as exc:
        _err("config error:")
        for d in exc.diagnostics:
            _err(f"  {d}")
        return EXIT_CONFIG
    resume = None
    if args.resume:
        try:
            resume = ckpt_io.load(args.resume)
        except CheckpointError as exc:
            _err(f"checkpoint error: {exc}")
            return EXIT_CHECKPOINT
    out = Path(args.out or cfg.out_dir)
    try:
        results = train(cfg, args.stage, resume=resume, out_dir=out)
    except ConfigError as exc:
        for d in exc.diagnostics:
            _err(f"error: {d}")
        return EXIT_CONFIG
    except TrainingAborted as exc:
        _err(f"aborted: stage {exc.stage}, step {exc.step}, operation '{exc.cause.op}': {exc.cause}")
        return EXIT_NAN
    for r in results:
        last = r.metrics[-1] if r.metrics else {}
        print(f"stage {r.stage}: {r.steps} steps, final l_dec {last.get('l_dec', float('nan')):.4f} -> {r.path}")
    return EXIT_OK


def cmd_verify(args) -> int:
    names = SUITES if args.suite == "all" else (args.suite,)
    checks = run_suites(names)
    for c in checks:
        print(c.line())
    failed = [c.name for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    if failed:
        _err("failed invariants: " + ", ".join(failed))
        return EXIT_VERIFY
    return EXIT_OK


def _budgets(text: str | None) -> list[int] | None:
    if text is None:
        return None
    return [int(v) for v in text.replace(",", " ").split()]


def cmd_eval(args) -> int:
    try:
        ckpt = ckpt_io.load(args.checkpoint)
    except CheckpointError as exc:
        _err(f"checkpoint error: {exc}")
        return EXIT_CHECKPOINT
    try:
        if args.config:
            cfg = config_io.load(args.config)
        elif "config" in ckpt.meta:
            cfg = config_io.parse(ckpt.meta["config"], f"{args.checkpoint}:meta")
        else:
            cfg = config_io.RunConfig()
    except ConfigError as exc:
        for d in exc.diagnostics:
            _err(f"config error: {d}")
        return EXIT_CONFIG
    vocab = Vocabulary.default()
    model = build_model(cfg, vocab)
    try:
        ckpt_io.load_into(model, ckpt)
    except CheckpointError as exc:
        _err(f"checkpoint error: {exc}")
        return EXIT_CHECKPOINT
    model.set_rotary_mode(cfg.stages[ckpt.stage].rotary_mode if ckpt.stage in cfg.stages else "crope")
    data = data_source(cfg, vocab)
    count = args.count
    exact = not args.no_exact_match
    budgets = _budgets(args.max_visual_tokens)
    if budgets:
        reports = budget_sweep(model, data, budgets, args.split, count, exact)
    else:
        reports = [evaluate(model, data, args.split, count=count, exact_match=exact)]
    print("m,l_dec,perplexity,exact_match")
    for r in reports:
        em = "" if r.exact_match is None else f"{r.exact_match:.4f}"
        print(f"{r.m},{r.l_dec:.6f},{r.perplexity:.6f},{em}")
    if args.csv:
        write_csv(reports, args.csv)
    return EXIT_OK


def cmd_patches(args) -> int:
    cfg = CorpusConfig(seed=args.seed)
    if args.mode == "fixed":
        policy = ResolutionPolicy("fixed", side=args.side, max_visual_tokens=args.max_visual_tokens)
    else:
        policy = ResolutionPolicy("native", max_visual_tokens=args.max_visual_tokens)
    grid = prepare_image(render(cfg.scene(args.split, args.index)), policy, args.patch_size, args.merge)
    write_patch_grid(grid, args.out)
    print(f"{args.out}: {grid.rows}x{grid.cols} patches of {grid.patch_size}px")
    return EXIT_OK


def cmd_corpus_dump(args) -> int:
    dump_corpus(CorpusConfig(seed=args.seed), args.split, args.count, args.out)
    print(f"wrote {args.count} {args.split} pairs to {args.out}")
    return EXIT_OK


def cmd_default_config(args) -> int:
    text = config_io.default_toml()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="visalign", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run recipe stages")
    t.add_argument("config", help="TOML run configuration")
    t.add_argument("--stage", choices=tuple(STAGE_REQUESTS), default="all")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--out", help="output directory (default: run.out_dir)")
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("verify", help="run invariant suites")
    v.add_argument("--suite", choices=SUITES + ("all",), default="all")
    v.set_defaults(func=cmd_verify)

    e = sub.add_parser("eval", help="held-out evaluation of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--config", help="override the configuration stored in the checkpoint")
    e.add_argument("--split", choices=("holdout", "train", "instruct"), default="holdout")
    e.add_argument("--max-visual-tokens", help="budget or comma-separated list of budgets to sweep")
    e.add_argument("--count", type=int, help="number of samples (default: corpus holdout size)")
    e.add_argument("--csv", help="write (m, l_dec, perplexity, exact_match) rows here")
    e.add_argument("--no-exact-match", action="store_true", help="skip greedy decoding")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("patches", help="dump one corpus image as a CPGR patch grid")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split", choices=("train", "holdout", "instruct"), default="train")
    g.add_argument("--index", type=int, default=0)
    g.add_argument("--mode", choices=("fixed", "native"), default="native")
    g.add_argument("--side", type=int, default=224)
    g.add_argument("--max-visual-tokens", type=int)
    g.add_argument("--patch-size", type=int, default=14)
    g.add_argument("--merge", type=int, default=2)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_patches)

    c = sub.add_parser("corpus-dump", help="write rendered pairs for inspection")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--split", choices=("train", "holdout", "instruct"), default="train")
    c.add_argument("--count", type=int, default=8)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_corpus_dump)

    d = sub.add_parser("default-config", help="print the default configuration")
    d.add_argument("--out")
    d.set_defaults(func=cmd_default_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(min(torch.get_num_threads(), worker_threads()))
    try:
        return args.func(args)
    except VisalignError as exc:
        _err(f"error: {exc}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
