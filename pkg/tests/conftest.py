import numpy as np
import pytest
import torch
from hypothesis import settings

torch.set_num_threads(1)
settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def vocab():
    from visalign.corpus import Vocabulary

    return Vocabulary.default()


def tiny_config(**stage_overrides):
    """A RunConfig small enough for unit tests: 1-layer models, a few steps per stage."""
    from dataclasses import replace

    from visalign.config import RunConfig
    from visalign.corpus import CorpusConfig
    from visalign.encoder import EncoderConfig
    from visalign.lm import DecoderConfig
    from visalign.patcher import ResolutionPolicy

    base = RunConfig(
        seed=7,
        encoder=EncoderConfig(layers=1, width=16, heads=2, pos_grid=4),
        decoder=DecoderConfig(layers=1, width=16, heads=2, max_positions=128),
        corpus=CorpusConfig(seed=1, min_side=28, max_side=120, train_pairs=16, holdout_pairs=8),
    )
    stages = {}
    for name, st in base.stages.items():
        res = ResolutionPolicy("fixed", side=56) if st.resolution.mode == "fixed" else ResolutionPolicy("native", max_visual_tokens=36)
        stages[name] = replace(st, resolution=res, num_pairs=8, batch_size=4, **stage_overrides)
    return replace(base, stages=stages)


@pytest.fixture
def tiny():
    return tiny_config()


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import LINES
    except ImportError:
        return
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
