import numpy as np
import pytest

from visalign.corpus import (
    BACKGROUND,
    PALETTE,
    CorpusConfig,
    SceneObject,
    SceneSpec,
    Vocabulary,
    caption,
    compute_prior,
    dump_corpus,
    generate_pair,
    generate_scene,
    instruction,
    missing_mentions,
    render,
)
from visalign.errors import TokenizerError
from visalign.patcher import ResolutionPolicy, resolve_resolution


def test_same_seed_same_pair():
    a_img, a_txt = generate_pair(42)
    b_img, b_txt = generate_pair(42)
    assert a_txt == b_txt and np.array_equal(a_img.pixels, b_img.pixels)
    assert generate_pair(43)[1] != a_txt or not np.array_equal(generate_pair(43)[0].pixels, a_img.pixels)


def test_captions_close_under_vocabulary(vocab):
    cfg = CorpusConfig(seed=9)
    for i in range(1000):
        vocab.tokenize(cfg.text("train", i))
    for i in range(200):
        vocab.tokenize(cfg.text("instruct", i))


def test_single_red_circle_caption():
    obj = SceneObject("circle", "red", (1, 1), "large", (0.0, 0.0))
    scene = SceneSpec(200, 200, (obj,))
    text = caption(scene)
    assert "red" in text.split() and "circle" in text.split()
    assert text == "a large red circle at the middle center"
    assert missing_mentions(scene, text) == []


def test_render_draws_the_object_color():
    obj = SceneObject("circle", "red", (1, 1), "large", (0.0, 0.0))
    img = render(SceneSpec(300, 300, (obj,))).pixels
    assert img.shape == (3, 300, 300)
    assert np.allclose(img[:, 150, 150], PALETTE["red"])
    assert np.allclose(img[:, 2, 2], BACKGROUND)


@pytest.mark.parametrize("shape", ["circle", "square", "triangle", "bar"])
def test_every_shape_renders_inside_its_cell(shape):
    obj = SceneObject(shape, "blue", (0, 2), "small", (0.0, 0.0))
    img = render(SceneSpec(240, 360, (obj,))).pixels
    drawn = np.argwhere(np.abs(img[2] - BACKGROUND) > 1e-3)
    assert len(drawn) > 0
    assert drawn[:, 0].max() < 80 and drawn[:, 1].min() >= 240


def test_scene_sampling_bounds():
    for s in range(300):
        sc = generate_scene(s)
        assert 112 <= sc.height <= 896 and 112 <= sc.width <= 896
        assert 1 <= len(sc.objects) <= 4
        cells = [o.cell for o in sc.objects]
        assert len(set(cells)) == len(cells)


def test_resolution_diversity_under_budget():
    cfg = CorpusConfig()
    policy = ResolutionPolicy("native", max_visual_tokens=256)
    shapes = {resolve_resolution((s.height, s.width), policy, 14, 2) for s in (cfg.scene("train", i) for i in range(100))}
    assert len(shapes) >= 10


def test_tokenize_examples(vocab):
    assert vocab.tokenize("").ids == [vocab.bos, vocab.eos]
    seq = vocab.tokenize("a red circle")
    assert vocab.detokenize(seq.ids) == "a red circle"
    with pytest.raises(TokenizerError, match="zebra"):
        vocab.tokenize("a zebra")
    with pytest.raises(TokenizerError):
        vocab.tokenize("<bos>")


def test_vocabulary_file_round_trip(tmp_path, vocab):
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    assert Vocabulary.load(path).words == vocab.words


def test_prior_two_word_corpus(vocab):
    u = compute_prior(["red circle"], vocab).u
    red, circle = vocab.index["red"], vocab.index["circle"]
    assert u[red] == u[circle]
    others = np.delete(u, [red, circle])
    assert np.all(others == others[0]) and others[0] < u[red] / 10
    assert abs(u.sum() - 1) < 1e-12


def test_prior_frequencies(vocab):
    u = compute_prior(["red red circle"], vocab).u
    assert abs(u[vocab.index["red"]] / u[vocab.index["circle"]] - 2.0) < 1e-12


def test_instruction_answers_are_correct():
    cfg = CorpusConfig(seed=3)
    for i in range(200):
        sc = cfg.scene("instruct", i)
        q, a = cfg.text("instruct", i).split(" ? ")
        if q.startswith("how many"):
            assert a == ["one", "two", "three", "four"][len(sc.objects) - 1]
        elif q.startswith("what color"):
            shape = q.split()[-1]
            assert [o.color for o in sc.objects if o.shape == shape] == [a]
        else:
            color, shape = q.split()[-2:]
            assert [o.position for o in sc.objects if (o.color, o.shape) == (color, shape)] == [a]


def test_instruction_is_deterministic():
    sc = generate_scene(11)
    assert instruction(sc, 5) == instruction(sc, 5)


def test_splits_are_distinct():
    cfg = CorpusConfig()
    assert cfg.sample_seed("train", 0) != cfg.sample_seed("holdout", 0)
    assert CorpusConfig(seed=1).sample_seed("train", 0) != cfg.sample_seed("train", 0)


def test_dump_corpus(tmp_path):
    dump_corpus(CorpusConfig(), "train", 2, tmp_path)
    raw = (tmp_path / "000000.f32").read_bytes()
    c, h, w = np.frombuffer(raw[:12], dtype="<u4")
    assert c == 3 and len(raw) == 12 + 4 * c * h * w
    assert (tmp_path / "000001.txt").read_text().strip() == CorpusConfig().text("train", 1)
