import torch

from visalign.encoder import EncoderConfig
from visalign.lm import DecoderConfig
from visalign.verify import gradcheck_model, random_batch, toy_model, uniform_align


def micro_model():
    # small enough to check every parameter entry
    return toy_model(
        seed=5,
        encoder=EncoderConfig(layers=1, width=8, heads=1, patch_size=2, pos_grid=2),
        decoder=DecoderConfig(layers=1, width=8, heads=1, max_positions=64),
    )


def test_gradcheck_every_entry_micro_model():
    model = micro_model()
    batch = random_batch(3, patch_size=2, shapes=((2, 4), (4, 2)))
    err, name, count = gradcheck_model(model, batch, per_tensor=None)
    assert count == sum(p.numel() for p in model.parameters())
    assert err < 1e-4, name


def test_gradcheck_single_sample_toy_model():
    model = toy_model(seed=2)
    batch = random_batch(4, shapes=((2, 2),))
    err, name, _ = gradcheck_model(model, batch, per_tensor=3)
    assert err < 1e-4, name


def test_alignment_gradient_stops_at_decoder():
    model = toy_model(seed=6)
    batch = random_batch(7)
    parts = model.losses(batch, uniform_align(model))
    model.zero_grad(set_to_none=True)
    parts.l_align.backward()
    for n, p in model.decoder.named_parameters():
        assert p.grad is None or not p.grad.any(), n
    assert model.encoder.patch_embed.grad.abs().sum() > 0
    assert model.adapter.fc1.weight.grad.abs().sum() > 0


def test_strict_mode_also_stops_at_adapter():
    model = toy_model(seed=6)
    align = uniform_align(model)
    align.strict = True
    parts = model.losses(random_batch(7), align)
    model.zero_grad(set_to_none=True)
    parts.l_align.backward()
    assert model.adapter.fc1.weight.grad is None or not model.adapter.fc1.weight.grad.any()
    assert model.encoder.patch_embed.grad.abs().sum() > 0


def test_targets_are_columns_of_probabilities():
    model = toy_model(seed=8)
    parts = model.losses(random_batch(9), uniform_align(model))
    assert parts.targets.shape == (model.decoder.cfg.vocab_size, 2)
    assert torch.allclose(parts.targets.sum(dim=0), torch.ones(2, dtype=torch.float64), atol=1e-12)
    assert not parts.targets.requires_grad


def test_decode_loss_at_init_near_uniform():
    model = toy_model(seed=10)
    parts = model.losses(random_batch(11))
    k = model.decoder.cfg.vocab_size
    assert abs(parts.l_dec.item() - torch.log(torch.tensor(float(k))).item()) < 0.1
    assert parts.l_align is None
