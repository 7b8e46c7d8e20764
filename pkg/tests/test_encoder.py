import numpy as np
import pytest
import torch

from visalign import numerics as nx
from visalign.crope import rotation_angles
from visalign.encoder import EncoderConfig, VisionEncoder, encode
from visalign.errors import ContractError, ParameterError
from visalign.layers import Attention, FeedForward
from visalign.patcher import ImageSpec, PatchGrid, ResolutionPolicy, patchify


def make_encoder(seed=0, dtype=torch.float64, **kw):
    enc = VisionEncoder(EncoderConfig(**kw))
    enc.reset_parameters(torch.Generator().manual_seed(seed))
    return enc.to(dtype)


def grid(rows, cols, p=14, seed=0):
    px = np.random.default_rng(seed).random((3, rows * p, cols * p), dtype=np.float32)
    return patchify(ImageSpec(px), p)


def test_config_validation():
    with pytest.raises(ParameterError):
        EncoderConfig(width=30, heads=4)
    with pytest.raises(ParameterError):
        EncoderConfig(width=24, heads=4)  # head dim 6 cannot split into x/y pairs


def test_toy_shape_law():
    enc = make_encoder(layers=2, width=32, heads=4)
    img = ImageSpec(np.zeros((3, 28, 28), dtype=np.float32))
    feats = encode(enc, img, ResolutionPolicy("native"))
    assert feats.z.shape == (1, 4, 32)


def test_zero_image_zero_table_gives_zero_embedding():
    enc = make_encoder()
    with torch.no_grad():
        enc.pos.table.zero_()
    g = PatchGrid(2, 3, 14, 3, np.zeros((6, 588), dtype=np.float32))
    assert torch.equal(enc.embed(g), torch.zeros(6, 64, dtype=torch.float64))


def test_single_patch_at_source_size():
    enc = make_encoder(pos_grid=1)
    g = grid(1, 1)
    x = torch.as_tensor(g.patches, dtype=torch.float64)
    assert torch.equal(enc.embed(g), x @ enc.patch_embed + enc.pos.table[0])


def test_embed_width_mismatch():
    enc = make_encoder()
    with pytest.raises(ContractError):
        enc.embed(grid(1, 1, p=7))


def test_rope2d_only_skips_table():
    enc = make_encoder()
    enc.rotary_mode = "rope2d_only"
    g = grid(2, 2)
    assert torch.equal(enc.embed(g), torch.as_tensor(g.patches, dtype=torch.float64) @ enc.patch_embed)


def test_attention_with_zero_projections_is_identity():
    att = Attention(16, 2).double()
    with torch.no_grad():
        for lin in (att.q, att.k, att.v, att.o):
            lin.weight.zero_()
            lin.bias.zero_()
    z = torch.randn(1, 4, 16, dtype=torch.float64)
    angles = rotation_angles(torch.arange(4.0), torch.zeros(4), 8)[None, None]
    assert torch.equal(att(z, angles), z)


def test_ffn_with_zero_weights_is_identity():
    ffn = FeedForward(16, 32).double()
    with torch.no_grad():
        for lin in (ffn.fc1, ffn.fc2):
            lin.weight.zero_()
            lin.bias.zero_()
    y = torch.randn(2, 3, 16, dtype=torch.float64)
    assert torch.equal(ffn(y), y)


def _block_gradcheck(block, z, *args):
    zz = z.clone().requires_grad_(True)
    w = torch.randn(z.shape, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    f = lambda v: (block(v, *args) * w).sum()
    f(zz).backward()
    return nx.relative_error(zz.grad, nx.finite_difference_grad(f, z))


def test_attention_gradient():
    torch.manual_seed(0)
    att = Attention(16, 2).double()
    for lin in (att.q, att.k, att.v, att.o):
        lin.reset_parameters(torch.Generator().manual_seed(3))
        lin.std = 0.3
    z = torch.randn(1, 4, 16, dtype=torch.float64)
    angles = rotation_angles(torch.tensor([0.0, 1, 0, 1]), torch.tensor([0.0, 0, 1, 1]), 8)[None, None]
    assert _block_gradcheck(att, z, angles) < 1e-4


def test_ffn_gradient():
    ffn = FeedForward(8, 16).double()
    for lin in (ffn.fc1, ffn.fc2):
        lin.std = 0.5
        lin.reset_parameters(torch.Generator().manual_seed(4))
    z = torch.randn(1, 4, 8, dtype=torch.float64)
    assert _block_gradcheck(ffn, z) < 1e-4


def test_native_equals_fixed_encoding_bit_exact():
    enc = make_encoder(dtype=torch.float32)
    img = ImageSpec(np.random.default_rng(2).random((3, 224, 224), dtype=np.float32))
    a = encode(enc, img, ResolutionPolicy("native"), merge=2).z
    b = encode(enc, img, ResolutionPolicy("fixed", side=224), merge=2).z
    assert torch.equal(a, b)


def test_padding_does_not_change_features():
    enc = make_encoder()
    g1, g2 = grid(2, 4, seed=1), grid(3, 5, seed=2)
    alone = enc([g1]).z[0]
    batched = enc([g1, g2])
    assert torch.allclose(batched.rows(0), alone, atol=1e-12)
    assert batched.valid.sum(dim=1).tolist() == [8, 15]


@pytest.mark.parametrize("mode", ["crope", "rope2d_only", "learned_only"])
def test_all_grid_shapes_encode(mode):
    enc = make_encoder(dtype=torch.float32, layers=1)
    enc.rotary_mode = mode
    shapes = [(1, 1), (1, 16), (16, 1), (5, 7), (16, 16)]
    feats = enc([grid(r, c, seed=r * c) for r, c in shapes])
    assert feats.z.shape == (5, 256, 64)
    assert torch.isfinite(feats.z).all()


def test_learned_only_ignores_rotation():
    enc = make_encoder(layers=1)
    enc.rotary_mode = "learned_only"
    g = grid(2, 2)
    shifted = PatchGrid(2, 2, 14, 3, g.patches, coords=g.coords + 5)
    assert torch.equal(enc([g]).z, enc([shifted]).z)


def test_empty_batch_rejected():
    with pytest.raises(ContractError):
        make_encoder()([])
