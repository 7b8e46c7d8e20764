import math

import numpy as np
import pytest
import torch

from visalign import numerics as nx
from visalign.encoder import VisualFeatures
from visalign.errors import ContractError
from visalign.lm import (
    Adapter,
    AdapterConfig,
    CausalDecoder,
    DecoderConfig,
    TokenSequence,
    VisualTokens,
    decode_loss,
    forward_text_only,
    greedy_decode,
    merge_2x2,
)
from visalign.patcher import PatchGrid


def decoder(k=12, seed=0, width=16, heads=2):
    dec = CausalDecoder(DecoderConfig(layers=2, width=width, heads=heads, vocab_size=k, max_positions=64))
    dec.reset_parameters(torch.Generator().manual_seed(seed))
    return dec.double()


def adapter(dv=8, dt=16, seed=0):
    ad = Adapter(AdapterConfig(dv, dt))
    ad.reset_parameters(torch.Generator().manual_seed(seed))
    return ad.double()


def feats(shapes, d=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    grids = [PatchGrid(r, c, 1, 1, np.zeros((r * c, 1), dtype=np.float32)) for r, c in shapes]
    n = max(r * c for r, c in shapes)
    z = torch.randn(len(shapes), n, d, generator=g, dtype=torch.float64)
    valid = torch.zeros(len(shapes), n, dtype=torch.bool)
    for b, (r, c) in enumerate(shapes):
        valid[b, : r * c] = True
    return VisualFeatures(z=z, valid=valid, grids=grids)


def vis_tokens(n, d=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    return VisualTokens(h=torch.randn(1, n, d, generator=g, dtype=torch.float64),
                        valid=torch.ones(1, n, dtype=torch.bool), shapes=[(1, n)])


def test_merge_order_row_major_neighbours():
    z = torch.arange(16.0).reshape(16, 1)  # 4x4 grid, value = index
    m = merge_2x2(z, 4, 4)
    assert m.shape == (4, 4)
    assert m[0].tolist() == [0.0, 1.0, 4.0, 5.0]
    assert m[3].tolist() == [10.0, 11.0, 14.0, 15.0]


def test_merge_rejects_odd_grid():
    with pytest.raises(ContractError):
        merge_2x2(torch.zeros(6, 2), 3, 2)


def test_minimal_and_reduction_law():
    ad = adapter()
    assert ad(feats([(2, 2)])).h.shape == (1, 1, 16)
    out = ad(feats([(24, 24), (2, 2)]))
    assert out.lengths == [144, 1]


def test_constant_features_give_constant_tokens():
    ad = adapter()
    f = feats([(4, 6)])
    f.z[:] = 0.3
    h = ad(f).h[0]
    assert torch.allclose(h, h[0].expand_as(h), atol=0)


def test_uniform_logits_give_ln_k():
    dec = decoder(k=12)
    with torch.no_grad():
        dec.embed.zero_()
    loss = decode_loss(dec, vis_tokens(3), [TokenSequence([1, 5, 7, 2])])
    assert abs(loss.item() - math.log(12)) < 1e-12


def test_hand_softmax_case():
    dec = decoder(k=4)
    dec.logits = lambda h: torch.tensor([0.0, 0.0, 0.0, math.log(3)], dtype=torch.float64).expand(h.shape[0], 4)
    loss = decode_loss(dec, vis_tokens(2), [TokenSequence([3])])
    assert abs(loss.item() - math.log(2)) < 1e-12


def test_decode_loss_errors():
    dec = decoder()
    with pytest.raises(ContractError):
        decode_loss(dec, vis_tokens(2), [TokenSequence([])])
    with pytest.raises(ContractError):
        decode_loss(dec, vis_tokens(2), [TokenSequence([1]), TokenSequence([1])])


def test_text_only_shape():
    h, valid = forward_text_only(decoder(), [TokenSequence([4])])
    assert h.shape == (1, 1, 16) and valid.tolist() == [[True]]


def test_causality():
    dec = decoder()
    a, _ = forward_text_only(dec, [TokenSequence([1, 4, 5, 6])])
    b, _ = forward_text_only(dec, [TokenSequence([1, 4, 5, 9])])
    assert torch.equal(a[0, :3], b[0, :3])
    assert not torch.equal(a[0, 3], b[0, 3])


def test_right_padding_does_not_leak():
    dec = decoder()
    alone, _ = forward_text_only(dec, [TokenSequence([1, 4, 2])])
    both, valid = forward_text_only(dec, [TokenSequence([1, 4, 2]), TokenSequence([1, 4, 5, 6, 7, 2])])
    assert torch.allclose(both[0, :3], alone[0], atol=1e-12)
    assert valid.sum(dim=1).tolist() == [3, 6]


def test_batched_loss_is_token_weighted_mean():
    dec = decoder()
    v = VisualTokens(h=torch.randn(2, 3, 16, dtype=torch.float64), valid=torch.ones(2, 3, dtype=torch.bool),
                     shapes=[(1, 3), (1, 3)])
    s1, s2 = TokenSequence([1, 3, 2]), TokenSequence([1, 4, 5, 6, 2])
    one = decode_loss(dec, VisualTokens(v.h[:1], v.valid[:1], v.shapes[:1]), [s1])
    two = decode_loss(dec, VisualTokens(v.h[1:], v.valid[1:], v.shapes[1:]), [s2])
    both = decode_loss(dec, v, [s1, s2])
    assert abs(both.item() - (3 * one.item() + 5 * two.item()) / 8) < 1e-12


def test_decode_loss_gradient_wrt_visual_tokens():
    dec = decoder()
    seqs = [TokenSequence([1, 3, 4, 2])]
    h0 = torch.randn(1, 3, 16, dtype=torch.float64)
    f = lambda h: decode_loss(dec, VisualTokens(h, torch.ones(1, 3, dtype=torch.bool), [(1, 3)]), seqs)
    x = h0.clone().requires_grad_(True)
    f(x).backward()
    assert nx.relative_error(x.grad, nx.finite_difference_grad(f, h0)) < 1e-5


def test_greedy_decode_stops_at_eos():
    dec = decoder(k=6)
    dec.logits = lambda h: torch.tensor([0.0, 0, 5.0, 0, 0, 0], dtype=torch.float64).expand(*h.shape[:-1], 6)
    assert greedy_decode(dec, vis_tokens(2), 0, bos=1, eos=2) == []
    dec.logits = lambda h: torch.tensor([0.0, 0, 0, 0, 5.0, 0], dtype=torch.float64).expand(*h.shape[:-1], 6)
    assert greedy_decode(dec, vis_tokens(2), 0, bos=1, eos=2, max_len=3) == [4, 4, 4]


def test_prototypes_are_embedding_transpose():
    dec = decoder(k=7)
    assert dec.prototypes.shape == (16, 7)
    assert torch.equal(dec.prototypes, dec.embed.T)
