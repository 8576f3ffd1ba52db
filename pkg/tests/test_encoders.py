import math

import numpy as np
import pytest
import torch
from torch import nn

from fskgc import numeric as nx
from fskgc.context import ContextExtractor, ElementVocab, ExtractionConfig
from fskgc.global_encoder import GlobalContextEncoder, TransformerBlock
from fskgc.graph import KnowledgeGraphStore, Triple
from fskgc.local_encoder import LocalNeighborEncoder
from fskgc.model import ContextMatcher, SequenceBatch

F64 = torch.float64


def gen(seed=0):
    return torch.Generator().manual_seed(seed)


def test_embed_sequence_hand_case():
    enc = GlobalContextEncoder(vocab_size=4, p=1, d=2, n_layers=0, n_heads=1, dtype=F64)
    with torch.no_grad():
        enc.element.copy_(torch.tensor([[0, 0], [1, 0], [0, 1], [1, 1]], dtype=F64))
        enc.position.copy_(10 * torch.arange(enc.position.shape[0] * 2, dtype=F64).view(-1, 2))
    tokens = torch.tensor([[0, 0, 2, 3, 1, 0, 0]])
    positions = torch.tensor([[-1, -1, 2, 3, 4, -1, -1]])
    z = enc.embed_sequence(tokens, positions)
    assert z[0, 0].tolist() == [0.0, 10.0]  # PAD element + PAD position row 0
    assert z[0, 2].tolist() == [60.0, 71.0]  # element[2] + position row 3
    assert z[0, 4].tolist() == [101.0, 110.0]


def test_no_blocks_is_identity_and_pooling_is_triple_mean():
    enc = GlobalContextEncoder(vocab_size=5, p=1, d=3, n_layers=0, n_heads=1, generator=gen(), dtype=F64)
    z = torch.randn(2, 7, 3, generator=gen(1), dtype=F64)
    out, maps = enc.transformer_forward(z, torch.ones(2, 7, dtype=torch.bool))
    assert out is z and maps == []
    assert torch.allclose(enc.triple_global_rep(z), (z[:, 2] + z[:, 3] + z[:, 4]) / 3)


def test_zero_weight_block_is_identity_with_uniform_attention():
    block = TransformerBlock(4, 2, dtype=F64)
    with torch.no_grad():
        for p in block.parameters():
            if p.dim() == 2:
                p.zero_()
    x = torch.randn(1, 5, 4, generator=gen(), dtype=F64)
    mask = torch.tensor([[False, True, True, True, False]])
    y, attn = block(x, mask)
    assert torch.equal(y, x)
    want = torch.tensor([0.0, 1 / 3, 1 / 3, 1 / 3, 0.0], dtype=F64)
    assert torch.allclose(attn, want.expand_as(attn))


def reference_block(block, x, mask):
    """Same computation through torch.nn building blocks."""
    d = block.d
    mha = nn.MultiheadAttention(d, block.n_heads, batch_first=True, dtype=F64)
    with torch.no_grad():
        mha.in_proj_weight.copy_(torch.cat([block.query.weight.T, block.key.weight.T, block.value.weight.T]))
        mha.in_proj_bias.copy_(torch.cat([block.query.bias, block.key.bias, block.value.bias]))
        mha.out_proj.weight.copy_(block.out.weight.T)
        mha.out_proj.bias.copy_(block.out.bias)
    ln1 = nn.functional.layer_norm(x, (d,), block.ln_attn.gain, block.ln_attn.bias, 1e-5)
    a, w = mha(ln1, ln1, ln1, key_padding_mask=~mask, average_attn_weights=False)
    x = x + a
    ln2 = nn.functional.layer_norm(x, (d,), block.ln_ff.gain, block.ln_ff.bias, 1e-5)
    ff = nn.functional.linear(torch.relu(ln2 @ block.ff_in.weight + block.ff_in.bias), block.ff_out.weight.T, block.ff_out.bias)
    return x + ff, w


def test_block_matches_torch_reference():
    block = TransformerBlock(8, 2, generator=gen(3), dtype=F64)
    with torch.no_grad():
        for p in block.parameters():
            if p.dim() == 1:
                p.add_(torch.randn(p.shape, generator=gen(4), dtype=F64) * 0.1)
    x = torch.randn(3, 6, 8, generator=gen(5), dtype=F64)
    mask = torch.ones(3, 6, dtype=torch.bool)
    mask[1, :2] = False
    mask[2, 4:] = False
    y, attn = block(x, mask)
    y_ref, attn_ref = reference_block(block, x, mask)
    assert torch.allclose(y, y_ref, atol=1e-10)
    assert torch.allclose(attn, attn_ref, atol=1e-12)


def test_heads_must_divide_d():
    with pytest.raises(ValueError):
        TransformerBlock(10, 4)


def _small_encoder(seed=0, p=2):
    return GlobalContextEncoder(vocab_size=12, p=p, d=8, n_layers=2, n_heads=2, generator=gen(seed), dtype=F64)


def test_attention_rows_sum_to_one_and_ignore_pad():
    enc = _small_encoder()
    tokens = torch.tensor([[0, 0, 3, 4, 5, 6, 7, 8, 9, 0, 0]])
    positions = torch.tensor([[-1, -1, 2, 3, 4, 5, 6, 7, 8, -1, -1]])
    mask = positions != -1
    hidden, maps = enc(tokens, positions, mask)
    for attn in maps:
        assert torch.allclose(attn.sum(-1), torch.ones_like(attn.sum(-1)), atol=1e-12)
        assert attn[..., ~mask[0]].abs().max().item() == 0.0
    # changing the PAD embedding does not move any real slot
    with torch.no_grad():
        enc.element[0] += 3.0
        enc.position[0] -= 2.0
    hidden2, _ = enc(tokens, positions, mask)
    assert torch.allclose(hidden[0, mask[0]], hidden2[0, mask[0]], atol=1e-12)


def test_zero_classifier_gives_uniform_logits():
    enc = _small_encoder()
    hidden = torch.randn(2, 11, 8, generator=gen(), dtype=F64)
    logits = enc.mlm_logits(hidden, torch.tensor([0, 1]), torch.tensor([3, 5]))
    assert logits.shape == (2, 12) and logits.abs().max().item() == 0.0
    assert nx.cross_entropy(logits, torch.tensor([4, 7])).item() == pytest.approx(math.log(12))


def test_train_dropout_changes_output_eval_does_not():
    enc = GlobalContextEncoder(vocab_size=12, p=1, d=8, n_layers=1, n_heads=2, dropout=0.5, generator=gen(), dtype=F64)
    tokens = torch.tensor([[3, 4, 5, 6, 7, 8, 9]])
    positions = torch.arange(1, 8).view(1, -1)
    mask = torch.ones(1, 7, dtype=torch.bool)
    a, _ = enc(tokens, positions, mask, gen(1), train=False)
    b, _ = enc(tokens, positions, mask, gen(2), train=False)
    c, _ = enc(tokens, positions, mask, gen(1), train=True)
    assert torch.equal(a, b) and not torch.allclose(a, c)


# local encoder ---------------------------------------------------------------


def test_isolated_entity_keeps_embedding():
    le = LocalNeighborEncoder(4, generator=gen(), dtype=F64)
    e = torch.randn(1, 4, generator=gen(1), dtype=F64)
    ent = torch.randn(1, 3, 4, generator=gen(2), dtype=F64)
    out, alpha = le.entity_rep(e, ent, ent, torch.zeros(1, 3, dtype=torch.bool))
    assert torch.equal(out, e)
    assert alpha.abs().sum().item() == 0.0


def test_entity_rep_hand_computation():
    d = 3
    le = LocalNeighborEncoder(d, slope=0.2, generator=gen(7), dtype=F64)
    e = torch.randn(d, generator=gen(1), dtype=F64)
    ent = torch.randn(3, d, generator=gen(2), dtype=F64)
    rel = torch.randn(3, d, generator=gen(3), dtype=F64)
    mask = torch.tensor([True, True, False])
    out, alpha = le.entity_rep(e, ent, rel, mask)

    W1, U1, W2 = (t.detach().numpy() for t in (le.pair.weight, le.score_vec, le.couple.weight))
    x = np.concatenate([ent.numpy(), rel.numpy()], axis=1)
    pairs = x @ W1
    logits = pairs @ U1
    logits = np.where(logits >= 0, logits, 0.2 * logits)[:2]
    a = np.exp(logits - logits.max())
    a /= a.sum()
    want = e.numpy() + (a[:, None] * pairs[:2]).sum(0) @ W2
    assert np.allclose(alpha.detach().numpy(), [a[0], a[1], 0.0])
    assert np.allclose(out.detach().numpy(), want)


def test_triple_local_rep_hand_computation():
    d = 2
    le = LocalNeighborEncoder(d, dtype=F64)
    with torch.no_grad():
        le.rel.weight.copy_(torch.eye(2, dtype=F64))
    h, t, r = (torch.tensor(v, dtype=F64) for v in ([1.0, 2.0], [3.0, 4.0], [0.0, 1.0]))
    out = le.triple_local_rep(h, t, r)
    x = np.array([1.0, 3.0, 3.0, 5.0])
    want = (x - x.mean()) / np.sqrt(x.var() + 1e-5)
    assert np.allclose(out.detach().numpy(), want)


def test_local_path_uses_direct_pairs_only():
    edges = [("h", "a", "x"), ("y", "b", "h"), ("z", "c", "y"), ("t", "d", "w"), ("w", "e", "v")]
    store = KnowledgeGraphStore.from_triples(edges)
    ex = ContextExtractor(store)
    tr = Triple(store.entity_id("h"), store.relation_id("a"), store.entity_id("t"))
    with_distant = ex.extract_context(tr, ExtractionConfig(3, 2))
    without = ex.extract_context(tr, ExtractionConfig(3, 0))
    assert (with_distant.hops == 2).any()
    model = ContextMatcher(ElementVocab.for_store(store).size, p=3, d=4, n_layers=1, n_heads=2, dtype=F64)
    a = model.encode(SequenceBatch.collate([with_distant]), need_global=False)
    b = model.encode(SequenceBatch.collate([without]), need_global=False)
    assert torch.allclose(a.local_rep, b.local_rep, atol=1e-12)
    assert torch.allclose(a.head_alpha.sum(-1), torch.ones(1, dtype=F64))
