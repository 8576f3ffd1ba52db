import numpy as np
import pytest

from fskgc.context import (
    EVAL,
    PAD_POSITION,
    TRAIN,
    ConfigError,
    ContextExtractor,
    ElementVocab,
    ExtractionConfig,
    NeighborPair,
    position_indices,
    position_table_size,
)
from fskgc.graph import KnowledgeGraphStore, Triple


def random_store(rng, n_edges=50, n_entities=20, n_relations=5):
    named = [
        (f"e{rng.integers(n_entities)}", f"r{rng.integers(n_relations)}", f"e{rng.integers(n_entities)}")
        for _ in range(n_edges)
    ]
    return KnowledgeGraphStore.from_triples(named)


def augmented_edges(store):
    edges = set(store.background_triples)
    edges |= {Triple(t, store.inverse_of[r], h) for h, r, t in store.background_triples}
    return edges


def brute_pools(edges, root, side):
    """1-hop and 2-hop (entity, relation) sets by plain enumeration of all edges."""
    if side == "in":
        step = lambda x: {(h, r) for h, r, t in edges if t == x}
    else:
        step = lambda x: {(t, r) for h, r, t in edges if h == x}
    direct = step(root)
    distant = set()
    for mid, _ in direct:
        distant |= step(mid)
    distant = {(e, r) for e, r in distant if e != root} - direct
    return direct, distant


def as_set(pool):
    return {(x.entity, x.relation) for x in pool}


def test_worked_example_positions():
    hp = [NeighborPair(0, 0, 2), NeighborPair(0, 0, 2), NeighborPair(0, 0, 1)]
    tp = [NeighborPair(0, 0, 1), NeighborPair(0, 0, 1), NeighborPair(0, 0, 2)]
    assert position_indices(hp, tp, 3).tolist() == [2, 3, 2, 3, 4, 5, 6, 7, 8, 9, 10, 9, 10, 11, 12]


def test_positions_with_padding():
    pos = position_indices([NeighborPair(0, 0, 1)], [], 2)
    assert pos.tolist() == [-1, -1, 2, 3, 4, 5, 6, -1, -1, -1, -1]


@pytest.mark.parametrize("hop", [0, 3])
def test_bad_hop_rejected(hop):
    with pytest.raises(ConfigError):
        position_indices([NeighborPair(0, 0, hop)], [], 2)


def test_max_position_index_p8():
    hp = [NeighborPair(0, 0, 2)] * 8
    tp = [NeighborPair(0, 0, 2)] * 8
    pos = position_indices(hp, tp, 8)
    assert pos.max() == 22 == 2 * 8 + 6
    assert position_table_size(8) == 24  # 0..22 plus the PAD row


@pytest.mark.parametrize("p,q", [(0, 0), (2, 3), (2, -1)])
def test_bad_extraction_config(p, q):
    with pytest.raises(ConfigError):
        ExtractionConfig(p, q)


def test_isolated_triple_is_all_padding():
    store = KnowledgeGraphStore.from_triples([("a", "r", "b")])
    store.intern_entity("x")
    store.intern_entity("y")
    store.build_adjacency(store.background_triples)
    x, y = store.entity_id("x"), store.entity_id("y")
    ctx = ContextExtractor(store).extract_context(Triple(x, store.relation_id("r"), y), ExtractionConfig(8, 5))
    assert len(ctx) == 35
    assert int((ctx.tokens == ElementVocab.PAD).sum()) == 32
    assert int((ctx.positions == PAD_POSITION).sum()) == 32
    assert ctx.positions[16:19].tolist() == [16, 17, 18]


def test_three_edge_contexts(three_edge):
    store, _ = three_edge
    e, r = store.entity_id, store.relation_id
    inv = lambda name: store.inverse_of[r(name)]
    ex = ContextExtractor(store)
    head, tail = ex.side_pools(Triple(e("a"), r("r1"), e("b")))
    # own edge (b, r1_inv) removed from a's in-pool; (r1_inv, a) removed from b's out-pool
    assert as_set(head[0]) == {(e("c"), inv("r3"))}
    assert as_set(tail[0]) == {(e("c"), r("r2"))}
    # via c: (a, r3_inv), root b dropped; via a: (c, r3), root b dropped
    assert as_set(tail[1]) == {(e("a"), inv("r3")), (e("c"), r("r3"))}


def test_own_edge_kept_for_non_background_triple(three_edge):
    store, _ = three_edge
    e, r = store.entity_id, store.relation_id
    head, _ = ContextExtractor(store).side_pools(Triple(e("a"), r("r2"), e("b")))
    assert (e("b"), store.inverse_of[r("r1")]) in as_set(head[0])


@pytest.mark.parametrize("seed", range(100))
def test_pools_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    store = random_store(rng)
    edges = augmented_edges(store)
    ex = ContextExtractor(store)
    for root in range(store.n_entities):
        d_in, x_in = brute_pools(edges, root, "in")
        d_out, x_out = brute_pools(edges, root, "out")
        assert as_set(ex.direct_in_pairs(root)) == d_in
        assert as_set(ex.distant_in_pairs(root)) == x_in
        assert as_set(ex.direct_out_pairs(root)) == d_out
        assert as_set(ex.distant_out_pairs(root)) == x_out
        assert len(ex.distant_in_pairs(root)) == len(x_in)  # no duplicates
        assert len(ex.distant_out_pairs(root)) == len(x_out)


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("mode", [TRAIN, EVAL])
def test_selection_rule(seed, mode):
    rng = np.random.default_rng(seed)
    store = random_store(rng, n_edges=60, n_entities=15)
    ex = ContextExtractor(store)
    p, q = 3, 2
    cfg = ExtractionConfig(p, q, mode)
    for _ in range(10):
        triple = Triple(int(rng.integers(store.n_entities)), 0, int(rng.integers(store.n_entities)))
        ctx = ex.extract_context(triple, cfg, rng)
        assert len(ctx) == 4 * p + 3
        (h_dir, h_dst), (t_dir, t_dst) = ex.side_pools(triple)
        for chosen, direct, distant in ((ctx.head_pairs(), h_dir, h_dst), (ctx.tail_pairs(), t_dir, t_dst)):
            hops = [hop for _, _, hop in chosen]
            n_direct = hops.count(1)
            assert n_direct == min(p, len(direct))
            expect_distant = 0 if len(direct) >= p else min(q, p - len(direct), len(distant))
            assert hops.count(2) == expect_distant
            v = ex.vocab
            assert {(e, r) for e, r, _ in chosen} <= {
                (v.entity(x.entity), v.relation(x.relation)) for x in list(direct) + list(distant)
            }
        # head side: distant pairs precede direct ones
        hh = [hop for _, _, hop in ctx.head_pairs()]
        assert hh == sorted(hh, reverse=True)
        th = [hop for _, _, hop in ctx.tail_pairs()]
        assert th == sorted(th)


def test_eval_mode_is_deterministic_and_rngless(three_edge):
    store, _ = three_edge
    ex = ContextExtractor(store)
    t = Triple(0, 0, 1)
    a = ex.extract_context(t, ExtractionConfig(2, 1))
    b = ex.extract_context(t, ExtractionConfig(2, 1))
    assert np.array_equal(a.tokens, b.tokens)
    with pytest.raises(ConfigError):
        ex.extract_context(t, ExtractionConfig(2, 1, TRAIN))


def test_train_mode_samples_subsets():
    hub = [("hub", f"r{i}", f"x{i}") for i in range(10)]
    store = KnowledgeGraphStore.from_triples(hub + [("y", "s", "z")])
    ex = ContextExtractor(store)
    t = Triple(store.entity_id("y"), store.relation_id("s"), store.entity_id("hub"))
    rng = np.random.default_rng(0)
    seen = {tuple(ex.extract_context(t, ExtractionConfig(2, 0, TRAIN), rng).tokens[7:]) for _ in range(30)}
    assert len(seen) > 1


def test_q_zero_means_direct_only(three_edge):
    store, _ = three_edge
    ctx = ContextExtractor(store).extract_context(Triple(0, 0, 1), ExtractionConfig(4, 0))
    assert all(hop == 1 for _, _, hop in ctx.head_pairs() + ctx.tail_pairs())


def test_vocab_layout_and_labels(three_edge):
    store, _ = three_edge
    v = ElementVocab.for_store(store)
    assert v.size == 2 + 3 + 6
    assert v.entity(0) == 2 and v.relation(0) == 5
    assert v.label(v.PAD, store) == "[PAD]" and v.label(v.MASK, store) == "[MASK]"
    assert v.label(v.entity(store.entity_id("b")), store) == "b"
    assert v.label(v.relation(store.relation_id("r2")), store) == "r2"
