"""Entity-relation context sequences around a triple.

A context for ``(h, r, t)`` with ``p`` neighbor pairs per side is a fixed-length
sequence of ``4p + 3`` tokens::

    [PAD.. | head distant (e, r).. | head direct (e, r).. | h r t |
     tail direct (r, e).. | tail distant (r, e).. | ..PAD]

Head-side pairs come from incoming edges of ``h``, tail-side pairs from outgoing
edges of ``t``. Same-hop pairs on one side share their position indices.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .graph import KnowledgeGraphStore, Triple

PAD_POSITION = -1
MAX_HOP = 2

TRAIN = "train"
EVAL = "eval"


class ConfigError(ValueError):
    pass


class NeighborPair(NamedTuple):
    entity: int
    relation: int
    hop: int


@dataclass(frozen=True)
class ExtractionConfig:
    p: int = 8
    q: int = 5
    mode: str = EVAL

    def __post_init__(self):
        if self.p < 1:
            raise ConfigError(f"p must be >= 1, got {self.p}")
        if not 0 <= self.q <= self.p:
            raise ConfigError(f"q must be in [0, p={self.p}], got {self.q}")
        if self.mode not in (TRAIN, EVAL):
            raise ConfigError(f"mode must be 'train' or 'eval', got {self.mode!r}")

    @property
    def length(self) -> int:
        return 4 * self.p + 3


class ElementVocab:
    """Token ids of the element embedding table: PAD, MASK, entities, relations."""

    PAD = 0
    MASK = 1
    N_SPECIAL = 2

    def __init__(self, n_entities: int, n_relations: int):
        self.n_entities = n_entities
        self.n_relations = n_relations

    @classmethod
    def for_store(cls, store: KnowledgeGraphStore) -> "ElementVocab":
        return cls(store.n_entities, store.n_relations)

    @property
    def size(self) -> int:
        return self.N_SPECIAL + self.n_entities + self.n_relations

    def entity(self, e: int) -> int:
        return self.N_SPECIAL + e

    def relation(self, r: int) -> int:
        return self.N_SPECIAL + self.n_entities + r

    def is_entity(self, token: int) -> bool:
        return self.N_SPECIAL <= token < self.N_SPECIAL + self.n_entities

    def label(self, token: int, store: KnowledgeGraphStore) -> str:
        if token == self.PAD:
            return "[PAD]"
        if token == self.MASK:
            return "[MASK]"
        if self.is_entity(token):
            return store.entity_names[token - self.N_SPECIAL]
        return store.relation_names[token - self.N_SPECIAL - self.n_entities]


@dataclass(frozen=True)
class ContextSequence:
    tokens: np.ndarray  # (4p+3,) element-vocabulary ids
    positions: np.ndarray  # (4p+3,) position indices, PAD_POSITION on padding
    pad_mask: np.ndarray  # (4p+3,) True on real tokens
    hops: np.ndarray  # (4p+3,) 1/2 on neighbor tokens, 0 on the triple and padding
    p: int

    @property
    def triple_slots(self) -> Tuple[int, int, int]:
        return 2 * self.p, 2 * self.p + 1, 2 * self.p + 2

    def __len__(self) -> int:
        return len(self.tokens)

    def head_pairs(self) -> List[Tuple[int, int, int]]:
        """(entity token, relation token, hop) for the head side, in layout order."""
        out = []
        for j in range(self.p):
            if self.pad_mask[2 * j]:
                out.append((int(self.tokens[2 * j]), int(self.tokens[2 * j + 1]), int(self.hops[2 * j])))
        return out

    def tail_pairs(self) -> List[Tuple[int, int, int]]:
        base = 2 * self.p + 3
        out = []
        for j in range(self.p):
            if self.pad_mask[base + 2 * j]:
                out.append(
                    (int(self.tokens[base + 2 * j + 1]), int(self.tokens[base + 2 * j]), int(self.hops[base + 2 * j]))
                )
        return out


def position_indices(
    head_pairs: Sequence[NeighborPair], tail_pairs: Sequence[NeighborPair], p: int
) -> np.ndarray:
    """Position index of every slot for pairs already in layout order.

    Head k-hop pair -> (entity 2p-2k, relation 2p-2k+1); h, r, t -> 2p, 2p+1, 2p+2;
    tail k-hop pair -> (relation 2p+2k+1, entity 2p+2k+2). Padding gets PAD_POSITION.
    """
    if len(head_pairs) > p or len(tail_pairs) > p:
        raise ConfigError(f"at most p={p} pairs per side")
    out = np.full(4 * p + 3, PAD_POSITION, dtype=np.int64)
    start = 2 * (p - len(head_pairs))
    for j, pair in enumerate(head_pairs):
        k = _check_hop(pair.hop)
        out[start + 2 * j] = 2 * p - 2 * k
        out[start + 2 * j + 1] = 2 * p - 2 * k + 1
    out[2 * p : 2 * p + 3] = (2 * p, 2 * p + 1, 2 * p + 2)
    base = 2 * p + 3
    for j, pair in enumerate(tail_pairs):
        k = _check_hop(pair.hop)
        out[base + 2 * j] = 2 * p + 2 * k + 1
        out[base + 2 * j + 1] = 2 * p + 2 * k + 2
    return out


def _check_hop(hop: int) -> int:
    if hop not in (1, MAX_HOP):
        raise ConfigError(f"hop must be 1 or {MAX_HOP}, got {hop}")
    return hop


def position_table_size(p: int) -> int:
    """Rows needed in the position table: indices 0..2p+6 plus the PAD row."""
    return 2 * p + 8


class ContextExtractor:
    """Builds neighbor pools and context sequences over an immutable store."""

    def __init__(self, store: KnowledgeGraphStore, vocab: Optional[ElementVocab] = None):
        self.store = store
        self.vocab = vocab or ElementVocab.for_store(store)
        self._distant_in: Dict[int, List[NeighborPair]] = {}
        self._distant_out: Dict[int, List[NeighborPair]] = {}
        self._background = None

    # pools -------------------------------------------------------------
    def direct_in_pairs(self, h: int) -> List[NeighborPair]:
        return [NeighborPair(e, r, 1) for e, r in self.store.in_adj[h]]

    def direct_out_pairs(self, t: int) -> List[NeighborPair]:
        return [NeighborPair(e, r, 1) for r, e in self.store.out_adj[t]]

    def distant_in_pairs(self, h: int) -> List[NeighborPair]:
        """Incoming edges of h's direct in-neighbors, minus h itself and h's direct pairs."""
        cached = self._distant_in.get(h)
        if cached is None:
            adj = self.store.in_adj
            cached = self._distant(h, [e for e, _ in adj[h]], lambda x: adj[x], adj[h])
            self._distant_in[h] = cached
        return cached

    def distant_out_pairs(self, t: int) -> List[NeighborPair]:
        cached = self._distant_out.get(t)
        if cached is None:
            adj = self.store.out_adj
            direct = [(e, r) for r, e in adj[t]]
            cached = self._distant(t, [e for e, _ in direct], lambda x: [(e, r) for r, e in adj[x]], direct)
            self._distant_out[t] = cached
        return cached

    @staticmethod
    def _distant(root, via_entities, edges_of, direct) -> List[NeighborPair]:
        seen = set(direct)
        out = []
        for mid in dict.fromkeys(via_entities):
            for e, r in edges_of(mid):
                if e == root or (e, r) in seen:
                    continue
                seen.add((e, r))
                out.append(NeighborPair(e, r, 2))
        return out

    def _in_background(self, triple: Triple) -> bool:
        if self._background is None:
            self._background = set(self.store.background_triples)
        return triple in self._background

    # extraction ----------------------------------------------------------
    def side_pools(self, triple: Triple) -> Tuple[Tuple[list, list], Tuple[list, list]]:
        """(direct, distant) pools for the head and tail sides, own edge removed."""
        h, r, t = triple
        head = (self.direct_in_pairs(h), self.distant_in_pairs(h))
        tail = (self.direct_out_pairs(t), self.distant_out_pairs(t))
        inv = self.store.inverse_of.get(r)
        if inv is not None and self._in_background(Triple(h, r, t)):
            # the triple's own edge shows up as (t, r_inv) at h and (r_inv, h) at t
            head = tuple([x for x in pool if (x.entity, x.relation) != (t, inv)] for pool in head)
            tail = tuple([x for x in pool if (x.entity, x.relation) != (h, inv)] for pool in tail)
        return head, tail

    def extract_context(
        self, triple: Triple, cfg: ExtractionConfig, rng: Optional[np.random.Generator] = None
    ) -> ContextSequence:
        if cfg.mode == TRAIN and rng is None:
            raise ConfigError("train-mode extraction needs an rng")
        (h_dir, h_dst), (t_dir, t_dst) = self.side_pools(triple)
        head = _select(h_dir, h_dst, cfg, rng)
        tail = _select(t_dir, t_dst, cfg, rng)
        # head side runs outermost-first: distant, then direct
        head = [x for x in head if x.hop == 2] + [x for x in head if x.hop == 1]
        return self.layout(triple, head, tail, cfg.p)

    def layout(self, triple: Triple, head: Sequence[NeighborPair], tail: Sequence[NeighborPair], p: int) -> ContextSequence:
        v = self.vocab
        n = 4 * p + 3
        tokens = np.full(n, v.PAD, dtype=np.int64)
        hops = np.zeros(n, dtype=np.int8)
        start = 2 * (p - len(head))
        for j, pair in enumerate(head):
            tokens[start + 2 * j] = v.entity(pair.entity)
            tokens[start + 2 * j + 1] = v.relation(pair.relation)
            hops[start + 2 * j : start + 2 * j + 2] = pair.hop
        h, r, t = triple
        tokens[2 * p : 2 * p + 3] = (v.entity(h), v.relation(r), v.entity(t))
        base = 2 * p + 3
        for j, pair in enumerate(tail):
            tokens[base + 2 * j] = v.relation(pair.relation)
            tokens[base + 2 * j + 1] = v.entity(pair.entity)
            hops[base + 2 * j : base + 2 * j + 2] = pair.hop
        positions = position_indices(head, tail, p)
        return ContextSequence(tokens, positions, positions != PAD_POSITION, hops, p)


def _select(direct: list, distant: list, cfg: ExtractionConfig, rng) -> List[NeighborPair]:
    p, q = cfg.p, cfg.q
    if len(direct) >= p:
        return _take(direct, p, cfg.mode, rng)
    n_dist = min(q, p - len(direct), len(distant))
    return list(direct) + _take(distant, n_dist, cfg.mode, rng)


def _take(pool: list, n: int, mode: str, rng) -> list:
    if n <= 0:
        return []
    if mode == EVAL or n >= len(pool):
        return list(pool[:n])
    idx = np.sort(rng.choice(len(pool), size=n, replace=False))
    return [pool[i] for i in idx]
