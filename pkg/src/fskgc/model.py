"""Hierarchical encoder plus hybrid scorer, operating on batches of context sequences."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .context import ContextSequence
from .global_encoder import GlobalContextEncoder
from .graph import Triple
from .local_encoder import LocalNeighborEncoder
from .scorer import ScoreBreakdown, relation_rep, score

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class SequenceBatch:
    tokens: torch.Tensor  # (N, 4p+3) long
    positions: torch.Tensor  # (N, 4p+3) long, -1 on padding
    pad_mask: torch.Tensor  # (N, 4p+3) bool
    hops: torch.Tensor  # (N, 4p+3) long
    p: int

    @classmethod
    def collate(cls, seqs: Sequence[ContextSequence]) -> "SequenceBatch":
        p = seqs[0].p
        return cls(
            torch.from_numpy(np.stack([s.tokens for s in seqs])),
            torch.from_numpy(np.stack([s.positions for s in seqs])),
            torch.from_numpy(np.stack([s.pad_mask for s in seqs])),
            torch.from_numpy(np.stack([s.hops for s in seqs]).astype(np.int64)),
            p,
        )

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def maskable(self, include_triple: bool) -> torch.Tensor:
        """Slots eligible for masked-token prediction."""
        out = self.pad_mask.clone()
        if not include_triple:
            out[:, 2 * self.p : 2 * self.p + 3] = False
        return out

    def select(self, idx) -> "SequenceBatch":
        return SequenceBatch(self.tokens[idx], self.positions[idx], self.pad_mask[idx], self.hops[idx], self.p)


@dataclass
class Encoded:
    global_rep: Optional[torch.Tensor]  # (N, d)
    local_rep: Optional[torch.Tensor]  # (N, 2d)
    hidden: Optional[torch.Tensor] = None  # (N, T, d)
    attention: Optional[List[torch.Tensor]] = None  # per layer (N, H, T, T)
    head_alpha: Optional[torch.Tensor] = None  # (N, p)
    tail_alpha: Optional[torch.Tensor] = None

    def __getitem__(self, idx) -> "Encoded":
        pick = lambda t: None if t is None else t[idx]
        return Encoded(
            pick(self.global_rep),
            pick(self.local_rep),
            pick(self.hidden),
            None if self.attention is None else [a[idx] for a in self.attention],
            pick(self.head_alpha),
            pick(self.tail_alpha),
        )


def canonical_support(triples: Sequence[Triple]) -> List[Triple]:
    """Support sets are unordered; a fixed order makes aggregation bit-reproducible."""
    return sorted(triples)


class ContextMatcher(nn.Module):
    """Global transformer encoder + local neighbor encoder sharing one element table."""

    def __init__(
        self,
        vocab_size: int,
        p: int,
        d: int = 32,
        n_layers: int = 2,
        n_heads: int = 2,
        dropout: float = 0.0,
        leaky_slope: float = 0.2,
        seed: int = 0,
        dtype=torch.float32,
    ):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.p, self.d = p, d
        self.global_encoder = GlobalContextEncoder(vocab_size, p, d, n_layers, n_heads, dropout, gen, dtype)
        self.local_encoder = LocalNeighborEncoder(d, dropout, leaky_slope, gen, dtype)

    @property
    def element(self) -> nn.Parameter:
        return self.global_encoder.element

    @property
    def vocab_size(self) -> int:
        return self.element.shape[0]

    def global_only_parameters(self):
        """Parameters used only by the global scoring path (the element table is shared)."""
        ge = self.global_encoder
        return [("position", ge.position)] + [(f"blocks.{n}", t) for n, t in ge.blocks.named_parameters()]

    def local_only_parameters(self):
        return list(self.local_encoder.named_parameters())

    def encode(
        self,
        batch: SequenceBatch,
        global_tokens: Optional[torch.Tensor] = None,
        generator: Optional[torch.Generator] = None,
        train: bool = False,
        need_global: bool = True,
        need_local: bool = True,
    ) -> Encoded:
        """Encode a batch. ``global_tokens`` replaces the transformer input (masked tokens)."""
        out = Encoded(None, None)
        if need_global:
            tokens = batch.tokens if global_tokens is None else global_tokens
            hidden, maps = self.global_encoder(tokens, batch.positions, batch.pad_mask, generator, train)
            out.hidden, out.attention = hidden, maps
            out.global_rep = self.global_encoder.triple_global_rep(hidden)
        if need_local:
            out.local_rep, out.head_alpha, out.tail_alpha = self._local(batch, generator, train)
        return out

    def _local(self, batch: SequenceBatch, generator, train):
        p, tok, hops = self.p, batch.tokens, batch.hops
        emb = self.element
        le = self.local_encoder
        h_ent, h_rel, h_mask = tok[:, 0 : 2 * p : 2], tok[:, 1 : 2 * p : 2], hops[:, 0 : 2 * p : 2] == 1
        base = 2 * p + 3
        t_rel, t_ent, t_mask = tok[:, base::2], tok[:, base + 1 :: 2], hops[:, base::2] == 1
        h, r, t = emb[tok[:, 2 * p]], emb[tok[:, 2 * p + 1]], emb[tok[:, 2 * p + 2]]
        h2, h_alpha = le.entity_rep(h, emb[h_ent], emb[h_rel], h_mask, generator, train)
        t2, t_alpha = le.entity_rep(t, emb[t_ent], emb[t_rel], t_mask, generator, train)
        return le.triple_local_rep(h2, t2, r), h_alpha, t_alpha

    @staticmethod
    def score(support: Encoded, queries: Encoded, lam: float) -> ScoreBreakdown:
        """Score each query against the support set with query-conditioned aggregation."""
        g_r = c_g = l_r = c_l = None
        if lam > 0.0:
            g_r, c_g = relation_rep(queries.global_rep, support.global_rep)
        if lam < 1.0:
            l_r, c_l = relation_rep(queries.local_rep, support.local_rep)
        out = score(queries.global_rep, queries.local_rep, g_r, l_r, lam)
        out.c_global, out.c_local = c_g, c_l
        return out
