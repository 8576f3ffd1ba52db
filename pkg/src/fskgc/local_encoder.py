"""Neighbor-attention encoder over the direct pairs of a context sequence."""

from __future__ import annotations

from typing import Optional, Tuple

import torch
from torch import nn

from . import numeric as nx
from .global_encoder import LayerNorm, Linear, uniform_


class LocalNeighborEncoder(nn.Module):
    def __init__(
        self,
        d: int,
        dropout: float = 0.0,
        slope: float = 0.2,
        generator: Optional[torch.Generator] = None,
        dtype=torch.float32,
    ):
        super().__init__()
        self.d, self.dropout, self.slope = d, dropout, slope
        self.pair = Linear(2 * d, 2 * d, bias=False, generator=generator, dtype=dtype)  # W1
        self.score_vec = nn.Parameter(uniform_(torch.empty(2 * d, dtype=dtype), (2 * d) ** -0.5, generator))  # U1
        self.couple = Linear(2 * d, d, bias=False, generator=generator, dtype=dtype)  # W2
        self.rel = Linear(d, d, bias=False, generator=generator, dtype=dtype)  # W_r
        self.norm = LayerNorm(2 * d, dtype)

    def neighbor_attention(self, ent, rel, mask, generator=None, train=False) -> Tuple[torch.Tensor, torch.Tensor]:
        """Attention weights (..., n) and pair representations (..., n, 2d).

        Rows whose mask is all False get all-zero weights.
        """
        pairs = self.pair(torch.cat([ent, rel], dim=-1))
        logits = nx.leaky_relu(pairs @ self.score_vec, self.slope)
        alpha = nx.softmax_masked_or_zero(logits, mask)
        return nx.dropout(alpha, self.dropout, generator, train), pairs

    def entity_rep(self, e, ent, rel, mask, generator=None, train=False) -> Tuple[torch.Tensor, torch.Tensor]:
        """e + W2 * sum_i alpha_i d_i; an entity without neighbors keeps e."""
        alpha, pairs = self.neighbor_attention(ent, rel, mask, generator, train)
        nbr = (alpha.unsqueeze(-1) * pairs).sum(dim=-2)
        return e + self.couple(nbr), alpha

    def triple_local_rep(self, h, t, r) -> torch.Tensor:
        wr = self.rel(r)
        return self.norm(torch.cat([h + wr, t + wr], dim=-1))
