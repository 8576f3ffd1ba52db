"""Transformer context encoder over entity-relation sequences."""

from __future__ import annotations

import math
from typing import List, Optional, Tuple

import torch
from torch import nn

from . import numeric as nx
from .context import position_table_size


def uniform_(t: torch.Tensor, bound: float, generator: Optional[torch.Generator]) -> torch.Tensor:
    with torch.no_grad():
        t.copy_(torch.rand(t.shape, generator=generator, dtype=t.dtype) * (2 * bound) - bound)
    return t


class Linear(nn.Module):
    """``y = x W + b`` with W of shape (d_in, d_out), uniform(+-1/sqrt(d_in)) init."""

    def __init__(self, d_in: int, d_out: int, bias: bool = True, generator=None, dtype=torch.float32):
        super().__init__()
        self.weight = nn.Parameter(uniform_(torch.empty(d_in, d_out, dtype=dtype), 1 / math.sqrt(d_in), generator))
        self.bias = nn.Parameter(torch.zeros(d_out, dtype=dtype)) if bias else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = nx.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(nn.Module):
    def __init__(self, d: int, dtype=torch.float32, eps: float = 1e-5):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(d, dtype=dtype))
        self.bias = nn.Parameter(torch.zeros(d, dtype=dtype))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return nx.layer_norm(x, self.gain, self.bias, self.eps)


class TransformerBlock(nn.Module):
    """Pre-norm block: x + MHA(LN(x)), then x + FFN(LN(x)). PAD keys are masked out."""

    def __init__(self, d: int, n_heads: int, dropout: float = 0.0, ff_mult: int = 4, generator=None, dtype=torch.float32):
        super().__init__()
        if d % n_heads:
            raise ValueError(f"d={d} is not divisible by n_heads={n_heads}")
        self.d, self.n_heads, self.dropout = d, n_heads, dropout
        self.ln_attn = LayerNorm(d, dtype)
        self.query = Linear(d, d, generator=generator, dtype=dtype)
        self.key = Linear(d, d, generator=generator, dtype=dtype)
        self.value = Linear(d, d, generator=generator, dtype=dtype)
        self.out = Linear(d, d, generator=generator, dtype=dtype)
        self.ln_ff = LayerNorm(d, dtype)
        self.ff_in = Linear(d, ff_mult * d, generator=generator, dtype=dtype)
        self.ff_out = Linear(ff_mult * d, d, generator=generator, dtype=dtype)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        n, t, _ = x.shape
        return x.view(n, t, self.n_heads, self.d // self.n_heads).transpose(1, 2)

    def forward(self, x, key_mask, generator=None, train=False) -> Tuple[torch.Tensor, torch.Tensor]:
        n, t, d = x.shape
        h = self.ln_attn(x)
        q, k, v = self._heads(self.query(h)), self._heads(self.key(h)), self._heads(self.value(h))
        logits = q @ k.transpose(-2, -1) / math.sqrt(d // self.n_heads)
        attn = nx.softmax_masked(logits, key_mask[:, None, None, :])
        mixed = nx.dropout(attn, self.dropout, generator, train) @ v
        x = x + self.out(mixed.transpose(1, 2).reshape(n, t, d))
        f = torch.relu(self.ff_in(self.ln_ff(x)))
        x = x + self.ff_out(nx.dropout(f, self.dropout, generator, train))
        return x, attn


class GlobalContextEncoder(nn.Module):
    """Element + position embeddings, L transformer blocks, and the masked-token classifier."""

    def __init__(
        self,
        vocab_size: int,
        p: int,
        d: int = 100,
        n_layers: int = 4,
        n_heads: int = 4,
        dropout: float = 0.0,
        generator: Optional[torch.Generator] = None,
        dtype=torch.float32,
    ):
        super().__init__()
        self.p, self.d = p, d
        bound = 1 / math.sqrt(d)
        self.element = nn.Parameter(uniform_(torch.empty(vocab_size, d, dtype=dtype), bound, generator))
        self.position = nn.Parameter(uniform_(torch.empty(position_table_size(p), d, dtype=dtype), bound, generator))
        self.blocks = nn.ModuleList(
            TransformerBlock(d, n_heads, dropout, generator=generator, dtype=dtype) for _ in range(n_layers)
        )
        self.classifier = nn.Parameter(torch.zeros(d, vocab_size, dtype=dtype))

    def embed_sequence(self, tokens: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        """Row i = element[tokens[i]] + position[positions[i]]; PAD position -1 maps to row 0."""
        return nx.embedding_lookup(self.element, tokens) + nx.embedding_lookup(self.position, positions + 1)

    def transformer_forward(self, z, pad_mask, generator=None, train=False) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        maps = []
        for block in self.blocks:
            z, attn = block(z, pad_mask, generator, train)
            maps.append(attn)
        return z, maps

    def forward(self, tokens, positions, pad_mask, generator=None, train=False):
        z = self.embed_sequence(tokens, positions)
        return self.transformer_forward(z, pad_mask, generator, train)

    def triple_global_rep(self, hidden: torch.Tensor) -> torch.Tensor:
        """Mean of the hidden states at the h, r, t slots."""
        s = 2 * self.p
        return hidden[..., s : s + 3, :].mean(dim=-2)

    def mlm_logits(self, hidden: torch.Tensor, rows: torch.Tensor, cols: torch.Tensor) -> torch.Tensor:
        """Classifier logits for the masked slots ``hidden[rows, cols]``."""
        return nx.matmul(hidden[rows, cols], self.classifier)
