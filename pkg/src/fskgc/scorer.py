"""Support-set aggregation, query scoring and training losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import torch

from . import numeric as nx
from .context import ConfigError, ElementVocab


@dataclass
class ScoreBreakdown:
    s_global: Optional[torch.Tensor]
    s_local: Optional[torch.Tensor]
    s: torch.Tensor
    c_global: Optional[torch.Tensor] = None
    c_local: Optional[torch.Tensor] = None


@dataclass
class LossTerms:
    ranking: torch.Tensor
    masking: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return total_loss(self.ranking, self.masking)


def relation_rep(query: torch.Tensor, support: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Query-conditioned aggregate of support representations.

    ``query`` is (D,) or (M, D), ``support`` is (K, D). Weights are a softmax over the
    inner products <query, support_i>.
    """
    if support.dim() != 2 or query.shape[-1] != support.shape[-1] or support.shape[0] < 1:
        raise nx.ShapeError(f"relation_rep: incompatible shapes {tuple(query.shape)}, {tuple(support.shape)}")
    weights = torch.softmax(query @ support.T, dim=-1)
    return weights @ support, weights


def check_tradeoff(lam: float) -> float:
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must be in [0, 1], got {lam}")
    return lam


def score(query_g, query_l, g_r, l_r, lam: float) -> ScoreBreakdown:
    """s = lam * <G_r, G(q)> + (1 - lam) * <L_r, L(q)>.

    A side whose weight is exactly zero may be passed as None and is skipped.
    """
    check_tradeoff(lam)
    s_global = (g_r * query_g).sum(-1) if lam > 0.0 else None
    s_local = (l_r * query_l).sum(-1) if lam < 1.0 else None
    if s_local is None:
        s = s_global
    elif s_global is None:
        s = s_local
    else:
        s = lam * s_global + (1.0 - lam) * s_local
    return ScoreBreakdown(s_global, s_local, s)


def ranking_loss(s_pos: torch.Tensor, s_neg: torch.Tensor, gamma: float) -> torch.Tensor:
    """Mean hinge max(0, gamma + s_neg - s_pos) over the batch."""
    if gamma <= 0:
        raise ConfigError(f"margin must be positive, got {gamma}")
    s_pos, s_neg = torch.as_tensor(s_pos), torch.as_tensor(s_neg)
    return torch.relu(gamma + s_neg - s_pos).mean()


def masking_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return nx.cross_entropy(logits, labels)


def total_loss(ranking: torch.Tensor, masking: torch.Tensor) -> torch.Tensor:
    return ranking + masking


def mask_tokens(
    tokens: torch.Tensor,
    maskable: torch.Tensor,
    vocab_size: int,
    generator: Optional[torch.Generator],
    rate: float = 0.15,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """BERT-style corruption of a token batch.

    Each maskable slot is selected with probability ``rate``; a selected slot becomes
    MASK 80% of the time, a random real token 10%, and stays unchanged 10%.
    Returns (corrupted tokens, row idx, col idx, labels) of the selected slots.
    """
    u = torch.rand(tokens.shape, generator=generator, dtype=torch.float64)
    selected = maskable & (u < rate)
    action = torch.rand(tokens.shape, generator=generator, dtype=torch.float64)
    random_tok = torch.randint(ElementVocab.N_SPECIAL, vocab_size, tokens.shape, generator=generator)
    out = tokens.clone()
    to_mask = selected & (action < 0.8)
    to_rand = selected & (action >= 0.8) & (action < 0.9)
    out[to_mask] = ElementVocab.MASK
    out[to_rand] = random_tok[to_rand]
    rows, cols = selected.nonzero(as_tuple=True)
    return out, rows, cols, tokens[rows, cols]
