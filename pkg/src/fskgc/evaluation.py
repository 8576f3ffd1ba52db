"""Episodic ranking evaluation, metric reports, degree profiles and attention dumps."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import torch

from .context import EVAL, ContextExtractor, ExtractionConfig
from .graph import KnowledgeGraphStore, TaskSplit, Triple, candidates_for
from .model import ContextMatcher, Encoded, SequenceBatch, canonical_support

logger = logging.getLogger(__name__)

HITS_AT = (1, 5, 10)


@dataclass
class RankResult:
    query: Triple
    rank: int
    candidate_count: int
    gold_score: float


@dataclass
class EvalReport:
    mrr: float
    hits1: float
    hits5: float
    hits10: float
    n_queries: int
    per_relation: Dict[int, "EvalReport"] = field(default_factory=dict)
    skipped: List[int] = field(default_factory=list)
    avg_head_neighbors: Optional[float] = None
    avg_tail_neighbors: Optional[float] = None

    @classmethod
    def from_ranks(cls, ranks: Sequence[int]) -> "EvalReport":
        if len(ranks) == 0:
            return cls(0.0, 0.0, 0.0, 0.0, 0)
        r = np.asarray(ranks, dtype=np.float64)
        if (r < 1).any():
            raise ValueError("ranks must be >= 1")
        return cls(
            mrr=float(np.mean(1.0 / r)),
            hits1=float(np.mean(r <= 1)),
            hits5=float(np.mean(r <= 5)),
            hits10=float(np.mean(r <= 10)),
            n_queries=len(r),
        )

    def metrics_row(self) -> str:
        return f"{self.mrr:.6f}\t{self.hits1:.6f}\t{self.hits5:.6f}\t{self.hits10:.6f}\t{self.n_queries}"

    def to_tsv(self, store: Optional[KnowledgeGraphStore] = None, per_relation: bool = False) -> str:
        lines = ["mrr\thits@1\thits@5\thits@10\tqueries", self.metrics_row()]
        if per_relation and self.per_relation:
            lines.append("")
            lines.append("relation\t#Avg.H\t#Avg.T\tMRR\tHits@10")
            for rel, sub in sorted(self.per_relation.items()):
                name = store.relation_names[rel] if store is not None else str(rel)
                lines.append(
                    f"{name}\t{sub.avg_head_neighbors:.1f}\t{sub.avg_tail_neighbors:.1f}\t{sub.mrr:.3f}\t{sub.hits10:.3f}"
                )
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "mrr": self.mrr,
            "hits@1": self.hits1,
            "hits@5": self.hits5,
            "hits@10": self.hits10,
            "queries": self.n_queries,
            "skipped": list(self.skipped),
            "per_relation": {str(k): v.to_dict() for k, v in sorted(self.per_relation.items())},
        }


def rank_of_gold(scores: torch.Tensor, gold_index: int, pessimistic: bool = False) -> int:
    """1 + number of candidates scoring above the gold one (ties count with ``pessimistic``)."""
    gold = scores[gold_index]
    if pessimistic:
        return int((scores >= gold).sum().item())
    return 1 + int((scores > gold).sum().item())


class Evaluator:
    """Ranks candidate tails for query triples with eval-mode (deterministic) contexts."""

    def __init__(
        self,
        model: ContextMatcher,
        store: KnowledgeGraphStore,
        split: TaskSplit,
        p: int,
        q: int,
        lam: float,
        extractor: Optional[ContextExtractor] = None,
        chunk: int = 2048,
        pessimistic: bool = False,
    ):
        self.model, self.store, self.split = model, store, split
        self.cfg = ExtractionConfig(p, q, EVAL)
        self.lam = lam
        self.extractor = extractor or ContextExtractor(store)
        self.chunk = chunk
        self.pessimistic = pessimistic

    def encode(self, triples: Sequence[Triple]) -> Encoded:
        lam = self.lam
        parts = []
        with torch.no_grad():
            for i in range(0, len(triples), self.chunk):
                seqs = [self.extractor.extract_context(t, self.cfg) for t in triples[i : i + self.chunk]]
                parts.append(
                    self.model.encode(SequenceBatch.collate(seqs), need_global=lam > 0.0, need_local=lam < 1.0)
                )
        cat = lambda xs: None if xs[0] is None else torch.cat(xs)
        return Encoded(cat([e.global_rep for e in parts]), cat([e.local_rep for e in parts]))

    def score_triples(self, support: Sequence[Triple], queries: Sequence[Triple], support_enc: Optional[Encoded] = None):
        if support_enc is None:
            support_enc = self.encode(canonical_support(support))
        with torch.no_grad():
            return self.model.score(support_enc, self.encode(queries), self.lam)

    def rank_query(self, query: Triple, support: Sequence[Triple], support_enc: Optional[Encoded] = None) -> RankResult:
        h, r, t = query
        cands = candidates_for(self.split, r, h, t)
        if not cands:
            raise ValueError(f"empty candidate set for {query}")
        scores = self.score_triples(support, [Triple(h, r, c) for c in cands], support_enc).s
        gold = cands.index(t)
        return RankResult(query, rank_of_gold(scores, gold, self.pessimistic), len(cands), float(scores[gold]))

    def evaluate(self, tasks: Mapping[int, Sequence[Triple]], k: int, trace=None) -> EvalReport:
        """First K triples of each task are the support; every remaining triple is a query."""
        was_training = self.model.training
        self.model.eval()
        all_ranks, per_rel, skipped = [], {}, []
        try:
            for rel in sorted(tasks):
                triples = list(tasks[rel])
                if len(triples) <= k:
                    logger.warning("task %d has %d triples (K=%d); skipped", rel, len(triples), k)
                    skipped.append(rel)
                    continue
                support = triples[:k]
                support_enc = self.encode(canonical_support(support))
                ranks = []
                for query in triples[k:]:
                    res = self.rank_query(query, support, support_enc)
                    ranks.append(res.rank)
                    if trace is not None:
                        trace(res)
                sub = EvalReport.from_ranks(ranks)
                sub.avg_head_neighbors = float(np.mean([self.store.neighbor_count(t.head) for t in support]))
                sub.avg_tail_neighbors = float(np.mean([self.store.neighbor_count(t.tail) for t in support]))
                per_rel[rel] = sub
                all_ranks.extend(ranks)
        finally:
            self.model.train(was_training)
        report = EvalReport.from_ranks(all_ranks)
        report.per_relation, report.skipped = per_rel, skipped
        return report


def evaluate(
    model: ContextMatcher,
    store: KnowledgeGraphStore,
    split: TaskSplit,
    tasks: Mapping[int, Sequence[Triple]],
    k: int,
    p: int,
    q: int,
    lam: float,
    **kwargs,
) -> EvalReport:
    return Evaluator(model, store, split, p, q, lam, **kwargs).evaluate(tasks, k)


# degree profile -------------------------------------------------------------


@dataclass
class DegreeProfile:
    histogram: Dict[int, int]
    n_entities: int
    long_tail_threshold: int = 10

    @property
    def long_tail_fraction(self) -> float:
        if not self.n_entities:
            return 0.0
        return sum(c for deg, c in self.histogram.items() if deg < self.long_tail_threshold) / self.n_entities

    def fraction_with(self, degree: int) -> float:
        return self.histogram.get(degree, 0) / self.n_entities if self.n_entities else 0.0

    def to_tsv(self) -> str:
        lines = ["degree\tentities"] + [f"{d}\t{c}" for d, c in sorted(self.histogram.items())]
        lines.append(f"# long_tail_fraction(<{self.long_tail_threshold})\t{self.long_tail_fraction:.6f}")
        return "\n".join(lines) + "\n"


def degree_profile(store: KnowledgeGraphStore, long_tail_threshold: int = 10) -> DegreeProfile:
    """Histogram of entities by number of background edges touching them."""
    counts = Counter(store.neighbor_count(e) for e in range(store.n_entities))
    return DegreeProfile(dict(sorted(counts.items())), store.n_entities, long_tail_threshold)


# attention dumps -------------------------------------------------------------


def dump_attention(
    model: ContextMatcher,
    store: KnowledgeGraphStore,
    triple: Triple,
    p: int,
    q: int,
    support: Sequence[Triple] = (),
    local: bool = True,
    extractor: Optional[ContextExtractor] = None,
) -> str:
    """Tab-separated self-attention matrices (one block per layer and head), local
    neighbor weights, and support weights when a support set is given."""
    extractor = extractor or ContextExtractor(store)
    cfg = ExtractionConfig(p, q, EVAL)
    seq = extractor.extract_context(triple, cfg)
    labels = [extractor.vocab.label(int(tok), store) for tok in seq.tokens]
    model.eval()
    with torch.no_grad():
        enc = model.encode(SequenceBatch.collate([seq]))
    lines = []
    for layer, attn in enumerate(enc.attention):
        for head in range(attn.shape[1]):
            lines.append(f"## layer {layer} head {head}")
            lines.append("\t" + "\t".join(labels))
            mat = attn[0, head]
            for i, lab in enumerate(labels):
                lines.append(lab + "\t" + "\t".join(f"{v:.6f}" for v in mat[i].tolist()))
    if local:
        lines.append("## local neighbor weights")
        lines.append("side\tentity\trelation\talpha")
        for side, pairs, alpha in (
            ("head", seq.head_pairs(), enc.head_alpha[0]),
            ("tail", seq.tail_pairs(), enc.tail_alpha[0]),
        ):
            slots = _pair_slots(seq, side)
            for (ent, rel, hop), j in zip(pairs, slots):
                if hop != 1:
                    continue
                lines.append(
                    f"{side}\t{extractor.vocab.label(ent, store)}\t{extractor.vocab.label(rel, store)}\t{float(alpha[j]):.6f}"
                )
    if support:
        sup = canonical_support(support)
        ev = Evaluator(model, store, TaskSplit(), p, q, 0.5, extractor)
        br = ev.score_triples(sup, [triple])
        lines.append("## support weights")
        lines.append("support\tglobal\tlocal")
        for i, s in enumerate(sup):
            lines.append(f"{','.join(store.triple_names(s))}\t{float(br.c_global[0, i]):.6f}\t{float(br.c_local[0, i]):.6f}")
    return "\n".join(lines) + "\n"


def _pair_slots(seq, side: str) -> List[int]:
    """Pair indices (0..p-1) of the real pairs on one side, in layout order."""
    if side == "head":
        return [j for j in range(seq.p) if seq.pad_mask[2 * j]]
    base = 2 * seq.p + 3
    return [j for j in range(seq.p) if seq.pad_mask[base + 2 * j]]
