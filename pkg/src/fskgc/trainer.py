"""Batch-sampled meta-training, masked-token pretraining and checkpointing."""

from __future__ import annotations

import copy
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import numeric as nx
from .config import TrainConfig
from .context import TRAIN, ContextExtractor, ElementVocab, ExtractionConfig
from .evaluation import EvalReport, Evaluator
from .graph import Dataset, Episode, KnowledgeGraphStore, TaskSplit, Triple, make_episode
from .model import DTYPES, ContextMatcher, SequenceBatch, canonical_support
from .scorer import LossTerms, mask_tokens, masking_loss, ranking_loss

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def build_model(store: KnowledgeGraphStore, cfg: TrainConfig) -> ContextMatcher:
    return ContextMatcher(
        vocab_size=ElementVocab.for_store(store).size,
        p=cfg.p,
        d=cfg.d,
        n_layers=cfg.n_layers,
        n_heads=cfg.n_heads,
        dropout=cfg.dropout,
        leaky_slope=cfg.leaky_slope,
        seed=cfg.seed,
        dtype=DTYPES[cfg.precision],
    )


@dataclass
class Checkpoint:
    params: Dict[str, torch.Tensor]
    optimizer: Dict[str, torch.Tensor]
    step: int
    best_valid_mrr: float
    config: TrainConfig
    log: List[Tuple[int, float, float, Optional[float]]] = field(default_factory=list)

    def save(self, path: str) -> None:
        tensors = {f"param/{k}": v for k, v in self.params.items()}
        tensors.update({f"adam/{k}": v for k, v in self.optimizer.items()})
        meta = {
            "step": self.step,
            "best_valid_mrr": repr(self.best_valid_mrr),
            "config": self.config.to_dict(),
        }
        nx.write_tensors(path, tensors, meta)

    @classmethod
    def load(cls, path: str) -> "Checkpoint":
        tensors, meta = nx.read_tensors(path)
        params = {k[len("param/") :]: v for k, v in tensors.items() if k.startswith("param/")}
        adam = {k[len("adam/") :]: v for k, v in tensors.items() if k.startswith("adam/")}
        return cls(params, adam, int(meta["step"]), float(meta["best_valid_mrr"]), TrainConfig.from_dict(meta["config"]))

    def restore_model(self, store: KnowledgeGraphStore) -> ContextMatcher:
        model = build_model(store, self.config)
        model.load_state_dict({k: v.to(DTYPES[self.config.precision]) for k, v in self.params.items()})
        model.eval()
        return model


def _snapshot(model: ContextMatcher) -> Dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


class Trainer:
    """Owns the model, optimizer and all randomness for one training run."""

    def __init__(self, dataset: Dataset, cfg: TrainConfig, model: Optional[ContextMatcher] = None):
        self.store, self.split = dataset
        self.cfg = cfg.validate()
        self.extractor = ContextExtractor(self.store)
        self.vocab = self.extractor.vocab
        self.model = model if model is not None else build_model(self.store, cfg)
        self.np_rng = np.random.default_rng([cfg.seed, 1])
        self.torch_rng = torch.Generator().manual_seed(cfg.seed + 7919)
        self.optimizer = self._new_optimizer()
        self.step = 0
        self.train_relations = sorted(r for r, ts in self.split.train_tasks.items() if len(ts) > cfg.k)
        self.log: List[Tuple[int, float, float, Optional[float]]] = []

    def _new_optimizer(self) -> nx.Adam:
        c = self.cfg
        return nx.Adam(
            self.model.parameters(),
            lr=c.lr,
            weight_decay=c.weight_decay,
            decay_factor=c.lr_decay,
            decay_interval=c.lr_decay_interval,
        )

    def _names(self) -> Dict[int, str]:
        return {id(p): n for n, p in self.model.named_parameters()}

    @property
    def train_extraction(self) -> ExtractionConfig:
        return ExtractionConfig(self.cfg.p, self.cfg.effective_q, TRAIN)

    def evaluator(self) -> Evaluator:
        c = self.cfg
        return Evaluator(self.model, self.store, self.split, c.p, c.effective_q, c.effective_lam, self.extractor)

    # steps ------------------------------------------------------------------
    def sample_episode(self) -> Episode:
        if not self.train_relations:
            raise TrainingError(f"no training task has more than K={self.cfg.k} triples")
        rel = self.train_relations[self.np_rng.integers(len(self.train_relations))]
        c = self.cfg
        return make_episode(self.split, self.split.train_tasks[rel], c.k, c.batch_size, self.np_rng, c.n_negatives)

    def episode_loss(self, episode: Episode, train: bool = True) -> LossTerms:
        """Forward pass for one episode: (ranking, masking) loss terms, graph attached."""
        c = self.cfg
        lam = c.effective_lam
        support = canonical_support(episode.support)
        triples = support + list(episode.pos_queries) + list(episode.neg_queries)
        xcfg = self.train_extraction
        seqs = [self.extractor.extract_context(t, xcfg, self.np_rng) for t in triples]
        batch = SequenceBatch.collate(seqs)
        if c.no_distant and bool((batch.hops == 2).any()):
            raise TrainingError("distant neighbor in a batch with no_distant set")
        use_mask = c.joint_masking and c.mask_rate > 0
        global_tokens = None
        if use_mask:
            global_tokens, rows, cols, labels = mask_tokens(
                batch.tokens, batch.maskable(include_triple=False), self.vocab.size, self.torch_rng, c.mask_rate
            )
        enc = self.model.encode(
            batch, global_tokens, self.torch_rng, train=train, need_global=lam > 0.0 or use_mask, need_local=lam < 1.0
        )
        k, b = len(support), len(episode.pos_queries)
        sup, pos, neg = enc[:k], enc[k : k + b], enc[k + b :]
        s_pos = self.model.score(sup, pos, lam).s
        s_neg = self.model.score(sup, neg, lam).s
        ranking = ranking_loss(s_pos, s_neg, c.gamma)
        if use_mask and len(labels):
            masking = masking_loss(self.model.global_encoder.mlm_logits(enc.hidden, rows, cols), labels)
        else:
            masking = torch.zeros((), dtype=ranking.dtype)
        return LossTerms(ranking, masking)

    def train_step(self, episode: Optional[Episode] = None) -> LossTerms:
        if episode is None:
            episode = self.sample_episode()
        self.model.train()
        terms = self.episode_loss(episode)
        loss = terms.total
        if not torch.isfinite(loss):
            raise TrainingError(
                f"non-finite loss at step {self.step}: ranking={terms.ranking.item()} masking={terms.masking.item()} "
                f"relation={episode.relation}"
            )
        nx.backward(loss)
        self.optimizer.step()
        self.step += 1
        return LossTerms(terms.ranking.detach(), terms.masking.detach())

    def pretrain_step(self, triples: Sequence[Triple]) -> float:
        """One masked-token step on ``triples``; all real tokens are maskable."""
        c = self.cfg
        self.model.train()
        seqs = [self.extractor.extract_context(t, self.train_extraction, self.np_rng) for t in triples]
        batch = SequenceBatch.collate(seqs)
        tokens, rows, cols, labels = mask_tokens(
            batch.tokens, batch.maskable(include_triple=True), self.vocab.size, self.torch_rng, c.mask_rate
        )
        if not len(labels):
            return float("nan")
        enc = self.model.encode(batch, tokens, self.torch_rng, train=True, need_local=False)
        loss = masking_loss(self.model.global_encoder.mlm_logits(enc.hidden, rows, cols), labels)
        nx.backward(loss)
        self.optimizer.step()
        return loss.item()

    def pretraining_pool(self) -> List[Triple]:
        pool = list(self.store.background_triples)
        for rel in sorted(self.split.train_tasks):
            pool.extend(self.split.train_tasks[rel])
        return pool

    def pretrain(self, steps: int, callback: Optional[Callable[[int, float], None]] = None) -> List[float]:
        pool = self.pretraining_pool()
        if not pool:
            raise TrainingError("no triples available for pretraining")
        losses = []
        for i in range(steps):
            idx = self.np_rng.integers(len(pool), size=self.cfg.batch_size)
            loss = self.pretrain_step([pool[j] for j in idx])
            losses.append(loss)
            if callback is not None:
                callback(i + 1, loss)
        # main training starts with fresh optimizer moments
        self.optimizer = self._new_optimizer()
        return losses

    def masking_loss_on(self, triples: Sequence[Triple], seed: int = 0) -> float:
        """Eval-mode masked-token loss on ``triples`` with a fixed corruption draw."""
        c = self.cfg
        gen = torch.Generator().manual_seed(seed)
        seqs = [self.extractor.extract_context(t, ExtractionConfig(c.p, c.effective_q)) for t in triples]
        batch = SequenceBatch.collate(seqs)
        tokens, rows, cols, labels = mask_tokens(batch.tokens, batch.maskable(True), self.vocab.size, gen, c.mask_rate)
        self.model.eval()
        with torch.no_grad():
            enc = self.model.encode(batch, tokens, need_local=False)
            return masking_loss(self.model.global_encoder.mlm_logits(enc.hidden, rows, cols), labels).item()

    # fitting ------------------------------------------------------------------
    def validate(self) -> EvalReport:
        return self.evaluator().evaluate(self.split.valid_tasks, self.cfg.k)

    def checkpoint(self, best_mrr: float) -> Checkpoint:
        return Checkpoint(
            _snapshot(self.model),
            {k: v.detach().clone() for k, v in self.optimizer.state_tensors(self._names()).items()},
            self.step,
            best_mrr,
            self.cfg,
            list(self.log),
        )

    def fit(self, log_fn: Optional[Callable[[str], None]] = None) -> Checkpoint:
        if not self.split.valid_tasks:
            raise TrainingError("validation split is empty")
        c = self.cfg
        best_mrr = self.validate().mrr
        best = self.checkpoint(best_mrr)
        self.log.append((self.step, math.nan, math.nan, best_mrr))
        _emit(log_fn, self.log[-1])
        while self.step < c.max_steps:
            terms = self.train_step()
            val = None
            if self.step % c.eval_interval == 0 or self.step == c.max_steps:
                val = self.validate().mrr
            self.log.append((self.step, terms.ranking.item(), terms.masking.item(), val))
            if val is not None:
                _emit(log_fn, self.log[-1])
                if val > best_mrr:
                    best_mrr = val
                    best = self.checkpoint(best_mrr)
        best.log = list(self.log)
        return best


def _emit(log_fn, row) -> None:
    if log_fn is not None:
        log_fn(format_log_row(row))


def format_log_row(row) -> str:
    step, rank, mask, val = row
    fmt = lambda v: "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6f}"
    return f"{step}\t{fmt(rank)}\t{fmt(mask)}\t{fmt(val)}"


def write_log(path: str, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step\tranking_loss\tmasking_loss\tval_mrr\n")
        for row in rows:
            fh.write(format_log_row(row) + "\n")


def pretrain_mlm(
    dataset: Dataset, steps: int, cfg: TrainConfig, model: Optional[ContextMatcher] = None
) -> Tuple[ContextMatcher, List[float]]:
    """Masked-token pretraining on background and training-task triples."""
    trainer = Trainer(dataset, cfg, model)
    losses = trainer.pretrain(steps)
    return trainer.model, losses


def fit(
    dataset: Dataset, cfg: TrainConfig, init: Optional[Checkpoint] = None, log_fn=None
) -> Tuple[Checkpoint, Trainer]:
    """Pretrain (if configured), meta-train, and return the best-validation checkpoint."""
    trainer = Trainer(dataset, cfg)
    if init is not None:
        trainer.model.load_state_dict(init.params)
    if cfg.pretrain_steps:
        trainer.pretrain(cfg.pretrain_steps)
    return trainer.fit(log_fn), trainer
