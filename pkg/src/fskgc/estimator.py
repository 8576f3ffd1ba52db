"""scikit-learn style facade over dataset loading, training and ranking."""

from __future__ import annotations

from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import TrainConfig
from .evaluation import EvalReport, Evaluator
from .graph import Dataset, Triple, load_dataset
from .model import canonical_support
from .trainer import Checkpoint, Trainer

DatasetLike = Union[str, Dataset]


def check_dataset(data: DatasetLike, add_inverse: bool = True) -> Dataset:
    """Accept a dataset directory or an already loaded :class:`Dataset`."""
    if isinstance(data, Dataset):
        return data
    if isinstance(data, str):
        return load_dataset(data, add_inverse=add_inverse)
    raise TypeError(f"expected a dataset directory or Dataset, got {type(data).__name__}")


def check_name_rows(X, width: int) -> List[Tuple[str, ...]]:
    """Validate an array-like of string rows with exactly ``width`` columns."""
    arr = np.asarray(X, dtype=object)
    if arr.ndim == 1 and arr.size == width and width > 1 and all(isinstance(v, str) for v in arr):
        arr = arr.reshape(1, width)
    if arr.ndim != 2 or arr.shape[1] != width:
        raise ValueError(f"expected rows of {width} names, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError("empty input")
    for row in arr:
        for v in row:
            if not isinstance(v, str):
                raise TypeError(f"names must be strings, got {type(v).__name__}")
    return [tuple(row) for row in arr]


class FewShotCompleter(BaseEstimator):
    """Meta-trained tail predictor for few-shot relations.

    ``fit`` takes a dataset directory (or loaded :class:`Dataset`) and meta-trains on
    its training tasks. ``predict`` takes ``(head, relation)`` name pairs and returns
    the best-scoring candidate tail, using the relation's support triples. ``score``
    returns MRR on a split.
    """

    def __init__(
        self,
        d=32,
        n_layers=2,
        n_heads=2,
        p=4,
        q=2,
        k=3,
        batch_size=16,
        lam=0.4,
        gamma=5.0,
        dropout=0.1,
        leaky_slope=0.2,
        lr=1e-3,
        lr_decay=1.0,
        lr_decay_interval=10000,
        weight_decay=0.0,
        max_steps=5000,
        eval_interval=500,
        pretrain_steps=0,
        mask_rate=0.15,
        joint_masking=True,
        n_negatives=1,
        add_inverse=True,
        precision="float32",
        seed=0,
        no_distant=False,
        no_global=False,
        no_local=False,
    ):
        self.d = d
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.p = p
        self.q = q
        self.k = k
        self.batch_size = batch_size
        self.lam = lam
        self.gamma = gamma
        self.dropout = dropout
        self.leaky_slope = leaky_slope
        self.lr = lr
        self.lr_decay = lr_decay
        self.lr_decay_interval = lr_decay_interval
        self.weight_decay = weight_decay
        self.max_steps = max_steps
        self.eval_interval = eval_interval
        self.pretrain_steps = pretrain_steps
        self.mask_rate = mask_rate
        self.joint_masking = joint_masking
        self.n_negatives = n_negatives
        self.add_inverse = add_inverse
        self.precision = precision
        self.seed = seed
        self.no_distant = no_distant
        self.no_global = no_global
        self.no_local = no_local

    def to_config(self) -> TrainConfig:
        return TrainConfig(**self.get_params()).validate()

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "FewShotCompleter":
        return cls(**cfg.to_dict())

    def fit(self, X: DatasetLike, y=None) -> "FewShotCompleter":
        cfg = self.to_config()
        self.dataset_ = check_dataset(X, cfg.add_inverse)
        trainer = Trainer(self.dataset_, cfg)
        if cfg.pretrain_steps:
            trainer.pretrain(cfg.pretrain_steps)
        self.checkpoint_ = trainer.fit()
        trainer.model.load_state_dict(self.checkpoint_.params)
        trainer.model.eval()
        self.trainer_ = trainer
        self.model_ = trainer.model
        self.log_ = list(self.checkpoint_.log)
        return self

    @classmethod
    def from_checkpoint(cls, checkpoint: Union[str, Checkpoint], data: DatasetLike) -> "FewShotCompleter":
        ckpt = Checkpoint.load(checkpoint) if isinstance(checkpoint, str) else checkpoint
        est = cls.from_config(ckpt.config)
        est.dataset_ = check_dataset(data, ckpt.config.add_inverse)
        est.checkpoint_ = ckpt
        est.trainer_ = Trainer(est.dataset_, ckpt.config, ckpt.restore_model(est.dataset_.store))
        est.model_ = est.trainer_.model
        est.log_ = list(ckpt.log)
        return est

    def _evaluator(self) -> Evaluator:
        check_is_fitted(self, "model_")
        return self.trainer_.evaluator()

    def _support_for(self, rel: int, support: Optional[Dict[str, Sequence]]) -> List[Triple]:
        store, split = self.dataset_
        if support is not None:
            name = store.relation_names[rel]
            if name not in support:
                raise KeyError(f"no support triples given for relation {name!r}")
            return [store.triple_from_names(*row) for row in check_name_rows(support[name], 3)]
        for which in ("test", "valid", "train"):
            tasks = split.tasks(which)
            if rel in tasks:
                return list(tasks[rel][: self.k])
        raise KeyError(f"relation {store.relation_names[rel]!r} has no task triples to draw support from")

    def decision_function(self, X, support: Optional[Dict[str, Sequence]] = None) -> List[Dict[str, float]]:
        """Per query, a ``{candidate tail: score}`` mapping over the relation's candidates."""
        ev = self._evaluator()
        store, split = self.dataset_
        out = []
        for h_name, r_name in check_name_rows(X, 2):
            h, r = store.entity_id(h_name), store.relation_id(r_name)
            sup = canonical_support(self._support_for(r, support))
            cands = list(split.candidates.get(r, ()))
            if not cands:
                raise ValueError(f"relation {r_name!r} has no candidate set")
            with torch.no_grad():
                scores = ev.score_triples(sup, [Triple(h, r, c) for c in cands]).s
            out.append({store.entity_names[c]: float(s) for c, s in zip(cands, scores.tolist())})
        return out

    def predict(self, X, support: Optional[Dict[str, Sequence]] = None) -> np.ndarray:
        """Highest-scoring candidate tail per ``(head, relation)`` row (first on ties)."""
        scored = self.decision_function(X, support)
        return np.array([max(s.items(), key=lambda kv: kv[1])[0] for s in scored], dtype=object)

    def evaluate(self, split: str = "test") -> EvalReport:
        ev = self._evaluator()
        return ev.evaluate(self.dataset_.split.tasks(split), self.k)

    def score(self, X="test", y=None) -> float:
        """MRR on a split of the fitted dataset; ``X`` names the split."""
        if X is None:
            X = "test"
        if X not in ("train", "valid", "test"):
            raise ValueError(f"X must name a split (train/valid/test), got {X!r}")
        return self.evaluate(X).mrr

    def rank(self, X) -> np.ndarray:
        """Filtered rank of the gold tail for each ``(head, relation, tail)`` row."""
        ev = self._evaluator()
        store, split = self.dataset_
        ranks = []
        for row in check_name_rows(X, 3):
            tr = store.triple_from_names(*row)
            ranks.append(ev.rank_query(tr, self._support_for(tr.relation, None)).rank)
        return np.array(ranks, dtype=np.int64)
