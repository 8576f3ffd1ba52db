"""Background graph store, few-shot task split and episode sampling.

A dataset directory follows the GMatching / NELL-One layout::

    path_graph          head<TAB>relation<TAB>tail, one background triple per line
    train_tasks.json    {relation: [[head, relation, tail], ...]}
    dev_tasks.json
    test_tasks.json
    rel2candidates.json {relation: [entity, ...]}
    e1rel_e2.json       {head + relation: [tail, ...]}
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

BACKGROUND_FILE = "path_graph"
TASK_FILES = {
    "train": "train_tasks.json",
    "valid": "dev_tasks.json",
    "test": "test_tasks.json",
}
CANDIDATES_FILE = "rel2candidates.json"
KNOWN_TAILS_FILE = "e1rel_e2.json"
DATASET_FILES = (BACKGROUND_FILE, *TASK_FILES.values(), CANDIDATES_FILE, KNOWN_TAILS_FILE)

INVERSE_SUFFIX = "_inv"


class DatasetError(Exception):
    """Raised for missing or malformed dataset files."""


class EpisodeError(Exception):
    """Raised when a task cannot produce a well-formed episode."""


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


class KnowledgeGraphStore:
    """Interned vocabularies plus in/out adjacency over the background graph.

    ``in_adj[e]`` holds ``(neighbor, relation)`` for every edge ``neighbor -relation-> e``
    and ``out_adj[e]`` holds ``(relation, neighbor)`` for every edge ``e -relation-> neighbor``.
    With inverse augmentation each background triple ``(h, r, t)`` also contributes the
    edge ``(t, r_inv, h)``.
    """

    def __init__(self, add_inverse: bool = True):
        self.add_inverse = add_inverse
        self.entity_names: List[str] = []
        self.relation_names: List[str] = []
        self._entity_ids: Dict[str, int] = {}
        self._relation_ids: Dict[str, int] = {}
        self.inverse_of: Dict[int, int] = {}
        self.background_triples: List[Triple] = []
        self.in_adj: List[List[Tuple[int, int]]] = []
        self.out_adj: List[List[Tuple[int, int]]] = []

    @classmethod
    def from_triples(cls, triples: Iterable[Tuple[str, str, str]], add_inverse: bool = True) -> "KnowledgeGraphStore":
        """Store over named background triples (duplicates dropped)."""
        store = cls(add_inverse)
        ids = [
            Triple(store.intern_entity(h), store.intern_relation(r), store.intern_entity(t))
            for h, r, t in _dedupe(triples)
        ]
        store.build_adjacency(ids)
        return store

    # interning ---------------------------------------------------------
    def intern_entity(self, name: str) -> int:
        idx = self._entity_ids.get(name)
        if idx is None:
            idx = len(self.entity_names)
            self._entity_ids[name] = idx
            self.entity_names.append(name)
        return idx

    def intern_relation(self, name: str) -> int:
        idx = self._relation_ids.get(name)
        if idx is None:
            idx = len(self.relation_names)
            self._relation_ids[name] = idx
            self.relation_names.append(name)
        return idx

    def entity_id(self, name: str) -> int:
        try:
            return self._entity_ids[name]
        except KeyError:
            raise KeyError(f"unknown entity {name!r}") from None

    def relation_id(self, name: str) -> int:
        try:
            return self._relation_ids[name]
        except KeyError:
            raise KeyError(f"unknown relation {name!r}") from None

    @property
    def n_entities(self) -> int:
        return len(self.entity_names)

    @property
    def n_relations(self) -> int:
        return len(self.relation_names)

    def triple_from_names(self, head: str, relation: str, tail: str) -> Triple:
        return Triple(self.entity_id(head), self.relation_id(relation), self.entity_id(tail))

    def triple_names(self, triple: Triple) -> Tuple[str, str, str]:
        h, r, t = triple
        return self.entity_names[h], self.relation_names[r], self.entity_names[t]

    # adjacency ---------------------------------------------------------
    def build_adjacency(self, triples: Iterable[Triple]) -> None:
        """(Re)build adjacency from ``triples``; they become the background graph."""
        self.background_triples = list(triples)
        if self.add_inverse:
            for rel in sorted({tr.relation for tr in self.background_triples}):
                if rel not in self.inverse_of:
                    inv = self.intern_relation(self.relation_names[rel] + INVERSE_SUFFIX)
                    self.inverse_of[rel] = inv
        n = self.n_entities
        self.in_adj = [[] for _ in range(n)]
        self.out_adj = [[] for _ in range(n)]
        for h, r, t in self.background_triples:
            self.out_adj[h].append((r, t))
            self.in_adj[t].append((h, r))
            if self.add_inverse:
                inv = self.inverse_of[r]
                self.out_adj[t].append((inv, h))
                self.in_adj[h].append((t, inv))

    def _ensure_adjacency_size(self) -> None:
        while len(self.in_adj) < self.n_entities:
            self.in_adj.append([])
            self.out_adj.append([])

    @property
    def degree(self) -> List[int]:
        return [len(i) + len(o) for i, o in zip(self.in_adj, self.out_adj)]

    def neighbor_count(self, entity: int) -> int:
        """Number of background edges touching ``entity`` (inverse copies not double counted)."""
        deg = len(self.in_adj[entity]) + len(self.out_adj[entity])
        return deg // 2 if self.add_inverse else deg

    def adjacency_triples(self, side: str = "in") -> List[Triple]:
        """Rebuild the edge list from one adjacency index (inverse edges included)."""
        if side == "in":
            return [Triple(e, r, t) for t, pairs in enumerate(self.in_adj) for e, r in pairs]
        if side == "out":
            return [Triple(h, r, e) for h, pairs in enumerate(self.out_adj) for r, e in pairs]
        raise ValueError(f"side must be 'in' or 'out', got {side!r}")


@dataclass
class TaskSplit:
    train_tasks: Dict[int, List[Triple]] = field(default_factory=dict)
    valid_tasks: Dict[int, List[Triple]] = field(default_factory=dict)
    test_tasks: Dict[int, List[Triple]] = field(default_factory=dict)
    candidates: Dict[int, List[int]] = field(default_factory=dict)
    known_tails: Dict[Tuple[int, int], FrozenSet[int]] = field(default_factory=dict)

    def tasks(self, which: str) -> Dict[int, List[Triple]]:
        try:
            return {"train": self.train_tasks, "valid": self.valid_tasks, "test": self.test_tasks}[which]
        except KeyError:
            raise ValueError(f"unknown split {which!r}") from None

    def known(self, head: int, relation: int) -> FrozenSet[int]:
        return self.known_tails.get((head, relation), frozenset())

    def check_disjoint(self) -> None:
        names = ("train", "valid", "test")
        sets = [set(self.tasks(n)) for n in names]
        for i in range(3):
            for j in range(i + 1, 3):
                overlap = sets[i] & sets[j]
                if overlap:
                    raise DatasetError(
                        f"{names[i]} and {names[j]} task relations overlap: {sorted(overlap)}"
                    )


class Dataset(NamedTuple):
    store: KnowledgeGraphStore
    split: TaskSplit


# loading -----------------------------------------------------------------


def _read_json(path: str):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{os.path.basename(path)}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc


def _read_background(path: str) -> List[Tuple[str, str, str]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n\r")
            if not line.strip():
                continue
            parts = line.split("\t") if "\t" in line else line.split()
            if len(parts) != 3 or not all(p.strip() for p in parts):
                raise DatasetError(f"{BACKGROUND_FILE}:{lineno}: expected 3 fields, got {len(parts)}")
            out.append(tuple(p.strip() for p in parts))
    return out


def _dedupe(items: Iterable) -> list:
    return list(dict.fromkeys(items))


def load_dataset(dir_path: str, add_inverse: bool = True) -> Dataset:
    """Load a few-shot dataset directory into a store and task split."""
    for name in DATASET_FILES:
        if not os.path.isfile(os.path.join(dir_path, name)):
            raise DatasetError(f"missing dataset file: {name}")

    store = KnowledgeGraphStore(add_inverse=add_inverse)
    raw_bg = _dedupe(_read_background(os.path.join(dir_path, BACKGROUND_FILE)))
    background = []
    for h, r, t in raw_bg:
        hid = store.intern_entity(h)
        rid = store.intern_relation(r)
        background.append(Triple(hid, rid, store.intern_entity(t)))
    # inverse ids follow the forward background relations
    store.build_adjacency(background)

    split = TaskSplit()
    for which, fname in TASK_FILES.items():
        raw = _read_json(os.path.join(dir_path, fname))
        if not isinstance(raw, dict):
            raise DatasetError(f"{fname}: expected a JSON object")
        tasks = split.tasks(which)
        for rel_name, triples in raw.items():
            rid = store.intern_relation(rel_name)
            parsed = []
            for k, tr in enumerate(triples):
                if not isinstance(tr, (list, tuple)) or len(tr) != 3:
                    raise DatasetError(f"{fname}: task {rel_name!r} entry {k} is not a triple")
                h, r, t = tr
                if r != rel_name:
                    raise DatasetError(f"{fname}: task {rel_name!r} entry {k} has relation {r!r}")
                parsed.append(Triple(store.intern_entity(h), rid, store.intern_entity(t)))
            tasks[rid] = _dedupe(parsed)

    raw_cands = _read_json(os.path.join(dir_path, CANDIDATES_FILE))
    for rel_name, names in raw_cands.items():
        rid = store.intern_relation(rel_name)
        split.candidates[rid] = _dedupe(store.intern_entity(n) for n in names)

    raw_known = _read_json(os.path.join(dir_path, KNOWN_TAILS_FILE))
    known: Dict[Tuple[int, int], set] = {}
    for which in TASK_FILES:
        for rid, triples in split.tasks(which).items():
            for h, r, t in triples:
                known.setdefault((h, r), set()).add(t)
    for (h, r), tails in known.items():
        key = store.entity_names[h] + store.relation_names[r]
        for name in raw_known.get(key, ()):
            tails.add(store.intern_entity(name))
    split.known_tails = {k: frozenset(v) for k, v in known.items()}

    store._ensure_adjacency_size()
    split.check_disjoint()
    logger.info(
        "loaded %s: %d entities, %d relations, %d background triples, %d/%d/%d tasks",
        dir_path, store.n_entities, store.n_relations, len(store.background_triples),
        len(split.train_tasks), len(split.valid_tasks), len(split.test_tasks),
    )
    return Dataset(store, split)


def save_dataset(dir_path: str, store: KnowledgeGraphStore, split: TaskSplit) -> None:
    """Write ``store`` and ``split`` back out in the directory layout read by ``load_dataset``."""
    os.makedirs(dir_path, exist_ok=True)
    ent, rel = store.entity_names, store.relation_names
    with open(os.path.join(dir_path, BACKGROUND_FILE), "w", encoding="utf-8") as fh:
        for h, r, t in store.background_triples:
            fh.write(f"{ent[h]}\t{rel[r]}\t{ent[t]}\n")
    for which, fname in TASK_FILES.items():
        payload = {
            rel[r]: [[ent[h], rel[rr], ent[t]] for h, rr, t in triples]
            for r, triples in split.tasks(which).items()
        }
        _write_json(os.path.join(dir_path, fname), payload)
    _write_json(
        os.path.join(dir_path, CANDIDATES_FILE),
        {rel[r]: [ent[e] for e in cands] for r, cands in split.candidates.items()},
    )
    _write_json(
        os.path.join(dir_path, KNOWN_TAILS_FILE),
        {ent[h] + rel[r]: [ent[e] for e in sorted(tails)] for (h, r), tails in split.known_tails.items()},
    )


def _write_json(path: str, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, ensure_ascii=False)
        fh.write("\n")


# candidates and episodes -------------------------------------------------


def candidates_for(split: TaskSplit, relation: int, head: int, true_tail: int) -> List[int]:
    """Filtered candidate tails: the relation's candidates minus other known true tails."""
    if relation not in split.candidates:
        raise KeyError(f"no candidate list for relation {relation}")
    known = split.known(head, relation)
    out = [c for c in split.candidates[relation] if c == true_tail or c not in known]
    if true_tail not in out:
        logger.warning("gold tail %d missing from candidates of relation %d; appended", true_tail, relation)
        out.append(true_tail)
    return out


def negative_pool(split: TaskSplit, triple: Triple) -> List[int]:
    h, r, t = triple
    known = split.known(h, r)
    return [c for c in split.candidates.get(r, ()) if c != t and c not in known]


@dataclass(frozen=True)
class Episode:
    relation: int
    support: Tuple[Triple, ...]
    pos_queries: Tuple[Triple, ...]
    neg_queries: Tuple[Triple, ...]


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def make_episode(
    split: TaskSplit,
    task_triples: Sequence[Triple],
    k: int,
    batch_size: int,
    rng,
    n_negatives: int = 1,
    max_retries: int = 10,
) -> Episode:
    """Sample K support triples, B positive queries and matched polluted-tail negatives.

    ``rng`` is a numpy Generator or a seed.
    """
    rng = _as_rng(rng)
    n = len(task_triples)
    if n <= k:
        raise EpisodeError(f"task has {n} triples, needs more than K={k}")
    relation = task_triples[0].relation
    order = rng.permutation(n)
    support = tuple(task_triples[i] for i in order[:k])
    remainder = order[k:]
    replace = len(remainder) < batch_size
    picks = rng.choice(remainder, size=batch_size, replace=replace)

    pos, neg = [], []
    for idx in picks:
        query = task_triples[idx]
        pool = negative_pool(split, query)
        retries = 0
        while not pool:
            retries += 1
            if retries > max_retries:
                raise EpisodeError(f"no negative candidates for queries of relation {relation}")
            query = task_triples[rng.choice(remainder)]
            pool = negative_pool(split, query)
        for _ in range(n_negatives):
            pos.append(query)
            neg.append(Triple(query.head, query.relation, pool[rng.integers(len(pool))]))
    return Episode(relation, support, tuple(pos), tuple(neg))


# summaries -----------------------------------------------------------------


def dataset_summary(dataset: Dataset) -> Dict[str, int]:
    """Entity/relation/task counts; relations exclude the added inverse copies."""
    store, split = dataset
    inverse = set(store.inverse_of.values())
    return {
        "entities": store.n_entities,
        "relations": sum(1 for r in range(store.n_relations) if r not in inverse),
        "background_triples": len(store.background_triples),
        "train_tasks": len(split.train_tasks),
        "valid_tasks": len(split.valid_tasks),
        "test_tasks": len(split.test_tasks),
    }


def dataset_fingerprint(dir_path: str) -> str:
    """sha256 over the dataset files, in a fixed order."""
    digest = hashlib.sha256()
    for name in DATASET_FILES:
        digest.update(name.encode("utf-8") + b"\0")
        with open(os.path.join(dir_path, name), "rb") as fh:
            for block in iter(lambda: fh.read(1 << 20), b""):
                digest.update(block)
    return digest.hexdigest()


def bundled_fixture() -> str:
    """Path of the small dataset shipped with the package (200 background triples)."""
    from importlib import resources

    return str(resources.files("fskgc").joinpath("data").joinpath("fixture"))
