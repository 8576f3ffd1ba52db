"""Synthetic knowledge graphs whose few-shot relations are two-hop compositions.

Entities are partitioned into type classes. Every background relation maps one
class to another. A rule relation ``r3 := r1 o r2`` holds for ``(a, c)`` exactly
when the background contains ``a -r1-> b -r2-> c``; its task triples are the full
closure of that rule, and its candidate set is the tail class of ``r2``.
"""

from __future__ import annotations

import itertools
import os
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .graph import CANDIDATES_FILE, KNOWN_TAILS_FILE, BACKGROUND_FILE, TASK_FILES, _write_json


class GenerationError(ValueError):
    pass


def _closure(edges_by_rel: Dict[int, List[Tuple[int, int]]], r1: int, r2: int) -> List[Tuple[int, int]]:
    out_r2: Dict[int, List[int]] = {}
    for b, c in edges_by_rel[r2]:
        out_r2.setdefault(b, []).append(c)
    pairs = {(a, c) for a, b in edges_by_rel[r1] for c in out_r2.get(b, ()) if a != c}
    return sorted(pairs)


def generate_synthetic_kg(
    out_dir: str,
    n_entities: int = 200,
    n_relations: int = 12,
    composition_rules: Union[int, Sequence[Tuple[int, int]]] = 10,
    seed: int = 0,
    class_size: int = 50,
    n_test: Optional[int] = None,
    n_valid: int = 1,
    chains_per_rule: int = 15,
    noise_edges: int = 4,
    min_task_size: int = 12,
    range_size: Optional[int] = 10,
) -> dict:
    """Write a dataset directory and return a summary of what was generated.

    ``n_relations`` background relations are created; ``composition_rules`` is either
    the number of rule relations split between train and test (test gets 20%,
    at least one), or an explicit list of ``(r1, r2)`` background-relation bodies.
    ``n_valid`` further rule relations form the validation split. With
    ``range_size`` each background relation only reaches that many entities of its
    range class, so relation-specific neighborhoods differ within a class.
    """
    n_rules = composition_rules if isinstance(composition_rules, int) else len(composition_rules)
    if n_rules < 1:
        raise GenerationError("at least one composition rule is required")
    if n_relations < 2:
        raise GenerationError("need at least two background relations to compose")
    n_classes = n_entities // class_size
    if n_classes < 1:
        raise GenerationError(f"n_entities={n_entities} is smaller than class_size={class_size}")
    if n_test is None:
        n_test = max(1, round(0.2 * n_rules))
    if n_test >= n_rules:
        raise GenerationError("need at least one training rule")

    rng = np.random.default_rng(seed)
    classes = [list(range(c * class_size, (c + 1) * class_size)) for c in range(n_classes)]
    domain = rng.integers(n_classes, size=n_relations)
    range_ = rng.integers(n_classes, size=n_relations)

    total_rules = n_rules + n_valid
    if isinstance(composition_rules, int):
        bodies = [(a, b) for a, b in itertools.permutations(range(n_relations), 2) if range_[a] == domain[b]]
        if len(bodies) < total_rules:
            raise GenerationError(f"only {len(bodies)} composable relation pairs for {total_rules} rules")
        order = rng.permutation(len(bodies))
        bodies = [bodies[i] for i in order]
    else:
        bodies = [tuple(b) for b in composition_rules]
        for a, b in bodies:
            if not (0 <= a < n_relations and 0 <= b < n_relations):
                raise GenerationError(f"rule body {(a, b)} references an unknown relation")
            range_[a] = domain[b]
        while len(bodies) < total_rules:
            a, b = (int(x) for x in rng.choice(n_relations, size=2, replace=False))
            range_[a] = domain[b]
            bodies.append((a, b))

    width = class_size if range_size is None else min(range_size, class_size)
    reach = [sorted(int(e) for e in rng.choice(classes[range_[r]], size=width, replace=False)) for r in range(n_relations)]

    edges: Dict[int, set] = {r: set() for r in range(n_relations)}
    rules: List[Tuple[int, int]] = []
    for r1, r2 in bodies:
        if len(rules) == total_rules:
            break
        heads, mids, tails = classes[domain[r1]], reach[r1], reach[r2]
        for _ in range(chains_per_rule):
            a, b, c = heads[rng.integers(len(heads))], mids[rng.integers(len(mids))], tails[rng.integers(len(tails))]
            if a == c or a == b or b == c:
                continue
            edges[r1].add((a, b))
            edges[r2].add((b, c))
        rules.append((r1, r2))
    if len(rules) < total_rules:
        raise GenerationError("could not place every rule")
    for r in range(n_relations):
        src, dst = classes[domain[r]], reach[r]
        for _ in range(noise_edges):
            a, b = src[rng.integers(len(src))], dst[rng.integers(len(dst))]
            if a != b:
                edges[r].add((a, b))

    edges_by_rel = {r: sorted(es) for r, es in edges.items()}
    tasks = []
    for r1, r2 in rules:
        closure = _closure(edges_by_rel, r1, r2)
        if len(closure) < min_task_size:
            raise GenerationError(
                f"rule {r1}o{r2} has only {len(closure)} instances (< {min_task_size}); raise chains_per_rule"
            )
        tasks.append(closure)

    ent = [f"e{i:04d}" for i in range(n_entities)]
    rel = [f"rel{r:02d}" for r in range(n_relations)]
    rule_names = [f"rule{i:02d}" for i in range(total_rules)]

    background = [(a, r, b) for r in range(n_relations) for a, b in edges_by_rel[r]]
    background = [background[i] for i in rng.permutation(len(background))]

    rule_order = rng.permutation(total_rules)
    test_ids = sorted(int(i) for i in rule_order[:n_test])
    valid_ids = sorted(int(i) for i in rule_order[n_test : n_test + n_valid])
    train_ids = sorted(int(i) for i in rule_order[n_test + n_valid :])

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, BACKGROUND_FILE), "w", encoding="utf-8") as fh:
        for a, r, b in background:
            fh.write(f"{ent[a]}\t{rel[r]}\t{ent[b]}\n")

    def task_payload(ids):
        payload = {}
        for i in ids:
            pairs = tasks[i]
            order = rng.permutation(len(pairs))
            payload[rule_names[i]] = [[ent[pairs[j][0]], rule_names[i], ent[pairs[j][1]]] for j in order]
        return payload

    for which, ids in (("train", train_ids), ("valid", valid_ids), ("test", test_ids)):
        _write_json(os.path.join(out_dir, TASK_FILES[which]), task_payload(ids))
    _write_json(
        os.path.join(out_dir, CANDIDATES_FILE),
        {rule_names[i]: [ent[e] for e in classes[range_[rules[i][1]]]] for i in range(total_rules)},
    )
    known: Dict[str, List[str]] = {}
    for i, pairs in enumerate(tasks):
        for a, c in pairs:
            known.setdefault(ent[a] + rule_names[i], []).append(ent[c])
    _write_json(os.path.join(out_dir, KNOWN_TAILS_FILE), known)

    return {
        "rules": {rule_names[i]: (rel[r1], rel[r2]) for i, (r1, r2) in enumerate(rules)},
        "train": [rule_names[i] for i in train_ids],
        "valid": [rule_names[i] for i in valid_ids],
        "test": [rule_names[i] for i in test_ids],
        "n_background": len(background),
        "task_sizes": {rule_names[i]: len(t) for i, t in enumerate(tasks)},
    }
