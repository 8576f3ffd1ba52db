import json
import os

import numpy as np
import pytest
import torch

from fskgc.graph import load_dataset

torch.set_num_threads(1)

FIXTURE_EDGES = [("a", "r1", "b"), ("b", "r2", "c"), ("a", "r3", "c")]


def write_dataset(path, background, train=None, valid=None, test=None, candidates=None, known=None):
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "path_graph"), "w", encoding="utf-8") as fh:
        for h, r, t in background:
            fh.write(f"{h}\t{r}\t{t}\n")
    for name, tasks in (("train_tasks.json", train), ("dev_tasks.json", valid), ("test_tasks.json", test)):
        with open(os.path.join(path, name), "w", encoding="utf-8") as fh:
            json.dump(tasks or {}, fh)
    with open(os.path.join(path, "rel2candidates.json"), "w", encoding="utf-8") as fh:
        json.dump(candidates or {}, fh)
    with open(os.path.join(path, "e1rel_e2.json"), "w", encoding="utf-8") as fh:
        json.dump(known or {}, fh)
    return str(path)


@pytest.fixture
def three_edge_dir(tmp_path):
    return write_dataset(tmp_path / "three", FIXTURE_EDGES)


@pytest.fixture
def three_edge(three_edge_dir):
    return load_dataset(three_edge_dir)


def toy_background():
    """20 background triples over a small family/company world."""
    people = ["ann", "bob", "cat", "dan", "eve", "fay"]
    orgs = ["acme", "globex", "initech"]
    cities = ["oslo", "lima", "kyiv"]
    triples = []
    for i, person in enumerate(people):
        triples.append((person, "works_at", orgs[i % 3]))
        triples.append((person, "lives_in", cities[(i + 1) % 3]))
    for i, org in enumerate(orgs):
        triples.append((org, "based_in", cities[i]))
    triples += [("ann", "knows", "bob"), ("cat", "knows", "dan"), ("eve", "knows", "fay"),
                ("bob", "knows", "eve"), ("dan", "knows", "ann")]
    assert len(triples) == 20
    return triples


@pytest.fixture
def toy_dir(tmp_path):
    """Toy world with one task per split over the 20-triple background."""
    bg = toy_background()
    people = ["ann", "bob", "cat", "dan", "eve", "fay"]
    orgs = ["acme", "globex", "initech"]
    cities = ["oslo", "lima", "kyiv"]
    train = {"colleague_city": [[p, "colleague_city", cities[(i + 2) % 3]] for i, p in enumerate(people)]}
    valid = {"employer_of": [[orgs[i % 3], "employer_of", p] for i, p in enumerate(people)]}
    test = {"neighbor_org": [[p, "neighbor_org", orgs[(i + 1) % 3]] for i, p in enumerate(people)]}
    cands = {"colleague_city": cities, "employer_of": people, "neighbor_org": orgs}
    return write_dataset(tmp_path / "toy", bg, train, valid, test, cands)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class ScriptedModel:
    """Stand-in for the matcher whose score for (h, r, c) is ``table[c]``.

    With lam=1 and a single support triple the aggregate is the support's own
    representation, so scores pass through unchanged. With ``rng`` set, every
    encoded triple gets a fresh uniform score instead.
    """

    training = False

    def __init__(self, table=None, rng=None):
        self.table = table
        self.rng = rng

    def eval(self):
        return self

    def train(self, mode=True):
        return self

    def encode(self, batch, global_tokens=None, generator=None, train=False, need_global=True, need_local=True):
        from fskgc.model import Encoded

        tails = batch.tokens[:, 2 * batch.p + 2]
        if self.rng is not None:
            vals = torch.from_numpy(self.rng.random(len(tails)))
        else:
            vals = torch.tensor([self.table.get(int(t), 1.0) for t in tails], dtype=torch.float64)
        return Encoded(vals[:, None], None)

    @staticmethod
    def score(support, queries, lam):
        from fskgc.model import ContextMatcher

        return ContextMatcher.score(support, queries, lam)


ACCEPTANCE = {}


def record(criterion, ok, detail=""):
    """Record one acceptance verdict; the terminal summary prints them all."""
    line = f"acceptance {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
    ACCEPTANCE[criterion] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
