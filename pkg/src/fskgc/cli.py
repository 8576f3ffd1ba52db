"""Command-line entry point: ``fskgc <command> [options]``.

Exit codes: 0 success, 2 usage, 3 config, 4 data, 5 numeric failure. Errors are
printed to stderr as one tab-separated line: ``error<TAB>kind<TAB>message``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import List, Optional, Sequence

import numpy as np
import torch

from . import __version__
from . import numeric as nx
from .config import ConfigValidationError, TrainConfig, load_config
from .context import TRAIN, ConfigError, ContextExtractor, ExtractionConfig
from .evaluation import Evaluator, degree_profile, dump_attention
from .graph import DatasetError, EpisodeError, Triple, dataset_fingerprint, load_dataset
from .synthetic import GenerationError, generate_synthetic_kg
from .trainer import Checkpoint, Trainer, TrainingError, format_log_row, write_log

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4, 5
MANIFEST = "manifest.json"
DEFAULT_CONFIG = "desk"

logger = logging.getLogger("fskgc")


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code, self.kind = code, kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(EXIT_USAGE, "usage", message)


@dataclass
class RunManifest:
    command: str
    argv: List[str]
    config: Optional[dict]
    seed: Optional[int]
    dataset_sha256: Optional[str]
    version: str = __version__
    started_at: str = ""
    finished_at: str = ""
    outputs: List[str] = field(default_factory=list)

    def write(self, out_dir: str) -> str:
        path = os.path.join(out_dir, MANIFEST)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _require(args, *keys) -> None:
    for key in keys:
        if getattr(args, key) is None:
            raise CliError(EXIT_CONFIG, "config", f"missing required key: {key}")


def _parse_sets(items: Sequence[str]) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise CliError(EXIT_CONFIG, "config", f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _config(args) -> TrainConfig:
    overrides = _parse_sets(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return load_config(args.config or DEFAULT_CONFIG, **overrides)


def _parse_triple(text: str, store) -> Triple:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 3:
        raise CliError(EXIT_USAGE, "usage", f"--triple expects h,r,t, got {text!r}")
    try:
        return store.triple_from_names(*parts)
    except KeyError as exc:
        raise CliError(EXIT_DATA, "data", f"unknown name in triple {text!r}: {exc.args[0]}") from None


def _load(args, cfg: Optional[TrainConfig] = None):
    _require(args, "data_dir")
    add_inverse = cfg.add_inverse if cfg is not None else True
    return load_dataset(args.data_dir, add_inverse=add_inverse)


def _manifest(args, argv, cfg, out_dir, outputs, started) -> None:
    fp = dataset_fingerprint(args.data_dir) if getattr(args, "data_dir", None) else None
    if args.command == "gen-synthetic":
        fp = dataset_fingerprint(out_dir)
    m = RunManifest(
        command=args.command,
        argv=list(argv),
        config=cfg.to_dict() if cfg is not None else None,
        seed=cfg.seed if cfg is not None else getattr(args, "seed", None),
        dataset_sha256=fp,
        started_at=started,
        finished_at=_now(),
        outputs=sorted(outputs),
    )
    m.write(out_dir)


def _emit(text: str, args, name: str, outputs: list) -> None:
    sys.stdout.write(text)
    out_dir = getattr(args, "out_dir", None)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, name), "w", encoding="utf-8") as fh:
            fh.write(text)
        outputs.append(name)


# commands -------------------------------------------------------------------


def cmd_gen_synthetic(args, outputs):
    _require(args, "out_dir")
    info = generate_synthetic_kg(
        args.out_dir,
        n_entities=args.n_entities,
        n_relations=args.n_relations,
        composition_rules=args.rules,
        seed=args.seed,
        class_size=args.class_size,
        n_valid=args.n_valid,
        chains_per_rule=args.chains_per_rule,
        noise_edges=args.noise_edges,
        range_size=args.range_size,
    )
    print(f"train\t{','.join(info['train'])}")
    print(f"valid\t{','.join(info['valid'])}")
    print(f"test\t{','.join(info['test'])}")
    print(f"background_triples\t{info['n_background']}")
    return None


def cmd_pretrain(args, outputs):
    _require(args, "out_dir")
    cfg = _config(args)
    if args.steps is not None:
        cfg = cfg.replace(pretrain_steps=args.steps).validate()
    dataset = _load(args, cfg)
    os.makedirs(args.out_dir, exist_ok=True)
    trainer = Trainer(dataset, cfg)
    rows = []

    def log(step, loss):
        if step % cfg.eval_interval == 0 or step == cfg.pretrain_steps:
            rows.append((step, None, loss, None))
            print(format_log_row(rows[-1]), flush=True)

    trainer.pretrain(cfg.pretrain_steps, log)
    write_log(os.path.join(args.out_dir, "pretrain_log.tsv"), rows)
    ckpt = trainer.checkpoint(float("nan"))
    ckpt.step = 0
    ckpt.save(os.path.join(args.out_dir, "pretrained.ckpt"))
    outputs += ["pretrain_log.tsv", "pretrained.ckpt"]
    return cfg


def cmd_train(args, outputs):
    cfg = _config(args)
    if args.dry_run:
        print(cfg.dumps(), end="")
        print("config ok")
        return None
    _require(args, "out_dir")
    dataset = _load(args, cfg)
    os.makedirs(args.out_dir, exist_ok=True)
    trainer = Trainer(dataset, cfg)
    if args.init:
        init = Checkpoint.load(args.init)
        trainer.model.load_state_dict(init.params)
    if cfg.pretrain_steps and not args.init:
        trainer.pretrain(cfg.pretrain_steps)
    print("step\tranking_loss\tmasking_loss\tval_mrr", flush=True)
    best = trainer.fit(lambda row: print(row, flush=True))
    best.save(os.path.join(args.out_dir, "model.ckpt"))
    write_log(os.path.join(args.out_dir, "train_log.tsv"), best.log)
    trainer.model.load_state_dict(best.params)
    report = trainer.evaluator().evaluate(dataset.split.test_tasks, cfg.k)
    with open(os.path.join(args.out_dir, "test_report.tsv"), "w", encoding="utf-8") as fh:
        fh.write(report.to_tsv(dataset.store, per_relation=True))
    outputs += ["model.ckpt", "train_log.tsv", "test_report.tsv"]
    print(f"best_valid_mrr\t{best.best_valid_mrr:.6f}\tstep\t{best.step}")
    print(f"test_mrr\t{report.mrr:.6f}")
    return cfg


def cmd_eval(args, outputs):
    _require(args, "checkpoint", "data_dir")
    ckpt = Checkpoint.load(args.checkpoint)
    cfg = ckpt.config
    dataset = _load(args, cfg)
    model = ckpt.restore_model(dataset.store)
    k = args.k if args.k is not None else cfg.k
    ev = Evaluator(model, dataset.store, dataset.split, cfg.p, cfg.effective_q, cfg.effective_lam,
                   pessimistic=args.pessimistic)
    trace_lines = []
    trace = None
    if args.trace:
        trace_lines.append("head\trelation\tgold\trank\tcandidates\tgold_score")

        def trace(res):
            h, r, t = dataset.store.triple_names(res.query)
            trace_lines.append(f"{h}\t{r}\t{t}\t{res.rank}\t{res.candidate_count}\t{res.gold_score:.6f}")

    report = ev.evaluate(dataset.split.tasks(args.split), k, trace=trace)
    text = report.to_tsv(dataset.store, per_relation=args.per_relation)
    if trace_lines:
        text += "\n" + "\n".join(trace_lines) + "\n"
    _emit(text, args, "eval_report.tsv", outputs)
    return cfg


def cmd_extract_context(args, outputs):
    _require(args, "data_dir", "triple")
    dataset = _load(args)
    store = dataset.store
    triple = _parse_triple(args.triple, store)
    cfg = ExtractionConfig(args.p, args.q, args.mode)
    rng = np.random.default_rng([args.seed, 1]) if args.mode == TRAIN else None
    ex = ContextExtractor(store)
    seq = ex.extract_context(triple, cfg, rng)
    lines = ["slot\ttoken\tlabel\tposition\tpad\thop"]
    for i in range(len(seq)):
        tok = int(seq.tokens[i])
        lines.append(
            f"{i}\t{tok}\t{ex.vocab.label(tok, store)}\t{int(seq.positions[i])}\t{int(seq.pad_mask[i])}\t{int(seq.hops[i])}"
        )
    _emit("\n".join(lines) + "\n", args, "context.tsv", outputs)
    return None


def cmd_inspect_attention(args, outputs):
    _require(args, "checkpoint", "data_dir", "triple")
    ckpt = Checkpoint.load(args.checkpoint)
    cfg = ckpt.config
    dataset = _load(args, cfg)
    model = ckpt.restore_model(dataset.store)
    triple = _parse_triple(args.triple, dataset.store)
    support = [_parse_triple(s, dataset.store) for s in (args.support.split(";") if args.support else [])]
    text = dump_attention(model, dataset.store, triple, cfg.p, cfg.effective_q, support=support, local=args.local)
    _emit(text, args, "attention.tsv", outputs)
    return cfg


def cmd_degree_profile(args, outputs):
    dataset = _load(args)
    prof = degree_profile(dataset.store, args.threshold)
    _emit(prof.to_tsv(), args, "degree_profile.tsv", outputs)
    return None


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "extract-context": cmd_extract_context,
    "inspect-attention": cmd_inspect_attention,
    "degree-profile": cmd_degree_profile,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fskgc", description="Few-shot knowledge graph completion.")
    parser.add_argument("--version", action="version", version=f"fskgc {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out-dir", help="directory for outputs and the run manifest")
        return p

    def training_flags(p):
        p.add_argument("--config", help=f"key = value config file or preset name (default: {DEFAULT_CONFIG})")
        p.add_argument("--data-dir")
        p.add_argument("--seed", type=int)
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")

    p = add("gen-synthetic", "write a synthetic composition dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-entities", type=int, default=200)
    p.add_argument("--n-relations", type=int, default=12)
    p.add_argument("--rules", type=int, default=10, help="train + test rule relations")
    p.add_argument("--n-valid", type=int, default=1)
    p.add_argument("--class-size", type=int, default=50)
    p.add_argument("--chains-per-rule", type=int, default=15)
    p.add_argument("--noise-edges", type=int, default=4)
    p.add_argument("--range-size", type=int, default=10)

    p = add("pretrain", "masked-token pretraining of the global encoder")
    training_flags(p)
    p.add_argument("--steps", type=int, help="overrides pretrain_steps")

    p = add("train", "meta-train and report test metrics")
    training_flags(p)
    p.add_argument("--init", help="checkpoint to initialize parameters from (e.g. pretrained.ckpt)")
    p.add_argument("--dry-run", action="store_true", help="validate the config and exit")

    p = add("eval", "rank candidate tails for a split")
    p.add_argument("--checkpoint")
    p.add_argument("--data-dir")
    p.add_argument("--k", type=int, help="support size (default: the checkpoint's K)")
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p.add_argument("--per-relation", action="store_true")
    p.add_argument("--trace", action="store_true", help="one line per query with its rank")
    p.add_argument("--pessimistic", action="store_true", help="count ties against the gold tail")

    p = add("extract-context", "print the context sequence of one triple")
    p.add_argument("--data-dir")
    p.add_argument("--triple", help="h,r,t by name")
    p.add_argument("--p", type=int, default=8)
    p.add_argument("--q", type=int, default=5)
    p.add_argument("--mode", choices=("train", "eval"), default="eval")
    p.add_argument("--seed", type=int, default=0)

    p = add("inspect-attention", "dump attention maps for one triple")
    p.add_argument("--checkpoint")
    p.add_argument("--data-dir")
    p.add_argument("--triple", help="h,r,t by name")
    p.add_argument("--support", help="h,r,t;h,r,t;... support triples for aggregation weights")
    p.add_argument("--local", action="store_true", help="include local neighbor weights")

    p = add("degree-profile", "histogram of entities by number of neighbors")
    p.add_argument("--data-dir")
    p.add_argument("--threshold", type=int, default=10, help="long-tail degree threshold")
    return parser


def _classify(exc: Exception) -> CliError:
    if isinstance(exc, CliError):
        return exc
    if isinstance(exc, (ConfigValidationError, ConfigError)):
        return CliError(EXIT_CONFIG, "config", str(exc))
    if isinstance(exc, (DatasetError, EpisodeError, GenerationError, FileNotFoundError)):
        return CliError(EXIT_DATA, "data", str(exc))
    if isinstance(exc, (TrainingError, nx.NumericError, nx.ShapeError, FloatingPointError)):
        return CliError(EXIT_NUMERIC, "numeric", str(exc))
    if isinstance(exc, ValueError) and "checkpoint" in str(exc):
        return CliError(EXIT_DATA, "data", str(exc))
    raise exc


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        started = _now()
        outputs: List[str] = []
        cfg = COMMANDS[args.command](args, outputs)
        out_dir = getattr(args, "out_dir", None)
        if out_dir and not getattr(args, "dry_run", False):
            _manifest(args, argv, cfg, out_dir, outputs, started)
        return EXIT_OK
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        err = _classify(exc)
        message = " ".join(str(err).split())
        print(f"error\t{err.kind}\t{message}", file=sys.stderr)
        return err.code


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
