"""Command-line entry point: train, eval, predict, bench, inspect and synth."""
from __future__ import annotations

import argparse
import json
import logging
import statistics
import sys
import time
from pathlib import Path
from typing import Sequence

from .data import DataFormatError, TaggedSentence, Vocab, generate_synthetic, load_embeddings, read_conll, write_conll
from .lattice import build_lattice, build_lexicon, build_relation_matrix, format_lattice, read_lexicon
from .model import Model
from .trainer import (
    ModelFormatError, TrainConfig, TrainingDiverged, build_model, evaluate, load_config, load_model,
    predict_examples, save_model, train,
)

logger = logging.getLogger("plte")

BUCKETS = ((1, 20), (21, 40), (41, 60), (61, 80), (81, None))


class CommandError(Exception):
    """A user-facing failure; the message is printed and the exit status is 1."""


def _existing(path: str | None, what: str) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    if not p.is_file():
        raise CommandError(f"{what} file not found: {p}")
    return p


def _config(args) -> TrainConfig:
    cfg = load_config(_existing(args.config, "config")) if args.config else TrainConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.batch_size is not None:
        changes["batch_size"] = args.batch_size
    if getattr(args, "epochs", None) is not None:
        changes["epochs"] = args.epochs
    if args.ablate == "no-lasa":
        changes["use_lasa"] = False
    elif args.ablate == "no-porous":
        changes["use_porous"] = False
    return cfg.replace(**changes) if changes else cfg


def _pretrained(args) -> dict[str, tuple[Vocab, object]]:
    out = {}
    for kind in ("char", "bigram", "word"):
        path = _existing(getattr(args, f"{kind}_emb"), f"{kind} embedding")
        if path is not None:
            out[kind] = load_embeddings(path)
    return out


def _lexicon_words(args) -> list[str]:
    path = _existing(args.lexicon, "lexicon")
    return read_lexicon(path).words if path else []


def _corpus(path: str | None, what: str, scheme) -> list[TaggedSentence]:
    p = _existing(path, what)
    if p is None:
        raise CommandError(f"--{what} is required")
    sents = read_conll(p, scheme)
    if not sents:
        raise CommandError(f"{what} file has no sentences: {p}")
    return sents


def _model(args) -> Model:
    path = _existing(args.model, "model")
    if path is None:
        raise CommandError("--model is required")
    return load_model(path)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = _config(args)
    train_set = _corpus(args.train, "train", cfg.scheme)
    dev_set = _corpus(args.dev, "dev", cfg.scheme) if args.dev else train_set
    test_set = _corpus(args.test, "test", cfg.scheme) if args.test else None
    if args.model is None:
        raise CommandError("--model (output path) is required")
    model = build_model(train_set, cfg, _lexicon_words(args), _pretrained(args))
    out = open(args.metrics, "w", encoding="utf-8") if args.metrics else sys.stdout
    try:
        def emit(record):
            out.write(json.dumps(record) + "\n")
            out.flush()

        model, _ = train(train_set, dev_set, cfg, model=model, on_epoch=emit)
        if test_set is not None:
            s = evaluate(model, test_set, cfg.batch_size)
            emit({"split": "test", "p": s.precision, "r": s.recall, "f1": s.f1})
    finally:
        if out is not sys.stdout:
            out.close()
    save_model(model, args.model)
    return 0


def cmd_eval(args) -> int:
    model = _model(args)
    corpus = _corpus(args.test, "test", model.scheme)
    s = evaluate(model, corpus, args.batch_size or 16)
    print(f"{'label':<10}{'P':>8}{'R':>8}{'F1':>8}")
    print(f"{'overall':<10}{s.precision:>8.4f}{s.recall:>8.4f}{s.f1:>8.4f}")
    for lab, (p, r, f) in s.per_label.items():
        print(f"{lab:<10}{p:>8.4f}{r:>8.4f}{f:>8.4f}")
    return 0


def cmd_predict(args) -> int:
    model = _model(args)
    corpus = _corpus(args.test, "test", None)
    examples = [model.featurize(s.chars) for s in corpus]
    tags = predict_examples(model, examples, args.batch_size or 16)
    out = [TaggedSentence(s.chars, t) for s, t in zip(corpus, tags)]
    if args.output:
        write_conll(out, args.output)
    else:
        for s in out:
            for c, t in zip(s.chars, s.tags):
                print(f"{c}\t{t}")
            print()
    return 0


def length_bucket(n: int) -> str:
    for lo, hi in BUCKETS:
        if hi is None:
            return f">{lo - 1}"
        if n <= hi:
            return f"<={hi}" if lo == 1 else f"{lo}-{hi}"
    raise AssertionError(n)


def bench(model: Model, sentences: Sequence[Sequence[str]], batch_sizes: Sequence[int], reps: int = 3) -> dict:
    """Throughput of batched Viterbi prediction, per batch size and length bucket.

    Sentences are featurized once up front, so the timings cover padding,
    the forward pass and decoding only. Raises if any batch size predicts
    differently from batch size 1.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    examples = [model.featurize(s) for s in sentences]
    reference = predict_examples(model, examples, 1)
    for bs in batch_sizes:
        if predict_examples(model, examples, bs) != reference:
            raise CommandError(f"correctness gate failed: batch size {bs} predicts differently from batch size 1")
    buckets: dict[str, list[int]] = {}
    for i, s in enumerate(sentences):
        buckets.setdefault(length_bucket(len(s)), []).append(i)

    def rate(subset, bs):
        times = []
        for _ in range(reps):
            start = time.perf_counter()
            predict_examples(model, subset, bs)
            times.append(time.perf_counter() - start)
        return len(subset) / statistics.median(times)

    overall = {bs: rate(examples, bs) for bs in batch_sizes}
    base = overall.get(1)
    per_bucket = {}
    order = [length_bucket(lo) for lo, _ in BUCKETS]
    for name in sorted(buckets, key=order.index):
        subset = [examples[i] for i in buckets[name]]
        per_bucket[name] = {"sentences": len(subset), "rate": {bs: rate(subset, bs) for bs in batch_sizes}}
    return {"sentences": len(examples), "reps": reps, "gate": "passed",
            "throughput": overall,
            "speedup": {bs: r / base for bs, r in overall.items()} if base else {},
            "buckets": per_bucket}


def format_bench(report: dict) -> str:
    sizes = list(report["throughput"])
    lines = [f"correctness gate: {report['gate']} ({report['sentences']} sentences, "
             f"batched predictions identical to batch size 1)",
             f"median of {report['reps']} repetitions",
             f"{'batch':>6}{'sent/s':>12}{'speedup':>10}"]
    for bs in sizes:
        sp = report["speedup"].get(bs)
        lines.append(f"{bs:>6}{report['throughput'][bs]:>12.1f}{'' if sp is None else f'{sp:>10.2f}'}")
    lines.append(f"{'length':>8}{'n':>6}" + "".join(f"{'bs=' + str(bs):>12}" for bs in sizes))
    for name, row in report["buckets"].items():
        lines.append(f"{name:>8}{row['sentences']:>6}" + "".join(f"{row['rate'][bs]:>12.1f}" for bs in sizes))
    return "\n".join(lines)


def cmd_bench(args) -> int:
    path = args.test or args.train
    corpus = _corpus(path, "test", None)
    batch_sizes = _int_list(args.bench_batches)
    if args.model:
        model = _model(args)
    else:
        cfg = _config(args)
        model = build_model(corpus, cfg, _lexicon_words(args), _pretrained(args))
    report = bench(model, [s.chars for s in corpus], batch_sizes, args.reps)
    print(format_bench(report))
    return 0


def cmd_inspect(args) -> int:
    words = _lexicon_words(args)
    lat = build_lattice(list(args.sentence), build_lexicon(words))
    print(format_lattice(lat, build_relation_matrix(lat)))
    return 0


def cmd_synth(args) -> int:
    sizes = {"train": args.train_size, "dev": args.dev_size, "test": args.test_size}
    sc = generate_synthetic(args.seed if args.seed is not None else 0, sizes,
                            max_len=args.max_len, min_len=min(6, args.max_len))
    for name, path in sc.write(args.out).items():
        print(f"{name}\t{path}")
    return 0


def _int_list(text: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise CommandError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise CommandError(f"batch sizes must be positive integers, got {text!r}")
    return values


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plte", description="Lattice transformer tagger for Chinese NER.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model_help="model file"):
        p.add_argument("--config", help="key = value config file (default: built-in defaults)")
        p.add_argument("--model", help=model_help)
        p.add_argument("--seed", type=int, help="random seed (default: from config, 1)")
        p.add_argument("--batch-size", type=int, help="batch size (default: from config, 16)")

    def inputs(p):
        p.add_argument("--train", help="training corpus, CoNLL format")
        p.add_argument("--dev", help="development corpus (default: the training corpus)")
        p.add_argument("--test", help="test corpus")
        p.add_argument("--char-emb", help="character embeddings, word2vec text format")
        p.add_argument("--bigram-emb", help="bigram embeddings, word2vec text format")
        p.add_argument("--word-emb", help="word embeddings; their words join the lexicon")
        p.add_argument("--lexicon", help="lexicon word list (default: none)")
        p.add_argument("--ablate", choices=("no-lasa", "no-porous", "none"), default="none",
                       help="drop relation embeddings or the porous mask (default: none)")

    p = sub.add_parser("train", help="train a model")
    common(p, "output model path")
    inputs(p)
    p.add_argument("--epochs", type=int, help="number of epochs (default: from config, 50)")
    p.add_argument("--metrics", help="JSON-lines metrics file (default: stdout)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="entity P/R/F1 of a model on a tagged corpus")
    common(p)
    p.add_argument("--test", help="tagged corpus")
    p.set_defaults(func=cmd_eval, ablate="none")

    p = sub.add_parser("predict", help="tag a corpus; output is CoNLL")
    common(p)
    p.add_argument("--test", help="input corpus, CoNLL format (existing tags are ignored)")
    p.add_argument("--output", help="output file (default: stdout)")
    p.set_defaults(func=cmd_predict, ablate="none")

    p = sub.add_parser("bench", help="prediction throughput per batch size and sentence length")
    common(p, "model file (default: a freshly initialised model)")
    inputs(p)
    p.add_argument("--bench-batches", default="1,16", help="comma-separated batch sizes (default: 1,16)")
    p.add_argument("--reps", type=int, default=3, help="timed repetitions, median reported (default: 3)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", help="print a sentence's lattice, relation matrix and porous mask")
    p.add_argument("sentence", help="sentence text")
    p.add_argument("--lexicon", help="lexicon word list (default: none)")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("synth", help="write a seeded synthetic corpus, lexicon and embeddings")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="corpus seed (default: 0)")
    p.add_argument("--train-size", type=int, default=20, help="training sentences (default: 20)")
    p.add_argument("--dev-size", type=int, default=5, help="dev sentences (default: 5)")
    p.add_argument("--test-size", type=int, default=5, help="test sentences (default: 5)")
    p.add_argument("--max-len", type=int, default=30, help="maximum sentence length (default: 30)")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CommandError, DataFormatError, ModelFormatError, TrainingDiverged, KeyError, ValueError, OSError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"plte {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
