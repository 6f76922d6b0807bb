"""Mini-batch SGD training, evaluation and model persistence.

Config file format: one ``key = value`` per line, ``#`` starts a comment.
Values are JSON literals (numbers, ``true``/``false``, quoted strings) or
bare words, which are read as strings. Keys are the field names of
:class:`TrainConfig` and :class:`~plte.encoder.EncoderConfig`, e.g.::

    learning_rate = 0.045
    epochs = 50
    heads = 6
    use_porous = false
"""
from __future__ import annotations

import json
import logging
import math
import os
import time
import zipfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import Scores, TaggedSentence, Vocab, entity_scores
from .encoder import EncoderConfig
from .model import Batch, Example, Model, ModelConfig, Vocabs, build_vocabs, pad_batch

__all__ = ["TrainConfig", "Batch", "pad_batch", "train", "evaluate", "save_model", "load_model",
           "ModelFormatError", "TrainingDiverged", "load_config", "build_model"]

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.045
    lr_decay: float = 0.05  # lr_e = learning_rate / (1 + lr_decay * e)
    l2: float = 1e-8
    epochs: int = 50
    batch_size: int = 16
    dropout_embed_gru: float = 0.5
    dropout_encoder: float = 0.3
    seed: int = 1
    gru_hidden: int = 100
    clip_norm: float = 5.0
    char_dim: int = 50
    bigram_dim: int = 50
    word_dim: int = 50
    use_end_transition: bool = True
    constrained_crf: bool = False
    scheme: str = "BIOES"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if self.learning_rate <= 0 or self.lr_decay < 0 or self.l2 < 0:
            raise ValueError("learning_rate must be positive; lr_decay and l2 non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        self.encoder.dropout = self.dropout_encoder

    def model_config(self) -> ModelConfig:
        enc = EncoderConfig(**{**asdict(self.encoder), "dropout": self.dropout_encoder})
        return ModelConfig(encoder=enc, gru_hidden=self.gru_hidden, char_dim=self.char_dim,
                           bigram_dim=self.bigram_dim, word_dim=self.word_dim,
                           dropout_embed_gru=self.dropout_embed_gru,
                           use_end_transition=self.use_end_transition,
                           constrained_crf=self.constrained_crf, scheme=self.scheme)

    def replace(self, **changes) -> TrainConfig:
        """Copy with changes; encoder fields may be given by their plain names."""
        top = {f.name for f in fields(TrainConfig)} - {"encoder"}
        enc_names = {f.name for f in fields(EncoderConfig)}
        base = {k: v for k, v in asdict(self).items() if k != "encoder"}
        enc = asdict(self.encoder)
        for k, v in changes.items():
            if k in top:
                base[k] = v
            elif k in enc_names:
                enc[k] = v
            else:
                raise KeyError(f"unknown config key {k!r}")
        if "dropout" in changes and "dropout_encoder" not in changes:
            base["dropout_encoder"] = changes["dropout"]
        enc["dropout"] = base["dropout_encoder"]
        enc["d_r"] = changes.get("d_r")
        return TrainConfig(**base, encoder=EncoderConfig(**enc))


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        value = value.strip()
        try:
            out[key.strip()] = json.loads(value)
        except json.JSONDecodeError:
            out[key.strip()] = value
    return out


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    values = parse_config_text(Path(path).read_text(encoding="utf-8"))
    return (base or TrainConfig()).replace(**values)


# ---------------------------------------------------------------------------
# model construction


def build_model(train_corpus: Sequence[TaggedSentence], config: TrainConfig, lexicon_words: Sequence[str] = (),
                pretrained: dict[str, tuple[Vocab, np.ndarray]] | None = None) -> Model:
    """Vocabularies from the training corpus, lexicon words and pretrained tables; seeded init."""
    pretrained = dict(pretrained or {})
    words = list(lexicon_words)
    if "word" in pretrained:
        seen = set(words)
        words += [w for w in pretrained["word"][0].tokens if w not in seen]
    cfg = config
    for kind in ("char", "bigram", "word"):
        if kind in pretrained and pretrained[kind][1].shape[1] != getattr(cfg, f"{kind}_dim"):
            cfg = cfg.replace(**{f"{kind}_dim": pretrained[kind][1].shape[1]})
    vocabs = build_vocabs(train_corpus, words, config.scheme, pretrained)
    return Model.create(cfg.model_config(), vocabs, np.random.default_rng(config.seed), pretrained)


# ---------------------------------------------------------------------------
# training


def _featurize_all(model: Model, corpus: Sequence[TaggedSentence], with_tags: bool = True) -> list[Example]:
    return [model.featurize(s.chars, s.tags if with_tags else None) for s in corpus]


def _batches(examples: Sequence[Example], size: int, order=None):
    order = range(len(examples)) if order is None else order
    order = list(order)
    for i in range(0, len(order), size):
        yield pad_batch([examples[j] for j in order[i:i + size]])


def l2_penalty(model: Model) -> float:
    return 0.5 * sum(float(np.sum(p.data * p.data)) for p in model.parameters())


def sgd_step(model: Model, batch: Batch, lr: float, l2: float, clip_norm: float | None,
             rng: np.random.Generator | None, training: bool = True) -> float:
    """One update on ``mean nll + (l2/2)·||params||²``; returns that objective before the update."""
    model.zero_grad()
    with T.ComputationRecord() as rec:
        loss = model.loss(batch, training=training, rng=rng)
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingDiverged(f"loss became {value}")
    rec.backward(loss)
    if l2:
        value += l2 * l2_penalty(model)
    params = model.parameters()
    grads = []
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if l2:
            g = g + l2 * p.data
        grads.append(g)
    if clip_norm:
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
        if not math.isfinite(norm):
            raise TrainingDiverged(f"gradient norm became {norm}")
        if norm > clip_norm:
            grads = [g * (clip_norm / norm) for g in grads]
    for p, g in zip(params, grads):
        p.data = p.data - lr * g
    model.zero_grad()
    return value


def train(corpus: Sequence[TaggedSentence], dev_corpus: Sequence[TaggedSentence], config: TrainConfig,
          model: Model | None = None, lexicon_words: Sequence[str] = (),
          pretrained: dict | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> tuple[Model, list[dict]]:
    """Train with SGD and return the dev-best model plus one metrics dict per epoch."""
    if not corpus:
        raise ValueError("training corpus is empty")
    if not dev_corpus:
        raise ValueError("dev corpus is empty")
    if model is None:
        model = build_model(corpus, config, lexicon_words, pretrained)
    rng = np.random.default_rng(config.seed)
    examples = _featurize_all(model, corpus)
    dev_examples = _featurize_all(model, dev_corpus)
    best_f1, best_state = -1.0, model.state()
    history = []
    for epoch in range(config.epochs):
        lr = config.learning_rate / (1.0 + config.lr_decay * epoch)
        start = time.perf_counter()
        order = rng.permutation(len(examples))
        losses = []
        for batch in _batches(examples, config.batch_size, order):
            losses.append(sgd_step(model, batch, lr, config.l2, config.clip_norm, rng))
        scores = _score_examples(model, dev_examples, [s.tags for s in dev_corpus], config.batch_size)
        record = {"epoch": epoch + 1, "lr": lr, "loss": float(np.mean(losses)),
                  "dev_p": scores.precision, "dev_r": scores.recall, "dev_f1": scores.f1,
                  "seconds": time.perf_counter() - start}
        history.append(record)
        logger.info("epoch %d loss %.4f dev f1 %.4f", epoch + 1, record["loss"], scores.f1)
        if on_epoch is not None:
            on_epoch(record)
        if scores.f1 > best_f1:
            best_f1, best_state = scores.f1, model.state()
    model.load_state(best_state)
    return model, history


# ---------------------------------------------------------------------------
# evaluation


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("PLTE_THREADS", "1")))
    except ValueError:
        return 1


def predict_examples(model: Model, examples: Sequence[Example], batch_size: int = 16) -> list[list[str]]:
    """Viterbi tags for featurized sentences; batches may run on PLTE_THREADS threads.

    Sentences are grouped by length to limit padding; results come back in input order.
    """
    order = sorted(range(len(examples)), key=lambda i: (examples[i].num_chars, examples[i].num_tokens))
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]

    def run(idx):
        return [[model.vocabs.tags[t] for t in path] for path in model.decode(pad_batch([examples[j] for j in idx]))]

    workers = min(_threads(), max(1, len(chunks)))
    if workers == 1:
        results = [run(c) for c in chunks]
    else:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, chunks))
    out: list[list[str]] = [[] for _ in examples]
    for idx, tags in zip(chunks, results):
        for j, t in zip(idx, tags):
            out[j] = t
    return out


def _score_examples(model, examples, gold, batch_size) -> Scores:
    pred = predict_examples(model, examples, batch_size)
    return entity_scores(gold, pred, model.scheme)


def evaluate(model: Model, corpus: Sequence[TaggedSentence], batch_size: int = 16) -> Scores:
    """Entity-level micro P/R/F1 of Viterbi predictions against the corpus tags."""
    examples = _featurize_all(model, corpus, with_tags=False)
    return _score_examples(model, examples, [s.tags for s in corpus], batch_size)


# ---------------------------------------------------------------------------
# persistence


def save_model(model: Model, path) -> None:
    """Write an ``.npz`` container: parameters plus a JSON header with config, vocabularies and shapes."""
    meta = {"format": "plte-model", "version": FORMAT_VERSION, "config": model.config.to_dict(),
            "vocabs": model.vocabs.to_dict(),
            "shapes": {k: list(v.shape) for k, v in model.params.items()}}
    arrays = {f"param/{k}": v.data for k, v in model.params.items()}
    arrays["meta"] = np.frombuffer(json.dumps(meta, ensure_ascii=False).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_model(path, config: ModelConfig | None = None) -> Model:
    """Load a saved model; a given ``config`` must be shape-compatible with the stored parameters."""
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(bytes(z["meta"]).decode("utf-8"))
            state = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    except (OSError, ValueError, KeyError, zipfile.BadZipFile, EOFError) as e:
        raise ModelFormatError(f"{path}: not a readable model file ({e})") from e
    if meta.get("format") != "plte-model":
        raise ModelFormatError(f"{path}: not a model file")
    if meta.get("version") != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: format version {meta.get('version')}, expected {FORMAT_VERSION}")
    for k, shape in meta["shapes"].items():
        if k not in state or list(state[k].shape) != shape:
            raise ModelFormatError(f"{path}: parameter {k} is missing or has the wrong shape")
    vocabs = Vocabs.from_dict(meta["vocabs"])
    cfg = config or ModelConfig.from_dict(meta["config"])
    model = Model.create(cfg, vocabs, np.random.default_rng(0))
    try:
        model.load_state(state)
    except ValueError as e:
        raise ModelFormatError(f"{path}: stored parameters do not fit the requested config: {e}") from e
    return model
