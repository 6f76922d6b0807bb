"""Corpus and embedding I/O, vocabularies, tag schemes and a synthetic corpus.

File formats
------------
CoNLL corpus (UTF-8)::

    file     := sentence (blank-line+ sentence)* blank-line*
    sentence := (char WS tag NEWLINE)+

``WS`` is a tab or one or more spaces; ``char`` is a single Unicode scalar
value.

word2vec text embeddings (UTF-8)::

    file   := [count SP dim NEWLINE] (token (SP float){dim} NEWLINE)*

Lexicon word list: one word per line; further fields are ignored, so an
embedding file doubles as a lexicon.
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .lattice import build_lexicon, make_bigrams, match_words

logger = logging.getLogger(__name__)

OUTSIDE = "O"


class DataFormatError(ValueError):
    """Malformed corpus or embedding file; message carries path and line."""


@dataclass
class TaggedSentence:
    chars: list[str]
    tags: list[str]

    def __post_init__(self):
        if len(self.chars) != len(self.tags):
            raise ValueError(f"{len(self.chars)} characters but {len(self.tags)} tags")

    def __len__(self) -> int:
        return len(self.chars)

    @property
    def text(self) -> str:
        return "".join(self.chars)


class Vocab:
    """String to id map; id 0 is reserved for unknown tokens."""

    UNK = "<unk>"

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = [self.UNK]
        self.stoi: dict[str, int] = {}
        for tok in tokens:
            self.add(tok)

    @classmethod
    def from_counts(cls, counts: Counter, min_freq: int = 1) -> Vocab:
        # sort for determinism independent of insertion order
        return cls(t for t, c in sorted(counts.items(), key=lambda x: (-x[1], x[0])) if c >= min_freq)

    def add(self, tok: str) -> int:
        idx = self.stoi.get(tok)
        if idx is None:
            idx = len(self.itos)
            self.stoi[tok] = idx
            self.itos.append(tok)
        return idx

    def __len__(self) -> int:
        """Number of known tokens (the unknown id is not counted)."""
        return len(self.stoi)

    @property
    def size(self) -> int:
        """Number of ids including the unknown id, i.e. embedding table rows."""
        return len(self.itos)

    def __contains__(self, tok: str) -> bool:
        return tok in self.stoi

    def __getitem__(self, tok: str) -> int:
        return self.stoi.get(tok, 0)

    def lookup(self, toks: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, 0) for t in toks]

    def token(self, idx: int) -> str:
        if idx <= 0:
            raise KeyError("id 0 is the unknown token and has no surface form")
        return self.itos[idx]

    @property
    def tokens(self) -> list[str]:
        return self.itos[1:]


# ---------------------------------------------------------------------------
# tag schemes


class TagScheme:
    def __init__(self, name: str):
        name = name.upper()
        if name not in ("BIO", "BIOES"):
            raise ValueError(f"unknown tag scheme {name!r}")
        self.name = name
        self.prefixes = ("B", "I") if name == "BIO" else ("B", "I", "E", "S")

    def __repr__(self) -> str:
        return f"TagScheme({self.name!r})"

    def __eq__(self, other) -> bool:
        return isinstance(other, TagScheme) and other.name == self.name

    def is_valid(self, tag: str) -> bool:
        if tag == OUTSIDE:
            return True
        prefix, sep, label = tag.partition("-")
        return bool(sep) and bool(label) and prefix in self.prefixes

    def tags_for(self, labels: Iterable[str]) -> list[str]:
        """Full tag inventory for a set of entity labels, ``O`` first."""
        return [OUTSIDE] + [f"{p}-{lab}" for lab in sorted(set(labels)) for p in self.prefixes]

    def spans_to_tags(self, length: int, spans: Iterable[tuple[int, int, str]]) -> list[str]:
        """Tags for non-overlapping 1-based inclusive ``(start, end, label)`` spans."""
        tags = [OUTSIDE] * length
        for s, e, lab in sorted(spans):
            if any(t != OUTSIDE for t in tags[s - 1:e]):
                raise ValueError(f"overlapping span ({s}, {e}, {lab})")
            if self.name == "BIOES" and s == e:
                tags[s - 1] = f"S-{lab}"
                continue
            tags[s - 1] = f"B-{lab}"
            for i in range(s, e):
                tags[i] = f"I-{lab}"
            if self.name == "BIOES":
                tags[e - 1] = f"E-{lab}"
        return tags


BIO = TagScheme("BIO")
BIOES = TagScheme("BIOES")


def get_scheme(scheme: str | TagScheme) -> TagScheme:
    return scheme if isinstance(scheme, TagScheme) else TagScheme(scheme)


def _split(tag: str) -> tuple[str, str]:
    if tag == OUTSIDE:
        return OUTSIDE, ""
    prefix, _, label = tag.partition("-")
    return prefix, label


def extract_entities(tags: Sequence[str], scheme: str | TagScheme = BIOES) -> set[tuple[int, int, str]]:
    """Entity spans as 1-based inclusive ``(start, end, label)``.

    BIOES keeps only well-formed ``B I* E`` and ``S`` runs; any transition
    that breaks a run (label change, O, a fresh B) drops the unfinished run.
    BIO follows the conlleval convention: an ``I-X`` that does not continue
    an ``X`` entity starts a new one.
    """
    scheme = get_scheme(scheme)
    spans = set()
    start, label = None, None
    if scheme.name == "BIOES":
        for i, tag in enumerate(tags, 1):
            prefix, lab = _split(tag)
            if prefix == "S":
                spans.add((i, i, lab))
                start = None
            elif prefix == "B":
                start, label = i, lab
            elif prefix == "I":
                if start is None or lab != label:
                    start = None
            elif prefix == "E":
                if start is not None and lab == label:
                    spans.add((start, i, lab))
                start = None
            else:
                start = None
        return spans
    for i, tag in enumerate(tags, 1):
        prefix, lab = _split(tag)
        continues = prefix == "I" and start is not None and lab == label
        if continues:
            continue
        if start is not None:
            spans.add((start, i - 1, label))
            start = None
        if prefix in ("B", "I"):
            start, label = i, lab
    if start is not None:
        spans.add((start, len(tags), label))
    return spans


# ---------------------------------------------------------------------------
# CoNLL


def read_conll(path, scheme: str | TagScheme | None = BIOES) -> list[TaggedSentence]:
    """Read a character-per-line corpus; tags are validated against ``scheme`` unless it is None."""
    scheme = get_scheme(scheme) if scheme is not None else None
    sentences: list[TaggedSentence] = []
    chars: list[str] = []
    tags: list[str] = []
    path = Path(path)
    with path.open(encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                if chars:
                    sentences.append(TaggedSentence(chars, tags))
                    chars, tags = [], []
                continue
            fields = line.split()
            if len(fields) != 2 or len(fields[0]) != 1:
                raise DataFormatError(f"{path}:{lineno}: expected '<char> <tag>', got {line!r}")
            if scheme is not None and not scheme.is_valid(fields[1]):
                raise DataFormatError(f"{path}:{lineno}: tag {fields[1]!r} is not valid under {scheme.name}")
            chars.append(fields[0])
            tags.append(fields[1])
    if chars:
        sentences.append(TaggedSentence(chars, tags))
    return sentences


def write_conll(sentences: Iterable[TaggedSentence], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for sent in sentences:
            for c, t in zip(sent.chars, sent.tags):
                f.write(f"{c}\t{t}\n")
            f.write("\n")


# ---------------------------------------------------------------------------
# embeddings


def load_embeddings(path) -> tuple[Vocab, np.ndarray]:
    """Read word2vec text format.

    Returns ``(vocab, table)`` with ``table[vocab[tok] - 1]`` the vector of ``tok``;
    the table has no unknown row.
    """
    path = Path(path)
    vocab = Vocab()
    rows: list[np.ndarray] = []
    dim = None
    declared = None
    with path.open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            fields = line.rstrip("\n").split(" ")
            fields = [x for x in fields if x != ""]
            if not fields:
                continue
            if lineno == 1 and len(fields) == 2 and fields[0].isdigit() and fields[1].isdigit():
                declared, dim = int(fields[0]), int(fields[1])
                continue
            tok, vals = fields[0], fields[1:]
            if dim is None:
                dim = len(vals)
            if len(vals) != dim:
                raise DataFormatError(f"{path}:{lineno}: expected {dim} values for {tok!r}, got {len(vals)}")
            if tok in vocab:
                logger.warning("%s:%d: duplicate token %r ignored", path, lineno, tok)
                continue
            try:
                rows.append(np.array(vals, dtype=np.float64))
            except ValueError as e:
                raise DataFormatError(f"{path}:{lineno}: non-numeric value") from e
            vocab.add(tok)
    if declared is not None and declared != len(rows):
        logger.warning("%s: header declares %d rows, read %d", path, declared, len(rows))
    table = np.stack(rows) if rows else np.zeros((0, dim or 0))
    return vocab, table


def write_embeddings(path, tokens: Sequence[str], table: np.ndarray) -> None:
    table = np.asarray(table)
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"{len(tokens)} {table.shape[1]}\n")
        for tok, row in zip(tokens, table):
            f.write(tok + " " + " ".join(f"{v:.8g}" for v in row) + "\n")


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SyntheticCorpus:
    train: list[TaggedSentence]
    dev: list[TaggedSentence]
    test: list[TaggedSentence]
    lexicon: list[str]
    entity_words: dict[str, str]  # surface -> label
    embeddings: dict[str, tuple[list[str], np.ndarray]] = field(repr=False)

    def write(self, directory) -> dict[str, Path]:
        """Write corpora, lexicon and embeddings; returns the paths."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = {}
        for split in ("train", "dev", "test"):
            paths[split] = d / f"{split}.conll"
            write_conll(getattr(self, split), paths[split])
        paths["lexicon"] = d / "lexicon.txt"
        paths["lexicon"].write_text("".join(w + "\n" for w in self.lexicon), encoding="utf-8")
        for kind, (toks, table) in self.embeddings.items():
            paths[f"{kind}_emb"] = d / f"{kind}.vec"
            write_embeddings(paths[f"{kind}_emb"], toks, table)
        return paths


SYNTH_LABELS = ("LOC", "ORG", "PER")


def generate_synthetic(seed: int = 0, sizes: dict[str, int] | None = None, *,
                       alphabet_size: int = 40, words_per_label: int = 6,
                       distractors: int = 10, max_len: int = 30, min_len: int = 6,
                       emb_dim: int = 50) -> SyntheticCorpus:
    """Seeded toy NER language whose entities come from a generated lexicon.

    Entity and filler text share one alphabet, and entities are frequently
    written back to back, so where one entity stops and the next starts is
    only visible through which lexicon words match. Word vectors cluster by
    entity label, characters and bigrams get unstructured random vectors.
    """
    sizes = dict(sizes or {"train": 20, "dev": 5, "test": 5})
    for k, v in sizes.items():
        if v < 0:
            raise ValueError(f"size for {k} must be non-negative")
    rng = np.random.default_rng(seed)
    alphabet = [chr(0x4E00 + int(i)) for i in rng.choice(2000, size=alphabet_size, replace=False)]

    surfaces: set[str] = set()

    def fresh_word(lo, hi):
        while True:
            n = int(rng.integers(lo, hi + 1))
            w = "".join(alphabet[int(i)] for i in rng.integers(0, alphabet_size, size=n))
            if w not in surfaces:
                surfaces.add(w)
                return w

    entity_words = {fresh_word(2, 4): lab for lab in SYNTH_LABELS for _ in range(words_per_label)}
    filler_words = [fresh_word(2, 3) for _ in range(distractors)]
    lexicon = sorted(entity_words) + sorted(filler_words)
    by_label = {lab: sorted(w for w, l in entity_words.items() if l == lab) for lab in SYNTH_LABELS}

    def sentence():
        target = int(rng.integers(min_len, max_len + 1))
        chars: list[str] = []
        spans = []
        while len(chars) < target:
            r = rng.random()
            if r < 0.35:
                lab = SYNTH_LABELS[int(rng.integers(len(SYNTH_LABELS)))]
                run = 2 if rng.random() < 0.4 else 1  # adjacent same-label entities
                piece = [by_label[lab][int(rng.integers(len(by_label[lab])))] for _ in range(run)]
                if len(chars) + sum(map(len, piece)) > max_len:
                    break
                for w in piece:
                    spans.append((len(chars) + 1, len(chars) + len(w), lab))
                    chars.extend(w)
            elif r < 0.55:
                w = filler_words[int(rng.integers(len(filler_words)))]
                if len(chars) + len(w) > max_len:
                    break
                chars.extend(w)
            else:
                chars.append(alphabet[int(rng.integers(alphabet_size))])
        if not chars:
            chars.append(alphabet[0])
        return TaggedSentence(chars, BIOES.spans_to_tags(len(chars), spans)), spans

    entity_lex = build_lexicon(sorted(entity_words))

    def consistent_sentence():
        # every entity-word match must be a gold entity, so the lexicon never contradicts the tags
        while True:
            sent, spans = sentence()
            found = {(sp.p, sp.q) for sp, _ in match_words(sent.chars, entity_lex)}
            if found == {(s, e) for s, e, _ in spans}:
                return sent

    splits = {k: [consistent_sentence() for _ in range(sizes.get(k, 0))] for k in ("train", "dev", "test")}

    char_tab = rng.normal(0.0, 0.3, size=(alphabet_size, emb_dim))
    bigrams = sorted({bg for sents in splits.values() for s in sents for bg in make_bigrams(s.chars)})
    bi_tab = rng.normal(0.0, 0.3, size=(len(bigrams), emb_dim))
    centroids = {lab: rng.normal(0.0, 0.5, size=emb_dim) for lab in SYNTH_LABELS + ("O",)}
    word_tab = np.stack([centroids[entity_words.get(w, "O")] + rng.normal(0.0, 0.1, size=emb_dim)
                         for w in lexicon])
    embeddings = {"char": (alphabet, char_tab), "bigram": (bigrams, bi_tab), "word": (lexicon, word_tab)}
    return SyntheticCorpus(splits["train"], splits["dev"], splits["test"], lexicon, entity_words, embeddings)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class Scores:
    precision: float
    recall: float
    f1: float
    per_label: dict[str, tuple[float, float, float]]
    counts: tuple[int, int, int]  # correct, predicted, gold


def _prf(correct: int, pred: int, gold: int) -> tuple[float, float, float]:
    p = correct / pred if pred else 0.0
    r = correct / gold if gold else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def entity_scores(gold: Sequence[Sequence[str]], pred: Sequence[Sequence[str]],
                  scheme: str | TagScheme = BIOES) -> Scores:
    """Micro-averaged exact-match entity P/R/F1 plus a per-label breakdown."""
    counts: dict[str, list[int]] = {}
    tc = tp = tg = 0
    for g, p in zip(gold, pred):
        gs, ps = extract_entities(g, scheme), extract_entities(p, scheme)
        ok = gs & ps
        tc, tp, tg = tc + len(ok), tp + len(ps), tg + len(gs)
        for idx, group in enumerate((ok, ps, gs)):
            for *_, lab in group:
                counts.setdefault(lab, [0, 0, 0])[idx] += 1
    per = {lab: _prf(*c) for lab, c in sorted(counts.items())}
    return Scores(*_prf(tc, tp, tg), per_label=per, counts=(tc, tp, tg))
