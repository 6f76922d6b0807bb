"""Full tagger: lattice input layer, porous encoder, BiGRU-CRF decoding."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import BIOES, Vocab, get_scheme
from .decoder import CRF, FORBIDDEN, bigru, crf_nll, forbidden_transitions, init_crf_params, init_gru_params, viterbi_decode
from .encoder import EncoderConfig, embed_tokens, encode, init_encoder_params
from .lattice import DISTANT, Lexicon, build_lattice, make_bigrams, relation_matrix_from_spans
from .tensor import Tensor


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    gru_hidden: int = 100
    char_dim: int = 50
    bigram_dim: int = 50
    word_dim: int = 50
    dropout_embed_gru: float = 0.5
    use_end_transition: bool = True
    constrained_crf: bool = False
    scheme: str = "BIOES"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        d["encoder"] = EncoderConfig(**d["encoder"])
        return cls(**d)


@dataclass
class Vocabs:
    chars: Vocab
    bigrams: Vocab
    words: Vocab
    tags: list[str]

    def to_dict(self) -> dict:
        return {"chars": self.chars.tokens, "bigrams": self.bigrams.tokens,
                "words": self.words.tokens, "tags": list(self.tags)}

    @classmethod
    def from_dict(cls, d: dict) -> Vocabs:
        return cls(Vocab(d["chars"]), Vocab(d["bigrams"]), Vocab(d["words"]), list(d["tags"]))


@dataclass
class Example:
    """One sentence turned into ids plus its lattice structure."""

    chars: list[str]
    char_ids: np.ndarray
    bigram_ids: np.ndarray
    word_ids: np.ndarray  # word-vocabulary ids of matched words, lattice order
    positions: np.ndarray  # 1-based, characters then words
    relations: np.ndarray  # N×N relation ids
    tag_ids: np.ndarray | None = None

    @property
    def num_chars(self) -> int:
        return len(self.char_ids)

    @property
    def num_tokens(self) -> int:
        return len(self.positions)


@dataclass
class Batch:
    """Padded batch; token slots are ``[M chars][W words]``."""

    char_ids: np.ndarray  # B×M
    bigram_ids: np.ndarray  # B×M
    word_ids: np.ndarray  # B×W
    positions: np.ndarray  # B×(M+W)
    relations: np.ndarray  # B×(M+W)×(M+W), padding = r7
    valid: np.ndarray  # B×(M+W) real-token mask
    char_mask: np.ndarray  # B×M
    lengths: np.ndarray  # B
    tag_ids: np.ndarray | None  # B×M, padding = 0

    def __len__(self) -> int:
        return len(self.lengths)


def pad_batch(examples: Sequence[Example]) -> Batch:
    if not examples:
        raise ValueError("cannot pad an empty batch")
    b = len(examples)
    m = max(e.num_chars for e in examples)
    w = max(len(e.word_ids) for e in examples)
    n = m + w
    char_ids = np.zeros((b, m), dtype=np.int64)
    bigram_ids = np.zeros((b, m), dtype=np.int64)
    word_ids = np.zeros((b, w), dtype=np.int64)
    positions = np.zeros((b, n), dtype=np.int64)
    rel = np.full((b, n, n), DISTANT, dtype=np.int8)
    valid = np.zeros((b, n), dtype=bool)
    has_tags = all(e.tag_ids is not None for e in examples)
    tags = np.zeros((b, m), dtype=np.int64) if has_tags else None
    for i, e in enumerate(examples):
        mc, wc = e.num_chars, len(e.word_ids)
        slots = np.concatenate([np.arange(mc), m + np.arange(wc)])
        char_ids[i, :mc] = e.char_ids
        bigram_ids[i, :mc] = e.bigram_ids
        word_ids[i, :wc] = e.word_ids
        positions[i, slots] = e.positions
        rel[i][np.ix_(slots, slots)] = e.relations
        valid[i, slots] = True
        if has_tags:
            tags[i, :mc] = e.tag_ids
    lengths = np.array([e.num_chars for e in examples])
    char_mask = np.arange(m)[None, :] < lengths[:, None]
    return Batch(char_ids, bigram_ids, word_ids, positions, rel, valid, char_mask, lengths, tags)


class Model:
    def __init__(self, config: ModelConfig, vocabs: Vocabs, params: dict[str, Tensor]):
        self.config = config
        self.vocabs = vocabs
        self.params = params
        self.scheme = get_scheme(config.scheme)
        self.tag_index = {t: i for i, t in enumerate(vocabs.tags)}
        self.lexicon = Lexicon()
        # lexicon ids are insertion order; map them to word-vocabulary ids
        lex_to_vocab = [0]
        for tok in vocabs.words.tokens:
            if len(tok) >= 2 and tok not in self.lexicon:
                self.lexicon.add(tok)
                lex_to_vocab.append(vocabs.words[tok])
        self._lex_to_vocab = np.array(lex_to_vocab, dtype=np.int64)

    @classmethod
    def create(cls, config: ModelConfig, vocabs: Vocabs, rng: np.random.Generator,
               pretrained: dict[str, tuple[Vocab, np.ndarray]] | None = None) -> Model:
        pretrained = pretrained or {}
        params: dict[str, Tensor] = {}
        dims = {"char": config.char_dim, "bigram": config.bigram_dim, "word": config.word_dim}
        for kind, vocab in (("char", vocabs.chars), ("bigram", vocabs.bigrams), ("word", vocabs.words)):
            dim = dims[kind]
            scale = math.sqrt(3.0 / dim)
            table = rng.uniform(-scale, scale, size=(vocab.size, dim))
            if kind in pretrained:
                pv, pt = pretrained[kind]
                if pt.shape[1] != dim:
                    raise ValueError(f"{kind} embeddings have width {pt.shape[1]}, config says {dim}")
                for tok in pv.tokens:
                    if tok in vocab:
                        table[vocab[tok]] = pt[pv[tok] - 1]
            params[f"emb.{kind}"] = Tensor(table, requires_grad=True, name=f"emb.{kind}")
        enc = config.encoder
        params.update(init_encoder_params(enc, config.char_dim + config.bigram_dim, config.word_dim, rng))
        params.update(init_gru_params(config.char_dim + config.bigram_dim + enc.d_model, config.gru_hidden, rng))
        params.update(init_crf_params(2 * config.gru_hidden, len(vocabs.tags), rng))
        if config.constrained_crf:
            bad = forbidden_transitions(vocabs.tags, config.scheme)
            params["crf.trans"].data[bad] = FORBIDDEN
        return cls(config, vocabs, params)

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ValueError(f"parameter names differ: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"shape mismatch for {k}: stored {v.shape}, model expects {self.params[k].shape}")
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=np.float64)

    # -- featurisation ------------------------------------------------------

    def featurize(self, chars: Sequence[str], tags: Sequence[str] | None = None) -> Example:
        lat = build_lattice(chars, self.lexicon)
        word_ids = self._lex_to_vocab[np.array(lat.word_ids, dtype=np.int64)] if lat.words else np.zeros(0, np.int64)
        tag_ids = None
        if tags is not None:
            try:
                tag_ids = np.array([self.tag_index[t] for t in tags], dtype=np.int64)
            except KeyError as e:
                raise ValueError(f"tag {e.args[0]!r} is not in the model's tag set") from None
        return Example(
            chars=list(chars),
            char_ids=np.array(self.vocabs.chars.lookup(lat.chars), dtype=np.int64),
            bigram_ids=np.array(self.vocabs.bigrams.lookup(lat.bigrams), dtype=np.int64),
            word_ids=np.asarray(word_ids, dtype=np.int64),
            positions=np.array(lat.positions, dtype=np.int64),
            relations=relation_matrix_from_spans(lat.spans).L,
            tag_ids=tag_ids,
        )

    # -- forward ------------------------------------------------------------

    def emissions(self, batch: Batch, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        p = self.params
        cfg = self.config
        rate = cfg.dropout_embed_gru
        x_char = T.concat([T.gather_rows(p["emb.char"], batch.char_ids),
                           T.gather_rows(p["emb.bigram"], batch.bigram_ids)], axis=-1)
        x_char = T.dropout(x_char, rate, training, rng)
        x_word = T.dropout(T.gather_rows(p["emb.word"], batch.word_ids), rate, training, rng)
        x = embed_tokens(x_char, x_word, batch.positions, p)
        h = encode(x, batch.relations, p, cfg.encoder, batch.char_ids.shape[1],
                   valid=batch.valid, training=training, rng=rng)
        g = bigru(T.concat([x_char, h], axis=-1), p, mask=batch.char_mask)
        g = T.dropout(g, rate, training, rng)
        return T.matmul(g, p["crf.w"])

    @property
    def crf(self) -> CRF:
        return CRF(self.params["crf.w"], self.params["crf.trans"], self.config.use_end_transition)

    def sentence_losses(self, batch: Batch, training: bool = False,
                        rng: np.random.Generator | None = None) -> Tensor:
        """Per-sentence negative log-likelihood, shape (B,)."""
        if batch.tag_ids is None:
            raise ValueError("batch has no gold tags")
        em = self.emissions(batch, training, rng)
        return crf_nll(em, batch.tag_ids, self.params["crf.trans"], batch.char_mask, self.config.use_end_transition)

    def loss(self, batch: Batch, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Mean negative log-likelihood over the batch."""
        losses = self.sentence_losses(batch, training, rng)
        return T.scale(T.sum_all(losses), 1.0 / len(batch))

    def decode(self, batch: Batch) -> list[list[int]]:
        em = self.emissions(batch, training=False)
        paths, _ = viterbi_decode(em.data, self.params["crf.trans"].data, batch.lengths,
                                  self.config.use_end_transition)
        return paths

    def predict(self, sentences: Sequence[Sequence[str]], batch_size: int = 16) -> list[list[str]]:
        examples = [self.featurize(s) for s in sentences]
        out: list[list[str]] = []
        for i in range(0, len(examples), batch_size):
            for path in self.decode(pad_batch(examples[i:i + batch_size])):
                out.append([self.vocabs.tags[t] for t in path])
        return out


def build_vocabs(sentences, lexicon_words: Sequence[str], scheme=BIOES,
                 pretrained: dict[str, tuple[Vocab, np.ndarray]] | None = None) -> Vocabs:
    """Character/bigram vocabularies from the corpus (plus pretrained tokens), words from the lexicon."""
    pretrained = pretrained or {}
    scheme = get_scheme(scheme)
    cc, bc = Counter(), Counter()
    labels = set()
    for s in sentences:
        cc.update(s.chars)
        bc.update(make_bigrams(s.chars))
        labels.update(t.split("-", 1)[1] for t in s.tags if t != "O")
    chars = Vocab.from_counts(cc)
    bigrams = Vocab.from_counts(bc)
    for kind, vocab in (("char", chars), ("bigram", bigrams)):
        if kind in pretrained:
            for tok in pretrained[kind][0].tokens:
                vocab.add(tok)
    words = Vocab(lexicon_words)
    return Vocabs(chars, bigrams, words, scheme.tags_for(labels))
