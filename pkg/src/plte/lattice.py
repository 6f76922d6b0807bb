"""Word-character lattices: lexicon matching, token layout, span relations.

Character indices are 1-based throughout: a span ``Span(p, q)`` covers
characters ``p..q`` inclusive, and a single character ``i`` is ``Span(i, i)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

# relation ids; 1..7 relate two spans, PIVOT relates a token to the shared pivot
FOLLOWS = 1  # r1: b starts right after a ends
PRECEDES = 2  # r2: b ends right before a starts
OVERLAPS = 3  # r3: partial overlap, either direction
CONTAINS = 4  # r4: a properly contains b
SAME = 5  # r5: identical spans
INSIDE = 6  # r6: a properly inside b
DISTANT = 7  # r7: disjoint, not adjacent
PIVOT = 8
NUM_RELATIONS = 8

_MIRROR = {FOLLOWS: PRECEDES, PRECEDES: FOLLOWS, OVERLAPS: OVERLAPS,
           CONTAINS: INSIDE, SAME: SAME, INSIDE: CONTAINS, DISTANT: DISTANT}


def mirror(rel: int) -> int:
    """Relation of (b, a) given the relation of (a, b)."""
    return _MIRROR[rel]


@dataclass(frozen=True, order=True)
class Span:
    p: int
    q: int

    def __post_init__(self):
        if not 1 <= self.p <= self.q:
            raise ValueError(f"invalid span ({self.p}, {self.q})")

    @property
    def is_char(self) -> bool:
        return self.p == self.q

    def __len__(self) -> int:
        return self.q - self.p + 1


class _Node:
    __slots__ = ("children", "word_id")

    def __init__(self):
        self.children: dict[str, _Node] = {}
        self.word_id: int | None = None


class Lexicon:
    """Character trie; each stored word carries a stable id (1-based, insertion order)."""

    def __init__(self):
        self._root = _Node()
        self._words: list[str] = []

    def __len__(self) -> int:
        return len(self._words)

    def __contains__(self, word: str) -> bool:
        return self.lookup(word) is not None

    def __iter__(self):
        return iter(self._words)

    @property
    def words(self) -> list[str]:
        return list(self._words)

    def add(self, word: str) -> int:
        if len(word) < 2:
            raise ValueError(f"lexicon words need at least 2 characters: {word!r}")
        node = self._root
        for ch in word:
            node = node.children.setdefault(ch, _Node())
        if node.word_id is None:
            self._words.append(word)
            node.word_id = len(self._words)
        return node.word_id

    def lookup(self, word: str) -> int | None:
        node = self._root
        for ch in word:
            node = node.children.get(ch)
            if node is None:
                return None
        return node.word_id

    def matches_from(self, chars: Sequence[str], start: int) -> Iterable[tuple[int, int]]:
        """Yield (end, word_id) for every lexicon word beginning at 0-based ``start``."""
        node = self._root
        for end in range(start, len(chars)):
            node = node.children.get(chars[end])
            if node is None:
                return
            if node.word_id is not None:
                yield end, node.word_id


def build_lexicon(words: Iterable[str]) -> Lexicon:
    """Build a lexicon from a word list; an empty list gives an empty lexicon."""
    words = list(words)
    lex = Lexicon()
    if not words:
        logger.warning("empty lexicon: the lattice degrades to characters only")
    for w in words:
        if not isinstance(w, str) or len(w) < 2:
            raise ValueError(f"lexicon words need at least 2 characters: {w!r}")
        lex.add(w)
    return lex


def read_lexicon(path) -> Lexicon:
    """One word per line; extra whitespace-separated fields (embedding rows) are ignored.

    A word2vec ``count dim`` header and single-character entries are skipped.
    """
    words = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            fields = line.split()
            if not fields:
                continue
            if lineno == 1 and len(fields) == 2 and all(x.isdigit() for x in fields):
                continue
            if len(fields[0]) >= 2:
                words.append(fields[0])
    return build_lexicon(words)


def match_words(sentence: Sequence[str], lexicon: Lexicon) -> list[tuple[Span, int]]:
    """All lexicon words occurring as contiguous substrings, sorted by (p, q)."""
    # plain trie scan from every start; an Aho-Corasick automaton would drop the
    # O(M * longest word) factor if lexicons ever get large
    out = []
    for start in range(len(sentence)):
        for end, wid in lexicon.matches_from(sentence, start):
            out.append((Span(start + 1, end + 1), wid))
    out.sort(key=lambda x: (x[0].p, x[0].q, x[1]))
    return out


@dataclass(frozen=True)
class LatticeSequence:
    """Characters first, then matched words, as one token sequence.

    ``chars`` and ``bigrams`` hold vocabulary ids (or raw strings before
    indexing), ``words`` holds ``(Span, word_id)`` pairs.
    """

    chars: tuple
    bigrams: tuple
    words: tuple[tuple[Span, int], ...]
    spans: tuple[Span, ...] = field(repr=False)
    positions: tuple[int, ...] = field(repr=False)

    @property
    def num_chars(self) -> int:
        return len(self.chars)

    @property
    def num_tokens(self) -> int:
        return len(self.spans)

    @property
    def word_ids(self) -> tuple[int, ...]:
        return tuple(w for _, w in self.words)


BIGRAM_END = "</s>"


def make_bigrams(chars: Sequence[str]) -> list[str]:
    """(c_i, c_{i+1}) pairs; the last character pairs with an end sentinel."""
    nxt = list(chars[1:]) + [BIGRAM_END]
    return [a + b for a, b in zip(chars, nxt)]


def build_lattice(sentence: Sequence[str], lexicon: Lexicon) -> LatticeSequence:
    sentence = list(sentence)
    if not sentence:
        raise ValueError("cannot build a lattice for an empty sentence")
    words = match_words(sentence, lexicon)
    m = len(sentence)
    spans = [Span(i, i) for i in range(1, m + 1)] + [s for s, _ in words]
    positions = [s.p for s in spans]
    return LatticeSequence(chars=tuple(sentence), bigrams=tuple(make_bigrams(sentence)),
                           words=tuple(words), spans=tuple(spans), positions=tuple(positions))


def relation(a: Span, b: Span) -> int:
    """Relation id of the ordered pair (a, b) = (e_{p:q}, e_{k:l})."""
    p, q, k, l = a.p, a.q, b.p, b.q
    if k == q + 1:
        return FOLLOWS
    if l == p - 1:
        return PRECEDES
    if k > q + 1 or l < p - 1:
        return DISTANT
    if p == k and q == l:
        return SAME
    if p <= k and l <= q:
        return CONTAINS
    if k <= p and q <= l:
        return INSIDE
    return OVERLAPS


@dataclass(frozen=True)
class RelationMatrix:
    L: np.ndarray  # N×N int8, values 1..7
    neighbor_mask: np.ndarray  # N×N bool, L != DISTANT

    @property
    def size(self) -> int:
        return self.L.shape[0]


def relation_matrix_from_spans(spans: Sequence[Span]) -> RelationMatrix:
    p = np.array([s.p for s in spans])
    q = np.array([s.q for s in spans])
    P, Q = p[:, None], q[:, None]
    K, Lq = p[None, :], q[None, :]
    # vectorised version of relation(); order of assignment mirrors its branch order
    L = np.full((len(spans), len(spans)), OVERLAPS, dtype=np.int8)
    L[(K <= P) & (Q <= Lq)] = INSIDE
    L[(P <= K) & (Lq <= Q)] = CONTAINS
    L[(P == K) & (Q == Lq)] = SAME
    L[(K > Q + 1) | (Lq < P - 1)] = DISTANT
    L[Lq == P - 1] = PRECEDES
    L[K == Q + 1] = FOLLOWS
    return RelationMatrix(L=L, neighbor_mask=L != DISTANT)


def build_relation_matrix(lat: LatticeSequence) -> RelationMatrix:
    return relation_matrix_from_spans(lat.spans)


RELATION_LABELS = {i: f"r{i}" for i in range(1, NUM_RELATIONS + 1)}


def format_lattice(lat: LatticeSequence, rel: RelationMatrix, word_surface=None) -> str:
    """Text dump of tokens, relation matrix and porous mask (1-based token indices)."""
    lines = ["tokens:", "  t\tspan\tpos\ttext"]
    for t, (span, pos) in enumerate(zip(lat.spans, lat.positions), 1):
        text = "".join(str(c) for c in lat.chars[span.p - 1:span.q])
        lines.append(f"  {t}\t{span.p}:{span.q}\t{pos}\t{text}")
    n = lat.num_tokens
    header = "\t".join(f"t{j}" for j in range(1, n + 1))
    lines.append("relations:")
    lines.append(f"  \t{header}")
    for i in range(n):
        lines.append(f"  t{i + 1}\t" + "\t".join(RELATION_LABELS[int(v)] for v in rel.L[i]))
    lines.append("mask:")
    lines.append(f"  \t{header}")
    for i in range(n):
        lines.append(f"  t{i + 1}\t" + "\t".join("1" if v else "." for v in rel.neighbor_mask[i]))
    return "\n".join(lines)
