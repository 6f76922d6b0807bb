import itertools
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plte.lattice import (
    CONTAINS, DISTANT, FOLLOWS, INSIDE, OVERLAPS, PRECEDES, SAME, Span, build_lattice, build_lexicon,
    build_relation_matrix, format_lattice, match_words, mirror, read_lexicon, relation,
)

BRIDGE_SENTENCE = "南京市长江大桥"
BRIDGE_WORDS = ["南京", "南京市", "市长", "长江", "大桥"]


@pytest.fixture
def bridge_lexicon():
    return build_lexicon(BRIDGE_WORDS)


def all_spans(m):
    return [Span(p, q) for p in range(1, m + 1) for q in range(p, m + 1)]


def brute_force_matches(sentence, words):
    out = []
    for p in range(len(sentence)):
        for q in range(p + 1, len(sentence)):
            sub = sentence[p:q + 1]
            if sub in words:
                out.append((p + 1, q + 1))
    return sorted(out)


class TestLexicon:
    def test_membership(self, bridge_lexicon):
        assert len(bridge_lexicon) == 5
        for w in BRIDGE_WORDS:
            assert w in bridge_lexicon
        for w in ["南", "京市", "南京市长", "江大"]:
            assert w not in bridge_lexicon

    def test_empty(self):
        lex = build_lexicon([])
        assert len(lex) == 0
        assert match_words("南京市", lex) == []

    def test_rejects_single_character(self):
        with pytest.raises(ValueError):
            build_lexicon(["市"])

    def test_insert_idempotent(self):
        lex = build_lexicon(["南京", "南京"])
        assert len(lex) == 1
        assert lex.add("南京") == lex.lookup("南京")

    def test_read_lexicon_skips_header_and_vectors(self, tmp_path):
        path = tmp_path / "w.vec"
        path.write_text("3 2\n南京 0.1 0.2\n市 0.3 0.4\n长江 0.5 0.6\n", encoding="utf-8")
        lex = read_lexicon(path)
        assert lex.words == ["南京", "长江"]


class TestMatchWords:
    def test_city_bridge_sentence(self, bridge_lexicon):
        spans = [(s.p, s.q) for s, _ in match_words(BRIDGE_SENTENCE, bridge_lexicon)]
        assert spans == [(1, 2), (1, 3), (3, 4), (4, 5), (6, 7)]

    def test_matches_brute_force(self):
        rng = random.Random(7)
        alphabet = "abcde"
        for _ in range(200):
            words = {"".join(rng.choice(alphabet) for _ in range(rng.randint(2, 4))) for _ in range(rng.randint(0, 12))}
            sentence = "".join(rng.choice(alphabet) for _ in range(rng.randint(1, 12)))
            lex = build_lexicon(sorted(words))
            got = [(s.p, s.q) for s, _ in match_words(sentence, lex)]
            assert got == brute_force_matches(sentence, words)

    def test_lexicon_order_irrelevant(self, bridge_lexicon):
        shuffled = build_lexicon(list(reversed(BRIDGE_WORDS)))
        a = build_lattice(BRIDGE_SENTENCE, bridge_lexicon)
        b = build_lattice(BRIDGE_SENTENCE, shuffled)
        assert a.spans == b.spans and a.positions == b.positions


class TestBuildLattice:
    def test_city_bridge_lattice(self, bridge_lexicon):
        lat = build_lattice(BRIDGE_SENTENCE, bridge_lexicon)
        assert lat.num_tokens == 12
        assert lat.positions[:7] == tuple(range(1, 8))
        # 南京 is the first word token and sits at position 1
        assert lat.spans[7] == Span(1, 2) and lat.positions[7] == 1
        assert lat.positions[7:] == (1, 1, 3, 4, 6)

    def test_single_char(self):
        lat = build_lattice("南", build_lexicon([]))
        assert lat.num_tokens == 1
        assert lat.positions == (1,)
        assert lat.bigrams == ("南</s>",)

    def test_bigrams(self, bridge_lexicon):
        lat = build_lattice("南京市", bridge_lexicon)
        assert lat.bigrams == ("南京", "京市", "市</s>")

    def test_empty_sentence_rejected(self, bridge_lexicon):
        with pytest.raises(ValueError):
            build_lattice("", bridge_lexicon)


class TestRelation:
    def test_worked_examples(self):
        assert relation(Span(4, 4), Span(3, 4)) == INSIDE
        assert relation(Span(1, 1), Span(2, 2)) == FOLLOWS

    def test_trivial_cases(self):
        assert relation(Span(2, 3), Span(2, 3)) == SAME
        assert relation(Span(1, 2), Span(5, 6)) == DISTANT
        assert relation(Span(5, 6), Span(1, 2)) == DISTANT
        assert relation(Span(3, 4), Span(1, 2)) == PRECEDES
        assert relation(Span(1, 3), Span(2, 2)) == CONTAINS
        assert relation(Span(1, 2), Span(2, 3)) == OVERLAPS
        assert relation(Span(2, 3), Span(1, 2)) == OVERLAPS

    @pytest.mark.parametrize("m", range(1, 9))
    def test_exhaustive_exclusive_and_mirrored(self, m):
        predicates = {
            FOLLOWS: lambda p, q, k, l: k == q + 1,
            PRECEDES: lambda p, q, k, l: l == p - 1,
            OVERLAPS: lambda p, q, k, l: p < k <= q < l or k < p <= l < q,
            CONTAINS: lambda p, q, k, l: p <= k and l <= q and (p, q) != (k, l),
            SAME: lambda p, q, k, l: (p, q) == (k, l),
            INSIDE: lambda p, q, k, l: k <= p and q <= l and (p, q) != (k, l),
            DISTANT: lambda p, q, k, l: k > q + 1 or l < p - 1,
        }
        for a, b in itertools.product(all_spans(m), repeat=2):
            fired = [r for r, f in predicates.items() if f(a.p, a.q, b.p, b.q)]
            assert len(fired) == 1, (a, b, fired)
            assert relation(a, b) == fired[0]
            assert relation(b, a) == mirror(relation(a, b))


class TestRelationMatrix:
    def test_city_bridge_matrix(self, bridge_lexicon):
        rel = build_relation_matrix(build_lattice(BRIDGE_SENTENCE, bridge_lexicon))
        assert rel.L[0, 1] == FOLLOWS  # L[1][2] in 1-based token indexing
        assert rel.L[3, 9] == INSIDE  # t4 = 长, t10 = 市长
        assert (np.diag(rel.L) == SAME).all()

    def test_single_token(self):
        rel = build_relation_matrix(build_lattice("南", build_lexicon([])))
        assert rel.L.tolist() == [[SAME]]
        assert rel.neighbor_mask.tolist() == [[True]]

    @settings(max_examples=60, deadline=None)
    @given(st.text(alphabet="abc", min_size=1, max_size=8),
           st.sets(st.text(alphabet="abc", min_size=2, max_size=3), max_size=8))
    def test_matches_pairwise_relation(self, sentence, words):
        lat = build_lattice(sentence, build_lexicon(sorted(words)))
        rel = build_relation_matrix(lat)
        n = lat.num_tokens
        assert n == len(sentence) + len(lat.words)
        for i in range(n):
            for j in range(n):
                assert rel.L[i, j] == relation(lat.spans[i], lat.spans[j])
                assert rel.L[j, i] == mirror(rel.L[i, j])
                assert rel.neighbor_mask[i, j] == (rel.L[i, j] != DISTANT)
        assert rel.neighbor_mask.diagonal().all()

    def test_format_dump(self, bridge_lexicon):
        lat = build_lattice(BRIDGE_SENTENCE, bridge_lexicon)
        text = format_lattice(lat, build_relation_matrix(lat))
        assert "市长" in text
        rows = [line.split("\t") for line in text.splitlines() if line.startswith("  t1\t")]
        assert rows[0][2] == "r1"
