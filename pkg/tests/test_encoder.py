import math

import numpy as np
import pytest

from plte import tensor as T
from plte.encoder import (
    EncoderConfig, attention_mask, attention_weights, embed_tokens, encode, expand_relations,
    extend_with_pivot, init_encoder_params, lattice_attention, pivot_mean, porous_multihead,
)
from plte.lattice import DISTANT, PIVOT, Span, relation_matrix_from_spans
from plte.tensor import ComputationRecord, Tensor

from gradcheck import check_scalar
from oracles import neighbor_set_layer, random_lattice

SMALL = dict(d_model=12, heads=3, dropout=0.0)


def small(**kw):
    return EncoderConfig(**{**SMALL, **kw})


def make_params(cfg, seed=0):
    params = init_encoder_params(cfg, 6, 5, np.random.default_rng(seed))
    # relation tables start small; widen them so the relation terms matter in comparisons
    for name in ("rel.key", "rel.value"):
        if name in params:
            params[name].data = np.random.default_rng(seed + 100).normal(size=params[name].shape)
    return params


class TestConfig:
    def test_defaults(self):
        cfg = EncoderConfig()
        assert cfg.head_dim == 21 and cfg.d_r == 21
        params = init_encoder_params(cfg, 100, 50, np.random.default_rng(0))
        assert params["layer0.wq"].shape == (128, 126)
        assert params["layer0.wo"].shape == (126, 128)
        assert params["rel.key"].shape == (8, 21)

    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            EncoderConfig(d_r=10)
        with pytest.raises(ValueError):
            EncoderConfig(heads=0)
        with pytest.raises(ValueError):
            EncoderConfig(dropout=1.0)

    def test_no_lasa_has_no_relation_tables(self):
        params = init_encoder_params(small(use_lasa=False), 6, 5, np.random.default_rng(0))
        assert not any(k.startswith("rel.") for k in params)

    def test_multiple_layers(self):
        params = init_encoder_params(small(layers=3), 6, 5, np.random.default_rng(0))
        assert {"layer0.wq", "layer1.wq", "layer2.wo"} <= set(params)


class TestMasks:
    def test_pivot_extension(self):
        L = np.array([[5, 1], [2, 5]], dtype=np.int8)
        ext = extend_with_pivot(L)
        assert ext.shape == (3, 3)
        assert (ext[:, 2] == PIVOT).all() and (ext[2] == PIVOT).all()

    def test_porous_mask(self):
        spans = [Span(1, 1), Span(2, 2), Span(3, 3), Span(4, 4)]
        L = relation_matrix_from_spans(spans).L
        mask = attention_mask(L, None, porous=True)
        assert mask.shape == (4, 5)
        assert mask[:, 4].all()
        np.testing.assert_array_equal(mask[:, :4], L != DISTANT)
        assert not mask[0, 2]

    def test_dense_mask_ignores_padding(self):
        L = np.full((3, 3), DISTANT, dtype=np.int8)
        valid = np.array([True, True, False])
        mask = attention_mask(L, valid, porous=False)
        np.testing.assert_array_equal(mask, [[1, 1, 0], [1, 1, 0], [1, 1, 1]])

    def test_expand_relations_shape(self):
        _, L = random_lattice(np.random.default_rng(0))
        rk, rv = expand_relations(L, Tensor(np.eye(8)), Tensor(np.eye(8)), pivot=True)
        n = L.shape[0]
        assert rk.shape == (n + 1, n + 1, 8)
        np.testing.assert_array_equal(rk.data.argmax(-1), extend_with_pivot(L) - 1)


class TestNeighborSetOracle:
    @pytest.mark.parametrize("flags", [dict(), dict(use_lasa=False), dict(use_porous=False),
                                       dict(use_lasa=False, use_porous=False)])
    def test_matches_per_element_form(self, flags):
        cfg = small(**flags)
        rng = np.random.default_rng(1)
        for trial in range(20):
            spans, L = random_lattice(rng)
            params = make_params(cfg, trial)
            x = rng.normal(size=(len(spans), cfg.d_model))
            got = porous_multihead(Tensor(x), L, params, 0, cfg).data
            np.testing.assert_allclose(got, neighbor_set_layer(x, L, params, 0, cfg), rtol=0, atol=1e-10)

    def test_vanilla_attention(self):
        cfg = small(use_lasa=False, use_porous=False)
        params = make_params(cfg)
        x = np.random.default_rng(0).normal(size=(5, 12))
        got = porous_multihead(Tensor(x), np.full((5, 5), DISTANT), params, 0, cfg).data
        heads = []
        for h in range(3):
            cols = slice(4 * h, 4 * h + 4)
            q, k, v = (x @ params[f"layer0.{w}"].data[:, cols] for w in ("wq", "wk", "wv"))
            s = q @ k.T / 2.0
            a = np.exp(s - s.max(axis=1, keepdims=True))
            heads.append((a / a.sum(axis=1, keepdims=True)) @ v)
        np.testing.assert_allclose(got, np.concatenate(heads, axis=1) @ params["layer0.wo"].data,
                                   rtol=0, atol=1e-12)


class TestPorousMasking:
    def _distant_pairs(self, L):
        return [(i, j) for i in range(L.shape[0]) for j in range(L.shape[0]) if L[i, j] == DISTANT]

    def test_distant_weights_are_zero(self):
        cfg = small()
        rng = np.random.default_rng(2)
        found = 0
        for trial in range(30):
            spans, L = random_lattice(rng)
            params = make_params(cfg, trial)
            x = Tensor(rng.normal(size=(len(spans), 12)))
            keys = T.concat([x, pivot_mean(x, None)], axis=-2)
            rk, _ = expand_relations(L, params["rel.key"], params["rel.value"], pivot=True)
            q = T.matmul(x, T.index(params["layer0.wq"], (slice(None), slice(0, 4))))
            k = T.matmul(keys, T.index(params["layer0.wk"], (slice(None), slice(0, 4))))
            alpha = attention_weights(q, k, T.index(rk, slice(0, len(spans))), attention_mask(L, None, True)).data
            for i, j in self._distant_pairs(L):
                assert alpha[i, j] == 0.0
                found += 1
            assert (alpha[:, -1] > 0).all()
        assert found > 0

    def test_distant_keys_get_zero_direct_gradient(self):
        cfg = small(heads=1, d_model=4)
        rng = np.random.default_rng(3)
        for trial in range(30):
            spans, L = random_lattice(rng)
            n = len(spans)
            params = make_params(cfg, trial)
            x = rng.normal(size=(n, 4))
            # keys are a separate leaf from queries, with the pivot held constant
            keys = Tensor(np.vstack([x, x.mean(axis=0)]), requires_grad=True)
            rk, rv = expand_relations(L, params["rel.key"], params["rel.value"], pivot=True)
            rk, rv = T.index(rk, slice(0, n)), T.index(rv, slice(0, n))
            for i in range(n):
                keys.grad = None
                with ComputationRecord() as rec:
                    out = lattice_attention(Tensor(x), keys, params["layer0.wq"], params["layer0.wk"],
                                            params["layer0.wv"], rk, rv, attention_mask(L, None, True))
                    loss = T.sum_all(T.mul(T.index(out, i), rng.normal(size=4)))
                rec.backward(loss)
                for j in range(n):
                    if L[i, j] == DISTANT:
                        assert (keys.grad[j] == 0.0).all()

    def test_non_neighbour_reaches_query_only_through_pivot(self):
        cfg = small()
        rng = np.random.default_rng(4)
        checked = 0
        while checked < 40:
            spans, L = random_lattice(rng)
            pairs = self._distant_pairs(L)
            if not pairs:
                continue
            i, j = pairs[int(rng.integers(len(pairs)))]
            params = make_params(cfg, checked)
            x = rng.normal(size=(len(spans), 12))
            keep = [t for t in range(len(spans)) if t != j]
            row = keep.index(i)
            full = porous_multihead(Tensor(x), L, params, 0, cfg).data[i]
            ablated = porous_multihead(Tensor(x[keep]), L[np.ix_(keep, keep)], params, 0, cfg).data[row]
            # the oracle sees only the remaining tokens; only the pivot differs between the two runs
            with_full_pivot = neighbor_set_layer(x, L, params, 0, cfg, pivot=x.mean(axis=0), keep=keep)[row]
            with_ablated_pivot = neighbor_set_layer(x, L, params, 0, cfg, keep=keep)[row]
            np.testing.assert_allclose(full, with_full_pivot, rtol=0, atol=1e-9)
            np.testing.assert_allclose(ablated, with_ablated_pivot, rtol=0, atol=1e-9)
            checked += 1


class TestInvariances:
    def test_word_permutation(self):
        cfg = small()
        rng = np.random.default_rng(5)
        done = 0
        while done < 20:
            spans, L = random_lattice(rng)
            m = sum(s.p == s.q for s in spans)
            if len(spans) - m < 2:
                continue
            params = make_params(cfg, done)
            x = rng.normal(size=(len(spans), 12))
            perm = np.concatenate([np.arange(m), m + rng.permutation(len(spans) - m)])
            a = porous_multihead(Tensor(x), L, params, 0, cfg).data
            b = porous_multihead(Tensor(x[perm]), L[np.ix_(perm, perm)], params, 0, cfg).data
            np.testing.assert_allclose(b, a[perm], rtol=0, atol=1e-12)
            done += 1

    def test_padding_does_not_leak(self):
        cfg = small()
        rng = np.random.default_rng(6)
        params = make_params(cfg)
        lattices = [random_lattice(rng) for _ in range(4)]
        n = max(len(s) for s, _ in lattices)
        xb = rng.normal(size=(4, n, 12))
        Lb = np.full((4, n, n), DISTANT, dtype=np.int8)
        valid = np.zeros((4, n), dtype=bool)
        for b, (spans, L) in enumerate(lattices):
            Lb[b, :len(spans), :len(spans)] = L
            valid[b, :len(spans)] = True
        for porous in (True, False):
            c = small(use_porous=porous)
            out = porous_multihead(Tensor(xb), Lb, params, 0, c, valid).data
            for b, (spans, L) in enumerate(lattices):
                k = len(spans)
                solo = porous_multihead(Tensor(xb[b, :k]), L, params, 0, c).data
                np.testing.assert_allclose(out[b, :k], solo, rtol=0, atol=1e-12)


class TestEncode:
    def test_embed_positions(self):
        params = make_params(small())
        xc, xw = Tensor(np.zeros((3, 6))), Tensor(np.zeros((1, 5)))
        out = embed_tokens(xc, xw, np.array([1, 2, 3, 1]), params).data
        pos = params["emb.position"].data
        np.testing.assert_array_equal(out[3], out[0])
        np.testing.assert_allclose(out[1] - out[0], pos[2] - pos[1])
        with pytest.raises(ValueError, match="position"):
            embed_tokens(xc, xw, np.array([1, 2, 3, 600]), params)

    def test_returns_character_rows(self):
        cfg = small(layers=2, use_residual=True, use_layer_norm=True)
        params = make_params(cfg)
        spans, L = random_lattice(np.random.default_rng(7))
        m = sum(s.p == s.q for s in spans)
        out = encode(Tensor(np.ones((len(spans), 12))), L, params, cfg, m)
        assert out.shape == (m, 12)
        np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-12)

    def test_dropout_only_in_training(self):
        cfg = small(dropout=0.5)
        params = make_params(cfg)
        spans, L = random_lattice(np.random.default_rng(8))
        x = Tensor(np.random.default_rng(0).normal(size=(len(spans), 12)))
        a = encode(x, L, params, cfg, 1).data
        b = encode(x, L, params, cfg, 1).data
        c = encode(x, L, params, cfg, 1, training=True, rng=np.random.default_rng(0)).data
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)


class TestGradients:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_layer_parameters(self, seed):
        cfg = small(d_model=6, heads=2)
        rng = np.random.default_rng(seed)
        spans, L = random_lattice(rng, max_tokens=5)
        params = make_params(cfg, seed)
        x = Tensor(rng.normal(size=(len(spans), 6)), requires_grad=True)
        w = rng.normal(size=(len(spans), 6))
        wanted = {k: v for k, v in params.items() if k.startswith(("layer0", "rel."))}
        wanted["x"] = x
        errors = check_scalar(lambda: T.sum_all(T.mul(porous_multihead(x, L, params, 0, cfg), w)), wanted)
        assert max(errors.values()) < 1e-4, errors

    def test_relation_gradients_follow_usage(self):
        # rows of the relation tables for relations absent from the lattice get no gradient
        cfg = small()
        params = make_params(cfg)
        spans = [Span(1, 1), Span(2, 2)]
        L = relation_matrix_from_spans(spans).L
        x = Tensor(np.random.default_rng(0).normal(size=(2, 12)))
        with ComputationRecord() as rec:
            loss = T.sum_all(porous_multihead(x, L, params, 0, cfg))
        rec.backward(loss)
        used = {1, 2, 5, 8}
        for r in range(1, 9):
            touched = bool(np.any(params["rel.value"].grad[r - 1] != 0))
            assert touched == (r in used), r
        assert math.isfinite(float(loss.data))
