"""Porous lattice transformer encoder.

Tokens are laid out characters-first. Every function accepts optional leading
batch axes; a batch lays sentences out as ``[chars padded to M][words padded
to W]`` with a validity mask, which keeps the character rows of every
sentence at the front.

Attention for query token i over keys j uses

    scores[i, j] = (q_i . k_j + q_i . rk[L[i, j]]) / sqrt(d_k)
    out_i        = sum_j alpha[i, j] * (v_j + rv[L[i, j]])

where ``rk``/``rv`` are learned relation embeddings. With the porous
mechanism on, keys with relation r7 are masked out and a pivot key (mean of
all tokens, relation id 8) is appended.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .lattice import DISTANT, NUM_RELATIONS, PIVOT
from .tensor import Tensor


@dataclass
class EncoderConfig:
    d_model: int = 128
    heads: int = 6
    layers: int = 1
    d_r: int | None = None  # relation embedding width; must equal the per-head width
    dropout: float = 0.3
    use_lasa: bool = True
    use_porous: bool = True
    use_residual: bool = False
    use_layer_norm: bool = False
    max_len: int = 512

    def __post_init__(self):
        if self.heads < 1 or self.d_model < self.heads:
            raise ValueError(f"need 1 <= heads <= d_model, got heads={self.heads}, d_model={self.d_model}")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.d_r is None:
            self.d_r = self.head_dim
        if self.d_r != self.head_dim:
            raise ValueError(f"d_r={self.d_r} must equal the per-head width {self.head_dim}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    def to_dict(self) -> dict:
        return asdict(self)


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_encoder_params(cfg: EncoderConfig, char_in: int, word_in: int,
                        rng: np.random.Generator) -> dict[str, Tensor]:
    """Projection, position, relation and attention parameters.

    ``char_in`` is the width of a character's char+bigram vector, ``word_in``
    the width of a word vector. Vocabulary tables live with the model.
    """
    d, h, dk = cfg.d_model, cfg.heads, cfg.head_dim
    p = {
        "proj.char.w": xavier(rng, char_in, d),
        "proj.char.b": np.zeros(d),
        "proj.word.w": xavier(rng, word_in, d),
        "proj.word.b": np.zeros(d),
        "emb.position": rng.uniform(-0.1, 0.1, size=(cfg.max_len, d)),
    }
    if cfg.use_lasa:
        p["rel.key"] = rng.uniform(-0.1, 0.1, size=(NUM_RELATIONS, dk))
        p["rel.value"] = rng.uniform(-0.1, 0.1, size=(NUM_RELATIONS, dk))
    for layer in range(cfg.layers):
        # per-head projections stored side by side: columns [h*dk:(h+1)*dk] are head h
        p[f"layer{layer}.wq"] = np.concatenate([xavier(rng, d, dk) for _ in range(h)], axis=1)
        p[f"layer{layer}.wk"] = np.concatenate([xavier(rng, d, dk) for _ in range(h)], axis=1)
        p[f"layer{layer}.wv"] = np.concatenate([xavier(rng, d, dk) for _ in range(h)], axis=1)
        p[f"layer{layer}.wo"] = xavier(rng, h * dk, d)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


def embed_tokens(x_char: Tensor, x_word: Tensor, positions: np.ndarray,
                 params: dict[str, Tensor], max_len: int | None = None) -> Tensor:
    """Project character and word inputs to d_model and add position embeddings.

    ``x_char`` is (..., M, d_c + d_b), ``x_word`` is (..., W, d_w) and
    ``positions`` (..., M + W) holds each token's absolute position (a word
    takes the position of its first character).
    """
    positions = np.asarray(positions)
    table = params["emb.position"]
    limit = table.shape[0] if max_len is None else max_len
    if positions.size and positions.max() >= limit:
        raise ValueError(f"position {int(positions.max())} exceeds the position table ({limit} rows)")
    hc = T.add(T.matmul(x_char, params["proj.char.w"]), params["proj.char.b"])
    hw = T.add(T.matmul(x_word, params["proj.word.w"]), params["proj.word.b"])
    return T.add(T.concat([hc, hw], axis=-2), T.gather_rows(table, positions))


def extend_with_pivot(L: np.ndarray) -> np.ndarray:
    """Append one row and column of the pivot relation id."""
    n = L.shape[-1]
    out = np.full(L.shape[:-2] + (n + 1, n + 1), PIVOT, dtype=L.dtype)
    out[..., :n, :n] = L
    return out


def expand_relations(L: np.ndarray, key_table: Tensor, value_table: Tensor,
                     pivot: bool) -> tuple[Tensor, Tensor]:
    """Look up key- and value-side relation embeddings for every token pair.

    Returns tensors of shape (..., N', N', d) with N' = N + 1 when ``pivot``.
    """
    L = np.asarray(L)
    if pivot:
        L = extend_with_pivot(L)
    ids = L.astype(np.int64) - 1
    return T.gather_rows(key_table, ids), T.gather_rows(value_table, ids)


def attention_mask(L: np.ndarray, valid: np.ndarray | None, porous: bool) -> np.ndarray:
    """Boolean (..., N, N') key mask for the N real queries.

    Porous: neighbours (relation != r7) plus the pivot column. Otherwise all
    valid keys. Padded query rows keep their diagonal (or the pivot) so no
    row is empty; their outputs are never read.
    """
    L = np.asarray(L)
    n = L.shape[-1]
    if valid is None:
        valid = np.ones(L.shape[:-1], dtype=bool)
    keys = valid[..., None, :]
    if porous:
        m = (L != DISTANT) & keys
        return np.concatenate([m, np.ones(m.shape[:-1] + (1,), dtype=bool)], axis=-1)
    return keys | np.eye(n, dtype=bool)


def lattice_attention(x_query: Tensor, x_keys: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
                      rk: Tensor | None, rv: Tensor | None, mask: np.ndarray | None) -> Tensor:
    """Single-head lattice-aware attention.

    ``x_query`` (N, d_model) are the querying tokens, ``x_keys`` (N', d_model)
    the keys/values (tokens followed by the pivot when present). ``rk`` and
    ``rv`` are (N, N', d) relation embeddings for those query/key pairs, or
    None to drop the relation terms.
    """
    q = T.matmul(x_query, wq)
    k = T.matmul(x_keys, wk)
    v = T.matmul(x_keys, wv)
    return _attend(q, k, v, rk, rv, mask)


def attention_weights(q: Tensor, k: Tensor, rk: Tensor | None, mask: np.ndarray | None) -> Tensor:
    """Masked softmax of the relation-biased, scaled dot-product scores."""
    scores = T.matmul(q, T.swapaxes(k, -1, -2))
    if rk is not None:
        scores = T.add(scores, T.relation_score_bias(q, rk))
    return T.softmax_rows(T.scale(scores, 1.0 / math.sqrt(q.shape[-1])), mask)


def _attend(q, k, v, rk, rv, mask):
    alpha = attention_weights(q, k, rk, mask)
    out = T.matmul(alpha, v)
    if rv is not None:
        out = T.add(out, T.relation_value_bias(alpha, rv))
    return out


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # (..., N, H*d) -> (..., H, N, d)
    shape = x.shape
    x = T.reshape(x, shape[:-1] + (heads, shape[-1] // heads))
    return T.swapaxes(x, -3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    x = T.swapaxes(x, -3, -2)
    shape = x.shape
    return T.reshape(x, shape[:-2] + (shape[-2] * shape[-1],))


def pivot_mean(x: Tensor, valid: np.ndarray | None) -> Tensor:
    """Mean of the valid token rows, shape (..., 1, d)."""
    if valid is None:
        return T.mean_rows(x, keepdims=True)
    w = valid.astype(np.float64)
    count = w.sum(axis=-1)[..., None, None]
    summed = T.sum_axis(T.mul(x, w[..., None]), -2, keepdims=True)
    return T.mul(summed, 1.0 / count)


def porous_multihead(x: Tensor, L: np.ndarray, params: dict[str, Tensor], layer: int,
                     cfg: EncoderConfig, valid: np.ndarray | None = None) -> Tensor:
    """One porous multi-head attention layer, (..., N, d_model) -> (..., N, d_model)."""
    L = np.asarray(L)
    keys = x
    if cfg.use_porous:
        keys = T.concat([x, pivot_mean(x, valid)], axis=-2)
    mask = attention_mask(L, valid, cfg.use_porous)
    rk = rv = None
    if cfg.use_lasa:
        ids = extend_with_pivot(L)[..., :L.shape[-1], :] if cfg.use_porous else L
        ids = ids.astype(np.int64)[..., None, :, :] - 1  # head axis for broadcasting
        rk = T.gather_rows(params["rel.key"], ids)
        rv = T.gather_rows(params["rel.value"], ids)
    h = cfg.heads
    q = _split_heads(T.matmul(x, params[f"layer{layer}.wq"]), h)
    k = _split_heads(T.matmul(keys, params[f"layer{layer}.wk"]), h)
    v = _split_heads(T.matmul(keys, params[f"layer{layer}.wv"]), h)
    z = _attend(q, k, v, rk, rv, mask[..., None, :, :])
    return T.matmul(_merge_heads(z), params[f"layer{layer}.wo"])


def encode(x: Tensor, L: np.ndarray, params: dict[str, Tensor], cfg: EncoderConfig, num_chars: int,
           valid: np.ndarray | None = None, training: bool = False,
           rng: np.random.Generator | None = None) -> Tensor:
    """Run all encoder layers and keep the first ``num_chars`` token rows."""
    for layer in range(cfg.layers):
        out = porous_multihead(x, L, params, layer, cfg, valid)
        out = T.dropout(out, cfg.dropout, training, rng)
        if cfg.use_residual:
            out = T.add(out, x)
        if cfg.use_layer_norm:
            out = T.layer_norm(out)
        x = out
    return T.index(x, (..., slice(0, num_chars), slice(None)))
