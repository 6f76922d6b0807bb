"""BiGRU over character states and a linear-chain CRF.

CRF transition scores are an (|Y|+1)×(|Y|+1) matrix ``trans``: entry
``trans[a, b]`` scores tag a followed by tag b. Row ``|Y|`` is the virtual
start state, column ``|Y|`` the virtual end state (used only when end
transitions are enabled). Everything is in the log domain.

Batched inputs carry a leading batch axis and a boolean ``mask`` (B, M)
marking real positions; masks must be left-aligned (a prefix of Trues).
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .encoder import xavier
from .tensor import Tensor

FORBIDDEN = -1e4


# ---------------------------------------------------------------------------
# GRU


def init_gru_params(d_in: int, d_h: int, rng: np.random.Generator, prefix: str = "gru") -> dict[str, Tensor]:
    """Independent forward ("fw") and backward ("bw") cells.

    Input weights are (d_in, 3·d_h) with gate blocks [update | reset | candidate].
    """
    out = {}
    for d in ("fw", "bw"):
        out[f"{prefix}.{d}.w"] = np.concatenate([xavier(rng, d_in, d_h) for _ in range(3)], axis=1)
        out[f"{prefix}.{d}.u"] = np.concatenate([xavier(rng, d_h, d_h) for _ in range(3)], axis=1)
        out[f"{prefix}.{d}.b"] = np.zeros(3 * d_h)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in out.items()}


def gru_step(gx: Tensor, h: Tensor, u: Tensor) -> Tensor:
    """One GRU step given the precomputed input term ``gx = x W + b``.

    z = sigmoid(.), r = sigmoid(.), n = tanh(x W_n + (r * h) U_n + b_n),
    h' = (1 - z) * h + z * n
    """
    d = h.shape[-1]
    uzr = T.index(u, (slice(None), slice(0, 2 * d)))
    un = T.index(u, (slice(None), slice(2 * d, 3 * d)))
    zr = T.sigmoid(T.add(T.index(gx, (..., slice(0, 2 * d))), T.matmul(h, uzr)))
    z = T.index(zr, (..., slice(0, d)))
    r = T.index(zr, (..., slice(d, 2 * d)))
    n = T.tanh(T.add(T.index(gx, (..., slice(2 * d, 3 * d))), T.matmul(T.mul(r, h), un)))
    return T.add(h, T.mul(z, T.sub(n, h)))


def _run_direction(x: Tensor, w: Tensor, u: Tensor, b: Tensor, mask: np.ndarray | None,
                   reverse: bool) -> Tensor:
    m = x.shape[-2]
    d = u.shape[0]
    gx = T.add(T.matmul(x, w), b)
    h = Tensor(np.zeros(x.shape[:-2] + (d,)))
    states: list[Tensor | None] = [None] * m
    steps = range(m - 1, -1, -1) if reverse else range(m)
    for t in steps:
        h_new = gru_step(T.index(gx, (..., t, slice(None))), h, u)
        if mask is not None:
            # padded steps keep the state; for the reverse pass this keeps it zero until the last real char
            h_new = T.where(mask[..., t, None], h_new, h)
        h = h_new
        states[t] = h
    return T.stack(states, axis=-2)


def bigru(x: Tensor, params: dict[str, Tensor], mask: np.ndarray | None = None,
          prefix: str = "gru") -> Tensor:
    """(..., M, d_in) -> (..., M, 2·d_h); row t is [forward state ; backward state]."""
    if x.shape[-2] < 1:
        raise ValueError("bigru needs at least one time step")
    if x.ndim == 2:
        out = bigru(T.reshape(x, (1,) + x.shape), params, None if mask is None else np.asarray(mask)[None], prefix)
        return T.reshape(out, out.shape[1:])
    fw = _run_direction(x, params[f"{prefix}.fw.w"], params[f"{prefix}.fw.u"], params[f"{prefix}.fw.b"],
                        mask, reverse=False)
    bw = _run_direction(x, params[f"{prefix}.bw.w"], params[f"{prefix}.bw.u"], params[f"{prefix}.bw.b"],
                        mask, reverse=True)
    return T.concat([fw, bw], axis=-1)


# ---------------------------------------------------------------------------
# CRF over emission scores


def _as_mask(shape: tuple[int, ...], mask) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    return np.asarray(mask, dtype=bool)


def score_sequence(em: Tensor, tags, trans: Tensor, mask=None, use_end: bool = True) -> Tensor:
    """Log-domain score of ``tags`` under emissions (..., M, Y); shape (...)."""
    em = T.as_tensor(em)
    tags = np.asarray(tags, dtype=np.int64)
    ny = em.shape[-1]
    if tags.shape != em.shape[:-1]:
        raise ValueError(f"tags shape {tags.shape} does not match emissions {em.shape}")
    if tags.size and (tags.min() < 0 or tags.max() >= ny):
        raise ValueError(f"tag id out of range [0, {ny})")
    single = em.ndim == 2
    if single:
        em, tags = T.reshape(em, (1,) + em.shape), tags[None]
        mask = None if mask is None else np.asarray(mask)[None]
    mask = _as_mask(tags.shape, mask)
    b, m = tags.shape
    fmask = mask.astype(np.float64)
    bi = np.arange(b)[:, None]
    emit = T.mul(T.index(em, (bi, np.arange(m)[None, :], tags)), fmask)
    total = T.sum_axis(emit, -1)
    start = T.index(trans, (np.full(b, ny), tags[:, 0]))
    total = T.add(total, start)
    if m > 1:
        pair = T.index(trans, (tags[:, :-1], tags[:, 1:]))
        total = T.add(total, T.sum_axis(T.mul(pair, fmask[:, 1:]), -1))
    if use_end:
        lengths = mask.sum(axis=1)
        last = tags[np.arange(b), lengths - 1]
        total = T.add(total, T.index(trans, (last, np.full(b, ny))))
    return T.reshape(total, ()) if single else total


def log_partition(em: Tensor, trans: Tensor, mask=None, use_end: bool = True) -> Tensor:
    """Forward algorithm: log of the summed exp-score over all tag sequences."""
    em = T.as_tensor(em)
    single = em.ndim == 2
    if single:
        em = T.reshape(em, (1,) + em.shape)
        mask = None if mask is None else np.asarray(mask)[None]
    b, m, ny = em.shape
    mask = _as_mask((b, m), mask)
    tt = T.index(trans, (slice(0, ny), slice(0, ny)))
    alpha = T.add(T.index(trans, (ny, slice(0, ny))), T.index(em, (slice(None), 0, slice(None))))
    for t in range(1, m):
        step = T.add(T.reshape(alpha, (b, ny, 1)), tt)
        step = T.add(step, T.reshape(T.index(em, (slice(None), t, slice(None))), (b, 1, ny)))
        nxt = T.logsumexp(step, axis=1)
        alpha = T.where(mask[:, t, None], nxt, alpha)
    if use_end:
        alpha = T.add(alpha, T.index(trans, (slice(0, ny), ny)))
    out = T.logsumexp(alpha, axis=-1)
    return T.reshape(out, ()) if single else out


def viterbi_decode(em: np.ndarray, trans: np.ndarray, lengths=None,
                   use_end: bool = True) -> tuple[list[list[int]], np.ndarray]:
    """Best tag paths and their scores for (B, M, Y) or (M, Y) emissions.

    Ties go to the lowest tag id, both in the back-pointers and at the end.
    """
    em = np.asarray(em.data if isinstance(em, Tensor) else em)
    trans = np.asarray(trans.data if isinstance(trans, Tensor) else trans)
    single = em.ndim == 2
    if single:
        em = em[None]
        lengths = None if lengths is None else [int(np.asarray(lengths).reshape(-1)[0])]
    b, m, ny = em.shape
    lengths = np.full(b, m) if lengths is None else np.asarray(lengths)
    tt = trans[:ny, :ny]
    delta = trans[ny, :ny][None, :] + em[:, 0]
    back = np.zeros((b, m, ny), dtype=np.int64)
    for t in range(1, m):
        cand = delta[:, :, None] + tt[None]
        best = cand.argmax(axis=1)
        nxt = np.take_along_axis(cand, best[:, None, :], axis=1)[:, 0] + em[:, t]
        live = (t < lengths)[:, None]
        delta = np.where(live, nxt, delta)
        back[:, t] = np.where(live, best, np.arange(ny)[None, :])
    if use_end:
        delta = delta + trans[:ny, ny][None, :]
    last = delta.argmax(axis=1)
    scores = delta[np.arange(b), last]
    paths = []
    for i in range(b):
        n = int(lengths[i])
        y = [int(last[i])]
        for t in range(n - 1, 0, -1):
            y.append(int(back[i, t, y[-1]]))
        paths.append(y[::-1])
    if single:
        return paths[0], scores[0]
    return paths, scores


def crf_nll(em: Tensor, tags, trans: Tensor, mask=None, use_end: bool = True) -> Tensor:
    """Negative log-likelihood per sequence: log Z - score(gold)."""
    return T.sub(log_partition(em, trans, mask, use_end), score_sequence(em, tags, trans, mask, use_end))


# ---------------------------------------------------------------------------
# emissions from hidden states


class CRF:
    """Emission projection ``w`` ((2·d_h) × |Y|) plus transition scores."""

    def __init__(self, w: Tensor, trans: Tensor, use_end: bool = True):
        if w.shape[-1] + 1 != trans.shape[0] or trans.shape[0] != trans.shape[1]:
            raise ValueError(f"CRF shapes disagree: w {w.shape}, trans {trans.shape}")
        self.w = w
        self.trans = trans
        self.use_end = use_end

    @property
    def num_tags(self) -> int:
        return self.w.shape[-1]

    def emissions(self, h: Tensor) -> Tensor:
        return T.matmul(h, self.w)

    def sequence_score(self, h: Tensor, tags, mask=None) -> Tensor:
        return score_sequence(self.emissions(h), tags, self.trans, mask, self.use_end)

    def log_partition(self, h: Tensor, mask=None) -> Tensor:
        return log_partition(self.emissions(h), self.trans, mask, self.use_end)

    def nll(self, h: Tensor, tags, mask=None) -> Tensor:
        return crf_nll(self.emissions(h), tags, self.trans, mask, self.use_end)

    def viterbi(self, h, lengths=None):
        return viterbi_decode(self.emissions(T.as_tensor(h)).data, self.trans.data, lengths, self.use_end)


def init_crf_params(d_in: int, num_tags: int, rng: np.random.Generator) -> dict[str, Tensor]:
    return {"crf.w": Tensor(xavier(rng, d_in, num_tags), requires_grad=True, name="crf.w"),
            "crf.trans": Tensor(np.zeros((num_tags + 1, num_tags + 1)), requires_grad=True, name="crf.trans")}


def forbidden_transitions(tags: list[str], scheme: str = "BIOES") -> np.ndarray:
    """Mask of illegal (prev, next) transitions, including start/end, for BIO/BIOES tags."""
    ny = len(tags)
    bad = np.zeros((ny + 1, ny + 1), dtype=bool)
    parts = [("O", "") if t == "O" else tuple(t.split("-", 1)) for t in tags]
    for a in range(ny + 1):
        for b in range(ny + 1):
            pa = parts[a] if a < ny else ("START", "")
            pb = parts[b] if b < ny else ("END", "")
            bad[a, b] = not _legal(pa, pb, scheme.upper())
    bad[ny, ny] = False
    return bad


def _legal(prev, nxt, scheme) -> bool:
    pp, pl = prev
    np_, nl = nxt
    if scheme == "BIOES":
        open_prev = pp in ("B", "I")
        if np_ in ("I", "E"):
            return open_prev and pl == nl
        if np_ == "END":
            return not open_prev
        return not open_prev
    if np_ == "I":
        return pp in ("B", "I") and pl == nl
    return True
