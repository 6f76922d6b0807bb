"""Small dense-tensor engine with tape-based reverse-mode differentiation.

Values are float64 numpy arrays. Operations are recorded only while a
:class:`ComputationRecord` is active and at least one operand requires a
gradient, so inference paths run on plain numpy with no bookkeeping.

Typical use::

    with ComputationRecord() as rec:
        loss = model.loss(batch)
    rec.backward(loss)

Leading batch axes are supported by every operation that is used inside
the batched model; the documented shapes in each docstring are the
single-example shapes.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_state = threading.local()
_DEBUG = False


def set_debug(flag: bool) -> None:
    """Toggle finiteness checks on every operation output."""
    global _DEBUG
    _DEBUG = bool(flag)


class TensorError(ValueError):
    pass


def _active_record() -> ComputationRecord | None:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_record")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._record: ComputationRecord | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; everything routes through the functional ops below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class ComputationRecord:
    """Append-only tape of operation nodes.

    Nodes are appended in execution order, which is a topological order of
    the graph; :meth:`backward` walks them in reverse exactly once.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> ComputationRecord:
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def append(self, out: Tensor, parents: tuple[Tensor, ...], rule: Callable) -> None:
        out._record = self
        self.nodes.append((out, parents, rule))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor reachable from ``loss``.

        Calling this twice without clearing gradients adds the gradients twice.
        """
        if loss.data.size != 1:
            raise TensorError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for out, parents, rule in reversed(self.nodes):
            g = grads.get(id(out))
            if g is None:
                continue
            parent_grads = rule(g)
            for p, pg in zip(parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                    holders[key] = p
        for key, g in grads.items():
            t = holders[key]
            t.grad = g.copy() if t.grad is None else t.grad + g


def backward(loss: Tensor) -> None:
    if loss._record is None:
        raise TensorError("loss was not produced under a ComputationRecord")
    loss._record.backward(loss)


def _make(value: np.ndarray, parents: Sequence[Tensor], rule: Callable) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(value)):
        raise FloatingPointError("non-finite value produced by tensor operation")
    rec = _active_record()
    needs = rec is not None and any(p.requires_grad for p in parents)
    out = Tensor(value, requires_grad=needs)
    if needs:
        rec.append(out, tuple(parents), rule)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product ``a @ b`` (m×k by k×n), with optional leading batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise TensorError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def rule(g):
        ga = _unbroadcast(g @ np.swapaxes(B, -1, -2), A.shape)
        gb = _unbroadcast(np.swapaxes(A, -1, -2) @ g, B.shape)
        return ga, gb

    return _make(A @ B, (a, b), rule)


_LETTERS = "abcdefgh"


def _lead_subscripts(a_lead, b_lead, what):
    """Explicit einsum letters for broadcastable batch axes of two operands."""
    try:
        out = np.broadcast_shapes(a_lead, b_lead)
    except ValueError as e:
        raise TensorError(f"{what}: batch axes {a_lead} and {b_lead} do not broadcast") from e
    letters = _LETTERS[:len(out)]
    return letters[len(out) - len(a_lead):], letters[len(out) - len(b_lead):], letters


def _reduced(subs: str, lead: tuple[int, ...]) -> str:
    # drop axes an operand broadcasts along, so einsum sums over them
    return "".join(ch for ch, n in zip(subs, lead) if n != 1)


def _contract(spec: str, shape: tuple[int, ...], *ops) -> np.ndarray:
    return np.einsum(spec, *ops).reshape(shape)


def _head_layout(lead: tuple[int, ...], rel: tuple[int, ...]) -> str | None:
    """How a relation operand lines up with the per-head operand, for the matmul fast path.

    "shared": relation has a size-1 head axis the other operand fills;
    "plain": identical leading axes, no head axis. None: use einsum.
    """
    if len(rel) == len(lead) and lead and rel[-1] == 1 and rel[:-1] == lead[:-1]:
        return "shared"
    if rel == lead:
        return "plain"
    return None


def _rows(x: np.ndarray, layout: str) -> np.ndarray:
    # (..., H, N, k) -> (..., N, H, k), or (..., N, k) -> (..., N, 1, k)
    return np.swapaxes(x, -3, -2) if layout == "shared" else x[..., :, None, :]


def _unrows(x: np.ndarray, layout: str) -> np.ndarray:
    return np.swapaxes(x, -3, -2) if layout == "shared" else x[..., :, 0, :]


def relation_score_bias(q: Tensor, rk: Tensor) -> Tensor:
    """out[i, j] = sum_k q[i, k] * rk[i, j, k]  (q: N×d, rk: N×N'×d).

    Leading batch axes broadcast, so one relation tensor can serve every head.
    """
    q, rk = as_tensor(q), as_tensor(rk)
    if q.ndim < 2 or rk.ndim < 3 or q.shape[-1] != rk.shape[-1] or q.shape[-2] != rk.shape[-3]:
        raise TensorError(f"relation_score_bias shape mismatch: {q.shape}, {rk.shape}")
    Q, RK = q.data, rk.data
    layout = _head_layout(Q.shape[:-2], RK.shape[:-3])
    if layout is not None:
        R = RK[..., 0, :, :, :] if layout == "shared" else RK  # (..., N, N', d)
        Qr = _rows(Q, layout)  # (..., N, H, d)

        def rule(g):
            gr = _rows(g, layout)  # (..., N, H, N')
            gq = _unrows(gr @ R, layout)
            grk = np.swapaxes(gr, -1, -2) @ Qr  # (..., N, N', d)
            return gq, grk.reshape(RK.shape)

        return _make(_unrows(Qr @ np.swapaxes(R, -1, -2), layout), (q, rk), rule)

    ql, rl, ol = _lead_subscripts(Q.shape[:-2], RK.shape[:-3], "relation_score_bias")

    def rule(g):
        gq = _contract(f"{ol}ij,{rl}ijk->{_reduced(ql, Q.shape)}ik", Q.shape, g, RK)
        grk = _contract(f"{ol}ij,{ql}ik->{_reduced(rl, RK.shape)}ijk", RK.shape, g, Q)
        return gq, grk

    return _make(np.einsum(f"{ql}ik,{rl}ijk->{ol}ij", Q, RK), (q, rk), rule)


def relation_value_bias(alpha: Tensor, rv: Tensor) -> Tensor:
    """out[i, j] = sum_k alpha[i, k] * rv[i, k, j]  (alpha: N×N', rv: N×N'×d)."""
    alpha, rv = as_tensor(alpha), as_tensor(rv)
    if alpha.ndim < 2 or rv.ndim < 3 or alpha.shape[-2:] != rv.shape[-3:-1]:
        raise TensorError(f"relation_value_bias shape mismatch: {alpha.shape}, {rv.shape}")
    A, RV = alpha.data, rv.data
    layout = _head_layout(A.shape[:-2], RV.shape[:-3])
    if layout is not None:
        R = RV[..., 0, :, :, :] if layout == "shared" else RV  # (..., N, N', d)
        Ar = _rows(A, layout)  # (..., N, H, N')

        def rule(g):
            gr = _rows(g, layout)  # (..., N, H, d)
            ga = _unrows(gr @ np.swapaxes(R, -1, -2), layout)
            grv = np.swapaxes(Ar, -1, -2) @ gr  # (..., N, N', d)
            return ga, grv.reshape(RV.shape)

        return _make(_unrows(Ar @ R, layout), (alpha, rv), rule)

    al, rl, ol = _lead_subscripts(A.shape[:-2], RV.shape[:-3], "relation_value_bias")

    def rule(g):
        ga = _contract(f"{ol}ij,{rl}ikj->{_reduced(al, A.shape)}ik", A.shape, g, RV)
        grv = _contract(f"{ol}ij,{al}ik->{_reduced(rl, RV.shape)}ikj", RV.shape, g, A)
        return ga, grv

    return _make(np.einsum(f"{al}ik,{rl}ikj->{ol}ij", A, RV), (alpha, rv), rule)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        value = a.data + b.data
    except ValueError as e:
        raise TensorError(f"add shape mismatch: {a.shape}, {b.shape}") from e
    return _make(value, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        value = a.data - b.data
    except ValueError as e:
        raise TensorError(f"sub shape mismatch: {a.shape}, {b.shape}") from e
    return _make(value, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    try:
        value = A * B
    except ValueError as e:
        raise TensorError(f"mul shape mismatch: {a.shape}, {b.shape}") from e
    return _make(value, (a, b), lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    # tanh form never overflows
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select from ``a`` where the constant boolean ``cond`` holds, else ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    value = np.where(cond, a.data, b.data)

    def rule(g):
        return _unbroadcast(np.where(cond, g, 0.0), a.shape), _unbroadcast(np.where(cond, 0.0, g), b.shape)

    return _make(value, (a, b), rule)


def dropout(a: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity when ``training`` is false or ``rate`` is 0."""
    if not 0.0 <= rate < 1.0:
        raise TensorError(f"dropout rate must be in [0, 1), got {rate}")
    a = as_tensor(a)
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise TensorError("dropout in training mode needs an explicit rng")
    keep = 1.0 - rate
    m = (rng.random(a.shape) < keep) / keep
    return _make(a.data * m, (a,), lambda g: (g * m,))


# ---------------------------------------------------------------------------
# reductions and normalisation


def sum_all(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    value = a.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(value, (a,), rule)


def mean_rows(a: Tensor, keepdims: bool = True) -> Tensor:
    """Mean over the row axis (-2): N×d -> 1×d."""
    a = as_tensor(a)
    n = a.shape[-2]
    return scale(sum_axis(a, -2, keepdims=keepdims), 1.0 / n)


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row softmax over the last axis; masked-out (False) entries are exactly 0."""
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != z.shape:
            mask = np.broadcast_to(mask, z.shape)
        if not mask.any(axis=-1).all():
            raise TensorError("softmax_rows: a row has every entry masked")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), rule)


def layer_norm(a: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise the last axis to zero mean, unit variance (no learned gain)."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def rule(g):
        return (inv * (g - g.mean(axis=-1, keepdims=True) - y * (g * y).mean(axis=-1, keepdims=True)),)

    return _make(y, (a,), rule)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.squeeze(np.log(s) + m, axis=axis)
        p = np.where(s > 0, e / s, 0.0)

    def rule(g):
        return (np.expand_dims(g, axis) * p,)

    return _make(value, (a,), rule)


# ---------------------------------------------------------------------------
# shape manipulation


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        value = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise TensorError(f"concat shape mismatch: {[t.shape for t in ts]}") from e
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def rule(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(value, ts, rule)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    value = np.stack([t.data for t in ts], axis=axis)

    def rule(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(value, ts, rule)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def _is_basic(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, slice, type(Ellipsis))) or k is None for k in parts)


def index(a: Tensor, key) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back."""
    a = as_tensor(a)
    value = np.asarray(a.data[key])
    basic = _is_basic(key)

    def rule(g):
        full = np.zeros_like(a.data)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _make(value, (a,), rule)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: result has shape ``ids.shape + (d,)``."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise TensorError(f"gather_rows: id out of range for table with {table.shape[0]} rows")
    value = table.data[ids]

    def rule(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return _make(value, (table,), rule)


def parameters_norm_sq(params: Iterable[Tensor]) -> Tensor:
    """Sum of squared entries across tensors, differentiable."""
    total = None
    for p in params:
        term = sum_all(mul(p, p))
        total = term if total is None else add(total, term)
    return total if total is not None else Tensor(0.0)
