"""Reverse-mode differentiable numerics over float64 numpy arrays.

A small taped Tensor plus the layers the matching and fusion networks
compose: linear/MLP, stable softmax, masked scaled-dot attention (multi-head,
with either a shared key set or one key set per query row), a decoder block
(self-attention, masked cross-attention, feed-forward, each with residual add
and post layer norm), cross-entropy, and a decoupled-weight-decay Adam step
over a named parameter store with JSON checkpointing.
"""

from __future__ import annotations

import json
import math
from contextlib import contextmanager
from pathlib import Path
from typing import Sequence

import numpy as np

# Mask entries at or below the threshold mean "drop this key": the raw score
# is replaced by MASK_IGNORE_VALUE rather than shifted, so a fully dropped row
# degenerates to a uniform average over its keys instead of an unmasked one.
MASK_IGNORE_THRESHOLD = -1e5
MASK_IGNORE_VALUE = -1e6

CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class Tensor:
    """A float64 array with an optional gradient tape node."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple = (), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeError("backward() expects a scalar loss")
        order = _toposort(self)
        for t in order:
            t.grad = None
        self.grad = np.ones_like(self.data)
        for t in reversed(order):
            if t._backward is not None:
                t._backward(t.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if not node.requires_grad:
            continue
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    return order


def tensor(data) -> Tensor:
    return Tensor(data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural ops

def _acc(t: "Tensor", g: np.ndarray) -> None:
    """Accumulate a full-shape gradient contribution, allocating lazily."""
    if t.grad is None:
        t.grad = np.array(g)
    else:
        t.grad += g


def _buf(t: "Tensor") -> np.ndarray:
    """Zero gradient buffer for scatter-style backward writes."""
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    return t.grad


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g, b.data.shape))

    return Tensor(out, _parents=(a, b), _backward=bw)


def sub(a, b) -> Tensor:
    return add(a, scale(_as_tensor(b), -1.0))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return Tensor(out, _parents=(a, b), _backward=bw)


def scale(a: Tensor, s: float) -> Tensor:
    a = _as_tensor(a)
    out = a.data * s

    def bw(g):
        if a.requires_grad:
            _acc(a, g * s)

    return Tensor(out, _parents=(a,), _backward=bw)


_relu_inputs_trace: list | None = None


@contextmanager
def trace_relu_inputs():
    """Collect ReLU input arrays during forward passes. Finite-difference
    harnesses use this to reject draws sitting too close to the kink."""
    global _relu_inputs_trace
    prev = _relu_inputs_trace
    _relu_inputs_trace = []
    try:
        yield _relu_inputs_trace
    finally:
        _relu_inputs_trace = prev


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if _relu_inputs_trace is not None:
        _relu_inputs_trace.append(a.data)
    keep = a.data > 0
    out = np.where(keep, a.data, 0.0)

    def bw(g):
        if a.requires_grad:
            _acc(a, g * keep)

    return Tensor(out, _parents=(a,), _backward=bw)


def abs_(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.abs(a.data)
    sign = np.sign(a.data)

    def bw(g):
        if a.requires_grad:
            _acc(a, g * sign)

    return Tensor(out, _parents=(a,), _backward=bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b where b is a 2-D weight matrix; a may carry leading batch axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.data.ndim != 2 or a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"matmul {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            _acc(a, g @ b.data.T)
        if b.requires_grad:
            d_in = a.data.shape[-1]
            _acc(b, a.data.reshape(-1, d_in).T @ g.reshape(-1, g.shape[-1]))

    return Tensor(out, _parents=(a, b), _backward=bw)


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a 2-D tensor")
    out = a.data.T.copy()

    def bw(g):
        if a.requires_grad:
            _acc(a, g.T)

    return Tensor(out, _parents=(a,), _backward=bw)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)

    def bw(g):
        if a.requires_grad:
            _acc(a, g.reshape(a.data.shape))

    return Tensor(out, _parents=(a,), _backward=bw)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def bw(g):
        offset = 0
        for p, size in zip(parts, sizes):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offset, offset + size)
                _acc(p, g[tuple(idx)])
            offset += size

    return Tensor(out, _parents=tuple(parts), _backward=bw)


def narrow(a: Tensor, axis: int, start: int, size: int) -> Tensor:
    a = _as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + size)
    idx = tuple(idx)
    out = a.data[idx].copy()

    def bw(g):
        if a.requires_grad:
            _buf(a)[idx] += g

    return Tensor(out, _parents=(a,), _backward=bw)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = a.data[idx]

    def bw(g):
        if a.requires_grad:
            np.add.at(_buf(a), idx, g)

    return Tensor(out, _parents=(a,), _backward=bw)


def gather_entries(a: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    a = _as_tensor(a)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    out = a.data[rows, cols]

    def bw(g):
        if a.requires_grad:
            np.add.at(_buf(a), (rows, cols), g)

    return Tensor(out, _parents=(a,), _backward=bw)


def put_rows(n_rows: int, idx: np.ndarray, values: Tensor) -> Tensor:
    """Scatter `values` into a zero tensor of `n_rows` rows at row indices `idx`."""
    values = _as_tensor(values)
    idx = np.asarray(idx, dtype=np.intp)
    out = np.zeros((n_rows,) + values.data.shape[1:], dtype=np.float64)
    out[idx] = values.data

    def bw(g):
        if values.requires_grad:
            _acc(values, g[idx])

    return Tensor(out, _parents=(values,), _backward=bw)


def sum_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.asarray(a.data.sum())

    def bw(g):
        if a.requires_grad:
            _acc(a, np.broadcast_to(g, a.data.shape).copy())

    return Tensor(out, _parents=(a,), _backward=bw)


def mean_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    out = np.asarray(a.data.mean())

    def bw(g):
        if a.requires_grad:
            _acc(a, np.broadcast_to(g / n, a.data.shape).copy())

    return Tensor(out, _parents=(a,), _backward=bw)


# ---------------------------------------------------------------------------
# neural primitives

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        if a.requires_grad:
            dot = (g * out).sum(axis=axis, keepdims=True)
            _acc(a, out * (g - dot))

    return Tensor(out, _parents=(a,), _backward=bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        if gain.requires_grad:
            _acc(gain, _unbroadcast(g * xhat, gain.data.shape))
        if bias.requires_grad:
            _acc(bias, _unbroadcast(g, bias.data.shape))
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _acc(x, inv * (dxhat - m1 - xhat * m2))

    return Tensor(out, _parents=(x, gain, bias), _backward=bw)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log softmax probability of the target class per row."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.intp)
    n, c = logits.data.shape
    if targets.shape != (n,):
        raise ShapeError("targets must be one index per logits row")
    if n and (targets.min() < 0 or targets.max() >= c):
        raise ValueError("target class out of range")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + logits.data.max(axis=1)
    picked = logits.data[np.arange(n), targets]
    out = np.asarray((lse - picked).mean())

    def bw(g):
        if logits.requires_grad:
            p = np.exp(shifted)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(n), targets] -= 1.0
            _acc(logits, (float(g) / n) * p)

    return Tensor(out, _parents=(logits,), _backward=bw)


def add_mask(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Apply an additive attention mask; entries <= MASK_IGNORE_THRESHOLD drop the key."""
    scores = _as_tensor(scores)
    mask = np.asarray(mask, dtype=np.float64)
    ignore = mask <= MASK_IGNORE_THRESHOLD
    out = np.where(ignore, MASK_IGNORE_VALUE, scores.data + mask)

    def bw(g):
        if scores.requires_grad:
            _acc(scores, g * ~ignore)

    return Tensor(out, _parents=(scores,), _backward=bw)


def attn_scores(q: Tensor, k: Tensor) -> Tensor:
    """Dot-product scores; k is (M, D) shared or (N, M, D) one key set per query."""
    q, k = _as_tensor(q), _as_tensor(k)
    if k.data.ndim == 2:
        out = q.data @ k.data.T

        def bw(g):
            if q.requires_grad:
                _acc(q, g @ k.data)
            if k.requires_grad:
                _acc(k, g.T @ q.data)
    elif k.data.ndim == 3:
        if k.data.shape[0] != q.data.shape[0]:
            raise ShapeError("per-query keys must align with query rows")
        out = np.einsum("nd,nmd->nm", q.data, k.data)

        def bw(g):
            if q.requires_grad:
                _acc(q, np.einsum("nm,nmd->nd", g, k.data))
            if k.requires_grad:
                _acc(k, np.einsum("nm,nd->nmd", g, q.data))
    else:
        raise ShapeError("keys must be 2-D or 3-D")
    return Tensor(out, _parents=(q, k), _backward=bw)


def attn_apply(w: Tensor, v: Tensor) -> Tensor:
    """Weighted sum of values; v is (M, D) shared or (N, M, D) per query row."""
    w, v = _as_tensor(w), _as_tensor(v)
    if v.data.ndim == 2:
        out = w.data @ v.data

        def bw(g):
            if w.requires_grad:
                _acc(w, g @ v.data.T)
            if v.requires_grad:
                _acc(v, w.data.T @ g)
    elif v.data.ndim == 3:
        out = np.einsum("nm,nmd->nd", w.data, v.data)

        def bw(g):
            if w.requires_grad:
                _acc(w, np.einsum("nd,nmd->nm", g, v.data))
            if v.requires_grad:
                _acc(v, np.einsum("nm,nd->nmd", w.data, g))
    else:
        raise ShapeError("values must be 2-D or 3-D")
    return Tensor(out, _parents=(w, v), _backward=bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return add(y, b) if b is not None else y


def mlp(x: Tensor, layers: Sequence[tuple[Tensor, Tensor | None]],
        activation=relu) -> Tensor:
    """Alternating linear/activation; no activation after the last layer."""
    if not layers:
        raise ShapeError("mlp needs at least one layer")
    for i, (w, b) in enumerate(layers):
        x = linear(x, w, b)
        if i < len(layers) - 1:
            x = activation(x)
    return x


def _mh_scores(q: Tensor, k: Tensor) -> Tensor:
    """(n, h, d) queries against (m, h, d) shared or (n, m, h, d) per-query
    keys -> (h, n, m) scores."""
    q, k = _as_tensor(q), _as_tensor(k)
    if k.data.ndim == 3:
        out = np.einsum("nhd,mhd->hnm", q.data, k.data)

        def bw(g):
            if q.requires_grad:
                _acc(q, np.einsum("hnm,mhd->nhd", g, k.data))
            if k.requires_grad:
                _acc(k, np.einsum("hnm,nhd->mhd", g, q.data))
    elif k.data.ndim == 4:
        out = np.einsum("nhd,nmhd->hnm", q.data, k.data)

        def bw(g):
            if q.requires_grad:
                _acc(q, np.einsum("hnm,nmhd->nhd", g, k.data))
            if k.requires_grad:
                _acc(k, np.einsum("hnm,nhd->nmhd", g, q.data))
    else:
        raise ShapeError("keys must be 3-D or 4-D after head split")
    return Tensor(out, _parents=(q, k), _backward=bw)


def _mh_apply(w: Tensor, v: Tensor) -> Tensor:
    """(h, n, m) weights over (m, h, d) shared or (n, m, h, d) per-query
    values -> (n, h, d)."""
    w, v = _as_tensor(w), _as_tensor(v)
    if v.data.ndim == 3:
        out = np.einsum("hnm,mhd->nhd", w.data, v.data)

        def bw(g):
            if w.requires_grad:
                _acc(w, np.einsum("nhd,mhd->hnm", g, v.data))
            if v.requires_grad:
                _acc(v, np.einsum("hnm,nhd->mhd", w.data, g))
    else:
        out = np.einsum("hnm,nmhd->nhd", w.data, v.data)

        def bw(g):
            if w.requires_grad:
                _acc(w, np.einsum("nhd,nmhd->hnm", g, v.data))
            if v.requires_grad:
                _acc(v, np.einsum("hnm,nhd->nmhd", w.data, g))
    return Tensor(out, _parents=(w, v), _backward=bw)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None,
              n_heads: int = 1) -> Tensor:
    """Scaled dot-product attention over key rows.

    k and v are either (M, C) shared across queries or (N, M, C) with one key
    set per query row. The mask broadcasts against the (N, M) score matrix.
    Channels split into n_heads groups, attended independently, concatenated.
    """
    c = q.data.shape[-1]
    if k.data.shape[:-1] != v.data.shape[:-1]:
        raise ShapeError("key and value row counts must agree")
    if c % n_heads != 0:
        raise ShapeError(f"n_heads={n_heads} must divide feature dim {c}")
    if k.data.ndim == 3 and k.data.shape[0] != q.data.shape[0]:
        raise ShapeError("per-query keys must align with query rows")
    dh = c // n_heads
    n = q.data.shape[0]
    qh = reshape(q, (n, n_heads, dh))
    kh = reshape(k, k.data.shape[:-1] + (n_heads, dh))
    vh = reshape(v, v.data.shape[:-1] + (n_heads, dh))
    s = scale(_mh_scores(qh, kh), 1.0 / math.sqrt(dh))
    if mask is not None:
        s = add_mask(s, mask)
    w = softmax(s, axis=-1)
    return reshape(_mh_apply(w, vh), (n, c))


def decoder_cross_attention(x: Tensor, k: Tensor, v: Tensor,
                            mask: np.ndarray | None, store: "ParamStore",
                            prefix: str, n_heads: int = 1) -> Tensor:
    """The masked cross-attention sublayer of a decoder block (pre-residual)."""
    ca = attention(matmul(x, store[f"{prefix}.cross.wq"]),
                   matmul(k, store[f"{prefix}.cross.wk"]),
                   matmul(v, store[f"{prefix}.cross.wv"]),
                   mask, n_heads)
    return matmul(ca, store[f"{prefix}.cross.wo"])


def decoder_block(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None,
                  store: "ParamStore", prefix: str, n_heads: int = 1) -> Tensor:
    """Self-attention over q, masked cross-attention to (k, v), feed-forward;
    each sublayer followed by residual add and layer norm (post-norm)."""
    sa = attention(matmul(q, store[f"{prefix}.self.wq"]),
                   matmul(q, store[f"{prefix}.self.wk"]),
                   matmul(q, store[f"{prefix}.self.wv"]),
                   None, n_heads)
    sa = matmul(sa, store[f"{prefix}.self.wo"])
    x = layer_norm(add(q, sa), store[f"{prefix}.ln1.g"], store[f"{prefix}.ln1.b"])
    ca = decoder_cross_attention(x, k, v, mask, store, prefix, n_heads)
    y = layer_norm(add(x, ca), store[f"{prefix}.ln2.g"], store[f"{prefix}.ln2.b"])
    h = linear(y, store[f"{prefix}.ffn.w0"], store[f"{prefix}.ffn.b0"])
    h = linear(relu(h), store[f"{prefix}.ffn.w1"], store[f"{prefix}.ffn.b1"])
    return layer_norm(add(y, h), store[f"{prefix}.ln3.g"], store[f"{prefix}.ln3.b"])


# ---------------------------------------------------------------------------
# parameters, optimizer, checkpoints

class ParamStore:
    """Named learnable tensors plus per-parameter optimizer state."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.step_count = 0
        self._adam_m: np.ndarray | None = None
        self._adam_v: np.ndarray | None = None
        self._adam_buf: np.ndarray | None = None

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return sorted(self._params)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {name: t.grad for name, t in self._params.items()
                if t.grad is not None}

    def n_scalars(self) -> int:
        return sum(t.data.size for t in self._params.values())


def init_matrix(store: ParamStore, name: str, d_in: int, d_out: int,
                rng: np.random.Generator) -> None:
    bound = 1.0 / math.sqrt(d_in)
    store.add(name, rng.uniform(-bound, bound, (d_in, d_out)))


def init_linear(store: ParamStore, prefix: str, d_in: int, d_out: int,
                rng: np.random.Generator) -> None:
    bound = 1.0 / math.sqrt(d_in)
    store.add(f"{prefix}.w", rng.uniform(-bound, bound, (d_in, d_out)))
    store.add(f"{prefix}.b", rng.uniform(-bound, bound, (d_out,)))


def init_mlp(store: ParamStore, prefix: str, dims: Sequence[int],
             rng: np.random.Generator) -> None:
    for i in range(len(dims) - 1):
        init_linear(store, f"{prefix}.{i}", dims[i], dims[i + 1], rng)


def mlp_layers(store: ParamStore, prefix: str) -> list[tuple[Tensor, Tensor]]:
    layers = []
    i = 0
    while f"{prefix}.{i}.w" in store:
        layers.append((store[f"{prefix}.{i}.w"], store[f"{prefix}.{i}.b"]))
        i += 1
    if not layers:
        raise KeyError(f"no layers found under {prefix!r}")
    return layers


def init_decoder_params(store: ParamStore, prefix: str, c: int, ffn_width: int,
                        rng: np.random.Generator) -> None:
    for blk in ("self", "cross"):
        for nm in ("wq", "wk", "wv", "wo"):
            init_matrix(store, f"{prefix}.{blk}.{nm}", c, c, rng)
    for i in (1, 2, 3):
        store.add(f"{prefix}.ln{i}.g", np.ones(c))
        store.add(f"{prefix}.ln{i}.b", np.zeros(c))
    b0 = 1.0 / math.sqrt(c)
    store.add(f"{prefix}.ffn.w0", rng.uniform(-b0, b0, (c, ffn_width)))
    store.add(f"{prefix}.ffn.b0", rng.uniform(-b0, b0, (ffn_width,)))
    b1 = 1.0 / math.sqrt(ffn_width)
    store.add(f"{prefix}.ffn.w1", rng.uniform(-b1, b1, (ffn_width, c)))
    store.add(f"{prefix}.ffn.b1", rng.uniform(-b1, b1, (c,)))


def adamw_step(store: ParamStore, grads: dict[str, np.ndarray], lr: float,
               weight_decay: float, betas: tuple[float, float] = (0.9, 0.999),
               eps: float = 1e-8) -> None:
    """Decoupled-weight-decay Adam update with bias correction."""
    store.step_count += 1
    t = store.step_count
    b1, b2 = betas
    names = store.names()
    for name in names:
        if name not in grads:
            raise KeyError(f"missing gradient for parameter {name!r}")
    # moments and scratch live in flat slabs reused across steps so the
    # update vectorizes across parameters without fresh large allocations
    total = sum(store[n].data.size for n in names)
    if store._adam_m is None or store._adam_m.size != total:
        store._adam_m = np.zeros(total)
        store._adam_v = np.zeros(total)
        store._adam_buf = np.empty((2, total))
    m, v = store._adam_m, store._adam_v
    flat_g, scratch = store._adam_buf
    offset = 0
    for name in names:
        size = store[name].data.size
        flat_g[offset:offset + size] = np.asarray(grads[name]).ravel()
        offset += size
    m *= b1
    np.multiply(flat_g, 1 - b1, out=scratch)
    m += scratch
    v *= b2
    np.square(flat_g, out=scratch)
    scratch *= 1 - b2
    v += scratch
    # scratch becomes the bias-corrected step: (m/c1) / (sqrt(v/c2) + eps)
    np.divide(v, 1 - b2 ** t, out=scratch)
    np.sqrt(scratch, out=scratch)
    scratch += eps
    np.divide(m, (1 - b1 ** t), out=flat_g)
    flat_g /= scratch
    flat_g *= lr
    decay = 1.0 - lr * weight_decay
    offset = 0
    for name in names:
        p = store[name]
        size = p.data.size
        p.data *= decay
        p.data -= flat_g[offset:offset + size].reshape(p.data.shape)
        offset += size


def save_checkpoint(path: str | Path, store: ParamStore, config: dict) -> None:
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "config": config,
        "params": {
            name: {"shape": list(store[name].data.shape),
                   "values": store[name].data.ravel().tolist()}
            for name in store.names()
        },
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")


def load_checkpoint(path: str | Path) -> tuple[ParamStore, dict]:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    version = doc.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {version!r}")
    store = ParamStore()
    for name in sorted(doc["params"]):
        entry = doc["params"][name]
        data = np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
        store.add(name, data)
    return store, doc["config"]
