"""Minimal define-by-run reverse-mode autodiff over numpy arrays.

Every op executed while a :class:`Tape` is active and at least one input
requires a gradient is appended to that tape together with a closure that
maps the output cotangent to input cotangents. Ops executed with no active
tape are plain numpy evaluations, which is what evaluation and lesioning use.

The GELU here is the tanh approximation::

    gelu(x) = 0.5 * x * (1 + tanh(GELU_C * (x + GELU_A * x**3)))

with ``GELU_C = sqrt(2 / pi)`` and ``GELU_A = 0.044715``.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(ValueError):
    """Raised when an op's precondition is violated."""


class NoMaskedTokensError(ValueError):
    """Raised when a masked loss is requested over an empty mask."""


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "grad", "retain_grad", "graph_id", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.inexact):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None
        self.retain_grad = False
        self.graph_id: int | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of executed ops.

    Use as a context manager; ops run inside the ``with`` block are recorded
    in execution order, which is a valid topological order by construction.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[tuple[str, tuple[Tensor, ...], Tensor, Callable]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.remove(self)
        return False

    @classmethod
    def active(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: tuple[Tensor, ...], out: Tensor, backward: Callable) -> None:
        out.requires_grad = True
        out.graph_id = len(self.nodes)
        out._tape = self
        self.nodes.append((op, inputs, out, backward))

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Propagate d(loss)/d(.) through the tape.

        Sets ``.grad`` on every leaf that requires a gradient and on every
        intermediate tensor flagged with ``retain_grad``. Returns the
        gradients of named leaves keyed by name.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not produced on this tape")
        if self.consumed:
            raise ContractError("tape already consumed by a previous backward")
        self.consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for op, inputs, out, fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if out.retain_grad:
                out.grad = g if g is not None else np.zeros_like(out.data)
            if g is None:
                continue
            in_grads = fn(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if t._tape is None:
                    leaves[key] = t
        gmap: dict[str, np.ndarray] = {}
        for key, t in leaves.items():
            t.grad = grads[key]
            if t.name is not None:
                gmap[t.name] = t.grad
        self.nodes.clear()
        return gmap


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Run reverse-mode differentiation on the tape that produced ``loss``."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ContractError("loss is not on an active tape")
    return loss._tape.backward(loss)


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, fn: Callable) -> Tensor:
    out = Tensor(out_data)
    tape = Tape.active()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, tuple(inputs), out, fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd,
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a constant that is not differentiated."""
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


def _bmm(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # stacked matmul is far slower when the right operand is a strided view
    if not y.flags.c_contiguous:
        y = np.ascontiguousarray(y)
    return x @ y


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes of ``a`` batch
    against a 2-D ``b`` or against matching leading axes of ``b``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    flat = bd.ndim == 2 and ad.ndim > 2
    if flat:
        # one large GEMM instead of a batch of small ones
        k, n = bd.shape
        out = (ad.reshape(-1, k) @ bd).reshape(ad.shape[:-1] + (n,))
    else:
        out = _bmm(ad, bd)

    def fn(g):
        ga = gb = None
        if flat:
            g2 = g.reshape(-1, n)
            if a.requires_grad:
                ga = (g2 @ bd.T).reshape(ad.shape)
            if b.requires_grad:
                gb = ad.reshape(-1, k).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(_bmm(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(_bmm(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _record("matmul", (a, b), out, fn)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _record("transpose", (a,), a.data.transpose(axes), lambda g: (g.transpose(inv),))


def sum_(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", (a,), a.data.sum(axis=axis), fn)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum_(a, axis), 1.0 / n)


def _rowmean(a: np.ndarray) -> np.ndarray:
    # gemv against a constant vector beats a strided reduction over a short last axis
    n = a.shape[-1]
    w = np.full(n, 1.0 / n, dtype=a.real.dtype)
    return (a @ w)[..., None]


def _rowsum(a: np.ndarray) -> np.ndarray:
    return (a @ np.ones(a.shape[-1], dtype=a.real.dtype))[..., None]


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply
    ``gain * xhat + bias``. Variance is the biased (population) estimate."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: last axis {d} does not match gain {gain.shape} / bias {bias.shape}")
    xd = x.data
    mu = _rowmean(xd)
    xc = xd - mu
    var = _rowmean(xc * xc)
    # a row that is constant up to rounding in the mean gets exactly zero xhat
    tol = np.finfo(var.real.dtype).eps * 4 * np.abs(mu.real)
    flat = var.real <= tol * tol
    if flat.any():
        xc = np.where(flat, 0, xc)
        var = np.where(flat, 0, var)
    var += eps
    rstd = 1.0 / np.sqrt(var)
    xhat = xc
    xhat *= rstd
    gd = gain.data
    out = xhat * gd
    out += bias.data

    def fn(g):
        gx = ggain = gbias = None
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * gd
            proj = _rowmean(gh * xhat)
            gx = gh - _rowmean(gh)
            gx -= xhat * proj
            gx *= rstd
        return gx, ggain, gbias

    return _record("layer_norm", (x, gain, bias), out, fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    xd = x.data
    # .real keeps complex-step evaluation working; a no-op for real input
    shift = xd.real.max(axis=axis, keepdims=True) if np.iscomplexobj(xd) else xd.max(axis=axis, keepdims=True)
    e = np.exp(xd - shift)
    y = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record("softmax", (x,), y, fn)


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    x2 = xd * xd
    t = x2 * GELU_A
    t += 1.0
    t *= xd
    t *= GELU_C
    np.tanh(t, out=t)
    out = t + 1.0
    out *= xd
    out *= 0.5

    def fn(g):
        # 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3 a x^2)
        dt = x2 * (3.0 * GELU_A)
        dt += 1.0
        dt *= GELU_C
        sech2 = t * t
        np.subtract(1.0, sech2, out=sech2)
        dt *= sech2
        dt *= xd
        dt += t
        dt += 1.0
        dt *= 0.5
        dt *= g
        return (dt,)

    return _record("gelu", (x,), out, fn)


def _keep_mask(shape, rate: float, rng: np.random.Generator, dtype) -> np.ndarray:
    """0/1 keep mask from 16-bit uniform integers compared with ``round(rate * 65536)``."""
    n = int(np.prod(shape))
    raw = rng.bit_generator.random_raw((n + 3) // 4)
    bits = raw.view(np.uint16)[:n].reshape(shape)
    return (bits >= round(rate * 65536)).astype(dtype)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when ``rate == 0``.

    Drop decisions compare 16-bit uniform integers with ``round(rate * 65536)``,
    so the realised rate is within 2**-17 of ``rate``.
    """
    if rate <= 0.0:
        return x
    keep = _keep_mask(x.shape, rate, rng, x.dtype)
    keep *= 1.0 / (1.0 - rate)
    return _record("dropout", (x,), x.data * keep, lambda g: (g * keep,))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x`` as one op."""
    if x.shape[-1] != w.shape[0] or w.ndim != 2:
        raise DimensionError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    k, n = w.shape
    if b is not None and b.shape != (n,):
        raise DimensionError(f"linear: bias shape {b.shape} does not match output width {n}")
    x2 = x.data.reshape(-1, k)
    out = x2 @ w.data
    if b is not None:
        out += b.data
    out = out.reshape(x.shape[:-1] + (n,))

    def fn(g):
        g2 = g.reshape(-1, n)
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _record("linear", inputs, out, fn)


_TINY = 1e-30


def _attention_probs(qs: np.ndarray, kt: np.ndarray) -> np.ndarray:
    s = qs @ kt
    # Shift by the max of each score matrix rather than of each row: one
    # contiguous reduction instead of many short ones. If some row then sums
    # to (nearly) nothing, redo it with the per-row max.
    m = s.reshape(s.shape[:-2] + (-1,)).real.max(axis=-1)
    s -= m[..., None, None]
    np.exp(s, out=s)
    z = _rowsum(s)
    if not z.real.min() > _TINY:
        s = qs @ kt
        s -= s.real.max(axis=-1, keepdims=True)
        np.exp(s, out=s)
        z = _rowsum(s)
    s *= 1.0 / z
    return s


def attention_core(q: Tensor, k: Tensor, v: Tensor, dropout_rate: float = 0.0,
                   rng: np.random.Generator | None = None) -> Tensor:
    """``dropout(softmax(q k^T / sqrt(dh))) v`` for ``[..., S, dh]`` inputs, as one op."""
    if q.shape != k.shape or q.shape != v.shape:
        raise DimensionError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} must match")
    c = 1.0 / math.sqrt(q.shape[-1])
    qs = q.data * c
    kd, vd = k.data, v.data
    p = _attention_probs(qs, np.ascontiguousarray(np.swapaxes(kd, -1, -2)))
    # the inverted-dropout factor is applied to the (smaller) output, not to p
    keep, r = None, 1.0
    if dropout_rate > 0.0 and rng is not None:
        keep = _keep_mask(p.shape, dropout_rate, rng, p.dtype)
        r = 1.0 / (1.0 - dropout_rate)
        pd = p * keep
    else:
        pd = p
    out = _bmm(pd, vd)
    if keep is not None:
        out *= r

    def fn(g):
        if keep is not None:
            g = g * r
        gv = _bmm(np.swapaxes(pd, -1, -2), g) if v.requires_grad else None
        ds = _bmm(g, np.swapaxes(vd, -1, -2))
        if keep is not None:
            ds *= keep
        ds -= _rowsum(ds * p)
        ds *= p
        gq = None
        if q.requires_grad:
            gq = _bmm(ds, kd)
            gq *= c
        gk = _bmm(np.swapaxes(ds, -1, -2), qs) if k.requires_grad else None
        return gq, gk, gv

    return _record("attention", (q, k, v), out, fn)


def multi_head_attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, heads: int,
                         dropout_rate: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
    """Q/K/V projection, head split, :func:`attention_core` and head merge for
    ``x`` of shape ``[B, S, d]``, as one op. Returns the merged context
    ``[B, S, d]`` (before the output projection).

    Same arithmetic as the unfused chain; fusing it saves the head
    transposes and runs one ``[d, 3d]`` projection instead of three.
    """
    if x.ndim != 3:
        raise DimensionError(f"multi_head_attention expects [B, S, d], got {x.shape}")
    B, S, d = x.shape
    if wq.shape != (d, d) or wk.shape != (d, d) or wv.shape != (d, d):
        raise DimensionError(f"multi_head_attention: weights must be ({d}, {d})")
    if d % heads:
        raise DimensionError(f"width {d} is not divisible by {heads} heads")
    dh = d // heads
    c = 1.0 / math.sqrt(dh)
    w = np.concatenate([wq.data, wk.data, wv.data], axis=1)
    x2 = x.data.reshape(-1, d)
    qkv = (x2 @ w).reshape(B, S, 3, heads, dh)
    qs = qkv[:, :, 0].transpose(0, 2, 1, 3) * c
    kd = np.ascontiguousarray(qkv[:, :, 1].transpose(0, 2, 1, 3))
    vd = np.ascontiguousarray(qkv[:, :, 2].transpose(0, 2, 1, 3))
    p = _attention_probs(qs, np.ascontiguousarray(np.swapaxes(kd, -1, -2)))
    keep, r = None, 1.0
    if dropout_rate > 0.0 and rng is not None:
        keep = _keep_mask(p.shape, dropout_rate, rng, p.dtype)
        r = 1.0 / (1.0 - dropout_rate)
        pd = p * keep
    else:
        pd = p
    ctx = pd @ vd
    out = np.ascontiguousarray(ctx.transpose(0, 2, 1, 3)).reshape(B, S, d)
    if keep is not None:
        out *= r

    def fn(g):
        gctx = np.ascontiguousarray(g.reshape(B, S, heads, dh).transpose(0, 2, 1, 3))
        if keep is not None:
            gctx = gctx * r
        gqkv = np.empty((B, S, 3, heads, dh), dtype=np.result_type(g, qs))
        gqkv[:, :, 2] = (np.swapaxes(pd, -1, -2) @ gctx).transpose(0, 2, 1, 3)
        ds = gctx @ np.swapaxes(vd, -1, -2)
        if keep is not None:
            ds *= keep
        ds -= _rowsum(ds * p)
        ds *= p
        gq = ds @ kd
        gq *= c
        gqkv[:, :, 0] = gq.transpose(0, 2, 1, 3)
        gqkv[:, :, 1] = (np.swapaxes(ds, -1, -2) @ qs).transpose(0, 2, 1, 3)
        g2 = gqkv.reshape(-1, 3 * d)
        gx = (g2 @ w.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2
        return gx, gw[:, :d], gw[:, d:2 * d], gw[:, 2 * d:]

    return _record("multi_head_attention", (x, wq, wk, wv), out, fn)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError(f"embedding ids must be integers, got {ids.dtype}")
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        bad = ids[(ids < 0) | (ids >= n)][0]
        raise IndexError(f"token id {int(bad)} out of range for vocabulary of size {n}")
    shape = table.shape

    def fn(g):
        gt = np.zeros(shape, dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (gt,)

    return _record("embedding", (table,), table.data[ids], fn)


def cross_entropy_with_mask(logits: Tensor, labels, mask) -> Tensor:
    """Mean negative log-likelihood over positions where ``mask`` is true.

    ``logits`` has shape ``(..., V)``; ``labels`` and ``mask`` match the
    leading axes.
    """
    labels = np.asarray(labels)
    mask = np.asarray(mask, dtype=bool)
    V = logits.shape[-1]
    if labels.shape != logits.shape[:-1] or mask.shape != labels.shape:
        raise DimensionError(f"cross_entropy: logits {logits.shape}, labels {labels.shape}, mask {mask.shape}")
    sel = np.flatnonzero(mask.reshape(-1))
    if sel.size == 0:
        raise NoMaskedTokensError("no masked tokens: cross-entropy over an empty mask")
    lab = labels.reshape(-1)[sel]
    if lab.min() < 0 or lab.max() >= V:
        raise IndexError(f"label out of range for vocabulary of size {V}")
    z = logits.data.reshape(-1, V)[sel]
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    rows = np.arange(sel.size)
    nll = lse - z[rows, lab]
    loss = nll.mean()
    shape = logits.shape

    def fn(g):
        p = np.exp(z - lse[:, None])
        p[rows, lab] -= 1.0
        full = np.zeros((int(np.prod(shape[:-1])), V), dtype=p.dtype)
        full[sel] = p * (g / sel.size)
        return (full.reshape(shape),)

    return _record("cross_entropy", (logits,), np.asarray(loss, dtype=logits.dtype), fn)


def concat_grads(grads: Iterable[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.ravel(g) for g in grads])
