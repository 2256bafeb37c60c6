"""Differentiable kernels. Each forward has a backward rule registered under
the same name in :data:`pumpwatch.numcore.tensor.BACKWARD`."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy import sparse
from scipy.special import expit

from ..errors import EmptyBatch, ShapeMismatch
from .tensor import Tensor, as_tensor, make, register


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# elementwise -----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = (as_tensor(a), _const(b, as_tensor(a))) if isinstance(a, Tensor) else (_const(a, b), b)
    _check_broadcast("add", a, b)
    return make(a.data + b.data, "add", (a, b), (a.shape, b.shape))


@register("add")
def _add_bw(ctx, g, need):
    sa, sb = ctx
    return (_unbroadcast(g, sa) if need[0] else None, _unbroadcast(g, sb) if need[1] else None)


def sub(a, b) -> Tensor:
    a, b = (as_tensor(a), _const(b, as_tensor(a))) if isinstance(a, Tensor) else (_const(a, b), b)
    _check_broadcast("sub", a, b)
    return make(a.data - b.data, "sub", (a, b), (a.shape, b.shape))


@register("sub")
def _sub_bw(ctx, g, need):
    sa, sb = ctx
    return (_unbroadcast(g, sa) if need[0] else None, _unbroadcast(-g, sb) if need[1] else None)


def mul(a, b) -> Tensor:
    a, b = (as_tensor(a), _const(b, as_tensor(a))) if isinstance(a, Tensor) else (_const(a, b), b)
    _check_broadcast("mul", a, b)
    return make(a.data * b.data, "mul", (a, b), (a.data, b.data))


@register("mul")
def _mul_bw(ctx, g, need):
    a, b = ctx
    return (
        _unbroadcast(g * b, a.shape) if need[0] else None,
        _unbroadcast(g * a, b.shape) if need[1] else None,
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make(np.where(mask, x.data, 0).astype(x.dtype, copy=False), "relu", (x,), mask)


@register("relu")
def _relu_bw(mask, g, need):
    # subgradient 0 at x == 0
    return (np.where(mask, g, 0).astype(g.dtype, copy=False),)


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return make(y, "sigmoid", (x,), y)


@register("sigmoid")
def _sigmoid_bw(y, g, need):
    return (g * y * (1 - y),)


# linear algebra / shape ------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}") from None
    return make(out, "matmul", (a, b), (a.data, b.data))


@register("matmul")
def _matmul_bw(ctx, g, need):
    a, b = ctx
    ga = gb = None
    if need[0]:
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b, -1, -2)), a.shape)
    if need[1]:
        if b.ndim == 2:
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape)
    return ga, gb


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    return make(np.transpose(x.data, axes), "transpose", (x,), axes)


@register("transpose")
def _transpose_bw(axes, g, need):
    return (np.transpose(g, np.argsort(axes)),)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: {x.shape} -> {tuple(shape)}") from None
    return make(out, "reshape", (x,), x.shape)


@register("reshape")
def _reshape_bw(shape, g, need):
    return (g.reshape(shape),)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatch(f"concat: shapes {[t.shape for t in tensors]} along axis {axis}") from None
    sizes = [t.shape[axis] for t in tensors]
    return make(out, "concat", tuple(tensors), (axis, np.cumsum(sizes)[:-1]))


@register("concat")
def _concat_bw(ctx, g, need):
    axis, cuts = ctx
    return tuple(np.split(g, cuts, axis=axis))


def getitem(x: Tensor, idx) -> Tensor:
    return make(x.data[idx], "getitem", (x,), (x.shape, idx))


@register("getitem")
def _getitem_bw(ctx, g, need):
    shape, idx = ctx
    out = np.zeros(shape, dtype=g.dtype)
    if _is_basic(idx):
        out[idx] = g
    else:
        np.add.at(out, idx, g)
    return (out,)


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return make(np.sum(x.data, axis=axis, keepdims=keepdims), "reduce_sum", (x,), (x.shape, axis, keepdims))


@register("reduce_sum")
def _sum_bw(ctx, g, need):
    shape, axis, keepdims = ctx
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape).copy(),)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(reduce_sum(x, axis, keepdims), 1.0 / n)


# normalisation ---------------------------------------------------------------


def row_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return make(y, "row_softmax", (x,), (y, axis))


@register("row_softmax")
def _softmax_bw(ctx, g, need):
    y, axis = ctx
    return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeMismatch(f"layer_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return make(xhat * gamma.data + beta.data, "layer_norm", (x, gamma, beta), (xhat, inv, gamma.data))


@register("layer_norm")
def _layer_norm_bw(ctx, g, need):
    xhat, inv, gamma = ctx
    gx = ggamma = gbeta = None
    if need[0]:
        gxh = g * gamma
        gx = inv * (gxh - gxh.mean(axis=-1, keepdims=True) - xhat * (gxh * xhat).mean(axis=-1, keepdims=True))
    if need[1]:
        ggamma = (g * xhat).reshape(-1, g.shape[-1]).sum(axis=0)
    if need[2]:
        gbeta = g.reshape(-1, g.shape[-1]).sum(axis=0)
    return gx, ggamma, gbeta


def dropout_mask(p: float, rng: np.random.Generator, shape, dtype=np.float64) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability p, else 1/(1-p)."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    keep = rng.random(shape) >= p
    return (keep / (1.0 - p)).astype(dtype)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or p == 0 or rng is None:
        return x
    return mul(x, Tensor(dropout_mask(p, rng, x.shape, x.dtype)))


# edge-segment kernels ----------------------------------------------------------


class Segments:
    """Assignment of E items (edges) to ``n`` groups (nodes).

    Sums use a cached sparse incidence matrix; maxima use sorted reduceat.
    """

    def __init__(self, ids: np.ndarray, n: int):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.n = int(n)
        if len(self.ids) and (self.ids.min() < 0 or self.ids.max() >= self.n):
            raise IndexError(f"segment id out of range [0, {self.n})")
        self._incidence = None
        self._order = np.argsort(self.ids, kind="stable")
        sorted_ids = self.ids[self._order]
        self._starts = np.flatnonzero(np.r_[True, sorted_ids[1:] != sorted_ids[:-1]]) if len(sorted_ids) else np.array([], int)
        self._present = sorted_ids[self._starts] if len(sorted_ids) else np.array([], int)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def incidence(self) -> sparse.csr_matrix:
        if self._incidence is None:
            e = len(self.ids)
            self._incidence = sparse.csr_matrix(
                (np.ones(e), (self.ids, np.arange(e))), shape=(self.n, e)
            )
        return self._incidence

    def sum(self, x: np.ndarray) -> np.ndarray:
        flat = x.reshape(len(self.ids), -1)
        out = self.incidence.astype(x.dtype) @ flat
        return np.asarray(out).reshape((self.n, *x.shape[1:]))

    def max(self, x: np.ndarray) -> np.ndarray:
        """Per-group maximum broadcast back to items."""
        if len(self.ids) == 0:
            return x.copy()
        group_max = np.maximum.reduceat(x[self._order], self._starts, axis=0)
        full = np.zeros((self.n, *x.shape[1:]), dtype=x.dtype)
        full[self._present] = group_max
        return full[self.ids]


def gather(x: Tensor, seg: Segments) -> Tensor:
    """Rows ``x[seg.ids]``; backward scatter-adds into the source rows."""
    if len(seg) and seg.n != x.shape[0]:
        raise ShapeMismatch(f"gather: index space {seg.n} vs rows {x.shape[0]}")
    return make(x.data[seg.ids], "gather", (x,), seg)


@register("gather")
def _gather_bw(seg, g, need):
    return (seg.sum(g),)


def segment_sum(x: Tensor, seg: Segments) -> Tensor:
    if x.shape[0] != len(seg):
        raise ShapeMismatch(f"segment_sum: {x.shape[0]} items vs {len(seg)} ids")
    return make(seg.sum(x.data), "segment_sum", (x,), seg)


@register("segment_sum")
def _segment_sum_bw(seg, g, need):
    return (g[seg.ids],)


def segment_softmax(logits: Tensor, seg: Segments) -> Tensor:
    """Softmax over the items of each group (e.g. edges sharing a destination)."""
    if logits.shape[0] != len(seg):
        raise ShapeMismatch(f"segment_softmax: {logits.shape[0]} logits vs {len(seg)} ids")
    e = np.exp(logits.data - seg.max(logits.data))
    denom = seg.sum(e)[seg.ids]
    y = e / denom
    return make(y, "segment_softmax", (logits,), (y, seg))


@register("segment_softmax")
def _segment_softmax_bw(ctx, g, need):
    y, seg = ctx
    return (y * (g - seg.sum(g * y)[seg.ids]),)


# loss --------------------------------------------------------------------------


def bce_with_logits(logits: Tensor, targets: np.ndarray, mask: np.ndarray, pos_weight: float = 1.0) -> Tensor:
    """Mean over masked cells of -[w·y·log σ(x) + (1-y)·log(1-σ(x))], in log space."""
    y = np.asarray(targets, dtype=logits.dtype)
    m = np.asarray(mask, dtype=logits.dtype)
    if y.shape != logits.shape or m.shape != logits.shape:
        raise ShapeMismatch(f"bce: logits {logits.shape}, targets {y.shape}, mask {m.shape}")
    count = m.sum()
    if count == 0:
        raise EmptyBatch("no valid cells in batch")
    x = logits.data
    per = pos_weight * y * np.logaddexp(0, -x) + (1 - y) * np.logaddexp(0, x)
    loss = np.asarray((per * m).sum() / count, dtype=logits.dtype)
    return make(loss, "bce_with_logits", (logits,), (x, y, m, count, pos_weight))


@register("bce_with_logits")
def _bce_bw(ctx, g, need):
    x, y, m, count, w = ctx
    s = expit(x)
    return (g * m * (s * (w * y + 1 - y) - w * y) / count,)
