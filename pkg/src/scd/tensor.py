"""Dense N-D tensors with reverse-mode automatic differentiation.

Every array the denoiser touches is a :class:`Tensor` wrapping a numpy
array. Ops record a linked graph of backward closures; calling
``backward()`` on a scalar loss walks that graph once in reverse
topological order and accumulates gradients into ``requires_grad``
leaves.

Two global switches control numerics:

* precision -- ``f32`` (training default) or ``f64`` (verification).
  In ``f64`` mode the softmax normalizer and the attention weighted sum
  use strict left-to-right accumulation, so that prepending exactly-zero
  (fully masked) key columns cannot perturb a single bit of the result.
* finite guard -- every op output is checked for NaN/Inf and raises
  immediately, because diffusion training otherwise diverges silently.
"""

from __future__ import annotations

import os
from contextlib import contextmanager
from typing import Iterable, Sequence

import numpy as np


class TensorError(Exception):
    """Shape/contract violation in a tensor op."""


class NonFiniteError(TensorError):
    """An op produced NaN or Inf."""


_DTYPES = {"f32": np.float32, "f64": np.float64}
_precision = os.environ.get("SCD_PRECISION", "f32")
if _precision not in _DTYPES:
    raise TensorError(f"SCD_PRECISION must be one of {sorted(_DTYPES)}, got {_precision!r}")

_grad_enabled = True
_finite_guard = True


def set_precision(name: str) -> None:
    global _precision
    if name not in _DTYPES:
        raise TensorError(f"precision must be one of {sorted(_DTYPES)}, got {name!r}")
    _precision = name


def get_precision() -> str:
    return _precision


def default_dtype() -> np.dtype:
    return np.dtype(_DTYPES[_precision])


@contextmanager
def precision(name: str):
    """Temporarily switch the global precision (used by verification suites)."""
    prev = _precision
    set_precision(name)
    try:
        yield
    finally:
        set_precision(prev)


@contextmanager
def no_grad():
    """Disable graph recording (sampling loops do not need gradients)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_finite_guard(on: bool) -> None:
    global _finite_guard
    _finite_guard = bool(on)


def _guard(arr: np.ndarray, op: str) -> np.ndarray:
    if _finite_guard and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


def _seq_lastaxis_sum(x: np.ndarray) -> np.ndarray:
    """Strict left-to-right sum along the last axis (keepdims).

    cumsum computes the running partial sums in element order, so the last
    partial equals the fold-left sum. Leading exact zeros then provably do
    not change the bit pattern of the result.
    """
    return np.cumsum(x, axis=-1)[..., -1:]


def _seq_weighted_sum(p: np.ndarray, v: np.ndarray, chunk: int = 64) -> np.ndarray:
    """out[..., n, d] = sum_k p[..., n, k] * v[..., k, d], accumulated strictly in k order.

    Chunked so the [..., n, chunk, d] temporaries stay small; each chunk's
    cumsum is seeded with the running accumulator, which keeps the whole
    reduction a single fold-left over k.
    """
    kdim = p.shape[-1]
    acc = np.zeros(p.shape[:-1] + (v.shape[-1],), dtype=p.dtype)
    for k0 in range(0, kdim, chunk):
        k1 = min(k0 + chunk, kdim)
        terms = p[..., :, k0:k1, None] * v[..., None, k0:k1, :]  # [..., n, kc, d]
        seeded = np.concatenate([acc[..., :, None, :], terms], axis=-2)
        acc = np.cumsum(seeded, axis=-2)[..., -1, :]
    return acc


class Tensor:
    """N-dimensional array node in the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=default_dtype())
        _guard(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self.grad: np.ndarray | None = None
        self.name = name
        self._backward = None
        self._parents: tuple[Tensor, ...] = ()

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        head = f"Tensor(shape={self.shape}, dtype={self.data.dtype}"
        if self.name:
            head += f", name={self.name!r}"
        return head + (", grad)" if self.requires_grad else ")")

    # -- grad management ------------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Reverse sweep from a scalar. Grads accumulate; zero explicitly between steps."""
        if self.data.ndim != 0:
            raise TensorError(f"backward() requires a scalar loss, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.accumulate_grad(np.ones((), dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Run the reverse sweep and return a name -> gradient map for named leaves."""
    loss.backward()
    grads: dict[str, np.ndarray] = {}
    stack = [loss]
    seen: set[int] = set()
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node.requires_grad and node.name and node.grad is not None and not node._parents:
            grads[node.name] = node.grad
        stack.extend(node._parents)
    return grads


# -- constructors ---------------------------------------------------------------


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape: Sequence[int] | int, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=default_dtype()), requires_grad=requires_grad, name=name)


def ones(shape: Sequence[int] | int, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=default_dtype()), requires_grad=requires_grad)


def randn(rng: np.random.Generator, shape: Sequence[int] | int, scale: float = 1.0,
          requires_grad: bool = False, name: str | None = None) -> Tensor:
    data = rng.standard_normal(shape) * scale
    return Tensor(data, requires_grad=requires_grad, name=name)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], bwd, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _guard(data, op)
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    out.grad = None
    out.name = None
    if out.requires_grad:
        out._backward = bwd
        out._parents = parents
    else:
        out._backward = None
        out._parents = ()
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise TensorError(f"{op}: shapes {a.shape} and {b.shape} differ (no implicit broadcasting; reshape/expand explicitly)")


# -- elementwise suite ------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 0 and b.ndim != 0:
        _check_same_shape(a, b, "add")
    data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g if a.ndim else np.sum(g, dtype=g.dtype))
        if b.requires_grad:
            b.accumulate_grad(g if b.ndim else np.sum(g, dtype=g.dtype))

    return _make(data, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(_as_tensor(b), -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 0 and b.ndim != 0:
        _check_same_shape(a, b, "mul")
    data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            ga = g * b.data
            a.accumulate_grad(ga if a.ndim else np.sum(ga, dtype=g.dtype))
        if b.requires_grad:
            gb = g * a.data
            b.accumulate_grad(gb if b.ndim else np.sum(gb, dtype=g.dtype))

    return _make(data, (a, b), bwd, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    data = a.data * np.asarray(s, dtype=a.data.dtype)

    def bwd(g):
        a.accumulate_grad(g * np.asarray(s, dtype=g.dtype))

    return _make(data, (a,), bwd, "scale")


def silu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    data = x.data * sig

    def bwd(g):
        x.accumulate_grad(g * (sig * (1.0 + x.data * (1.0 - sig))))

    return _make(data, (x,), bwd, "silu")


def mean(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if x.size == 0:
        raise TensorError("mean of empty tensor")
    data = np.mean(x.data)

    def bwd(g):
        x.accumulate_grad(np.full(x.shape, g / x.size, dtype=x.data.dtype))

    return _make(np.asarray(data, dtype=x.data.dtype), (x,), bwd, "mean")


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    data = np.sum(x.data)

    def bwd(g):
        x.accumulate_grad(np.full(x.shape, g, dtype=x.data.dtype))

    return _make(np.asarray(data, dtype=x.data.dtype), (x,), bwd, "sum")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    data = x.data.reshape(shape)

    def bwd(g):
        x.accumulate_grad(g.reshape(x.shape))

    return _make(data, (x,), bwd, "reshape")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    data = np.ascontiguousarray(x.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def bwd(g):
        x.accumulate_grad(np.ascontiguousarray(g.transpose(inv)))

    return _make(data, (x,), bwd, "permute")


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast of size-1 axes; the gradient sums over them."""
    x = _as_tensor(x)
    shape = tuple(shape)
    if len(shape) != x.ndim:
        raise TensorError(f"expand: rank mismatch {x.shape} -> {shape}")
    for have, want in zip(x.shape, shape):
        if have != want and have != 1:
            raise TensorError(f"expand: cannot expand {x.shape} to {shape}")
    data = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    axes = tuple(i for i, (have, want) in enumerate(zip(x.shape, shape)) if have == 1 and want != 1)

    def bwd(g):
        x.accumulate_grad(np.sum(g, axis=axes, keepdims=True) if axes else g)

    return _make(data, (x,), bwd, "expand")


def concat(parts: Iterable[Tensor], axis: int) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise TensorError("concat of nothing")
    nd = parts[0].ndim
    if not (-nd <= axis < nd):
        raise TensorError(f"concat: axis {axis} out of range for rank {nd}")
    axis = axis % nd
    ref = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        if len(other) != nd or any(r != o for i, (r, o) in enumerate(zip(ref, other)) if i != axis):
            raise TensorError(f"concat: incompatible shapes {parts[0].shape} vs {p.shape} on axis {axis}")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]

    def bwd(g):
        start = 0
        for p, n in zip(parts, sizes):
            if p.requires_grad:
                idx = [slice(None)] * nd
                idx[axis] = slice(start, start + n)
                p.accumulate_grad(g[tuple(idx)])
            start += n

    return _make(data, tuple(parts), bwd, "concat")


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous sub-range along one axis, as a copy that stays in the graph."""
    x = _as_tensor(x)
    nd = x.ndim
    if not (-nd <= axis < nd):
        raise TensorError(f"slice: axis {axis} out of range for rank {nd}")
    axis = axis % nd
    if not (0 <= start <= stop <= x.shape[axis]):
        raise TensorError(f"slice: range [{start}, {stop}) invalid for extent {x.shape[axis]}")
    idx = [slice(None)] * nd
    idx[axis] = slice(start, stop)
    data = x.data[tuple(idx)].copy()

    def bwd(g):
        full = np.zeros(x.shape, dtype=x.data.dtype)
        full[tuple(idx)] = g
        x.accumulate_grad(full)

    return _make(data, (x,), bwd, "slice")


# -- linear algebra -----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise TensorError("matmul requires rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise TensorError(f"matmul: inner extents {a.shape} @ {b.shape} do not match")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as e:
        raise TensorError(f"matmul: batch extents of {a.shape} and {b.shape} not broadcastable") from e

    def bwd(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a.accumulate_grad(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b.accumulate_grad(_unbroadcast(gb, b.shape))

    return _make(data, (a, b), bwd, "matmul")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, s) in enumerate(zip(g.shape, shape)):
        if gs != s:
            g = g.sum(axis=i, keepdims=True)
    return g


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x[..., in] @ w[in, out] (+ b[out]); the one place a trailing bias may broadcast."""
    x, w = _as_tensor(x), _as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise TensorError(f"linear: {x.shape} @ {w.shape}")
    data = np.matmul(x.data, w.data)
    if b is not None:
        if b.shape != (w.shape[1],):
            raise TensorError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
        data = data + b.data

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(np.matmul(g, w.data.T))
        if w.requires_grad:
            gw = np.matmul(x.data.reshape(-1, x.shape[-1]).T, g.reshape(-1, g.shape[-1]))
            w.accumulate_grad(gw)
        if b is not None and b.requires_grad:
            b.accumulate_grad(g.reshape(-1, g.shape[-1]).sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _make(data, parents, bwd, "linear")


def softmax_lastaxis(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-stable softmax over the last axis, with optional additive logit mask.

    The mask may contain -inf to remove columns; a row with every column
    masked is a caller bug and raises. In f64 mode the normalizer is a
    strict left-to-right sum so fully-masked columns are bit-transparent.
    """
    x = _as_tensor(x)
    if x.shape[-1] < 1:
        raise TensorError("softmax over empty axis")
    logits = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=x.data.dtype)
        try:
            logits = logits + mask
        except ValueError as e:
            raise TensorError(f"softmax mask shape {mask.shape} does not broadcast to {x.shape}") from e
    m = np.max(logits, axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise TensorError("softmax: fully masked row (all -inf)")
    e = np.exp(logits - m)
    if x.data.dtype == np.float64:
        z = _seq_lastaxis_sum(e)
    else:
        z = np.sum(e, axis=-1, keepdims=True)
    p = e / z

    def bwd(g):
        dot = np.sum(g * p, axis=-1, keepdims=True)
        x.accumulate_grad(p * (g - dot))

    return _make(p, (x,), bwd, "softmax")


def attn_weighted_sum(p: Tensor, v: Tensor) -> Tensor:
    """Batched p[..., n, k] @ v[..., k, d] where rows of p are attention weights.

    Separate from matmul so the f64 verification mode can accumulate k
    strictly left to right: exact-zero weight columns (fully masked keys)
    then cannot change any output bit.
    """
    p, v = _as_tensor(p), _as_tensor(v)
    if p.shape[-1] != v.shape[-2] or p.shape[:-2] != v.shape[:-2]:
        raise TensorError(f"attn_weighted_sum: {p.shape} vs {v.shape}")
    if p.data.dtype == np.float64:
        data = _seq_weighted_sum(p.data, v.data)
    else:
        data = np.matmul(p.data, v.data)

    def bwd(g):
        if p.requires_grad:
            p.accumulate_grad(np.matmul(g, np.swapaxes(v.data, -1, -2)))
        if v.requires_grad:
            v.accumulate_grad(np.matmul(np.swapaxes(p.data, -1, -2), g))

    return _make(data, (p, v), bwd, "attn_weighted_sum")


# -- normalization --------------------------------------------------------------------


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero mean / unit variance per (batch, group) over [B, C, H, W], then per-channel affine."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise TensorError(f"group_norm expects [B, C, H, W], got {x.shape}")
    bsz, c, h, w = x.shape
    if c % groups != 0:
        raise TensorError(f"group_norm: channels {c} not divisible by groups {groups}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise TensorError("group_norm: gamma/beta must have shape [C]")
    xg = x.data.reshape(bsz, groups, c // groups, h, w)
    mu = xg.mean(axis=(2, 3, 4), keepdims=True)
    var = xg.var(axis=(2, 3, 4), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(bsz, c, h, w)
    data = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)

    def bwd(g):
        if gamma.requires_grad:
            gamma.accumulate_grad(np.sum(g * xhat, axis=(0, 2, 3)))
        if beta.requires_grad:
            beta.accumulate_grad(np.sum(g, axis=(0, 2, 3)))
        if x.requires_grad:
            gx_hat = (g * gamma.data.reshape(1, c, 1, 1)).reshape(bsz, groups, c // groups, h, w)
            xhat_g = xhat.reshape(bsz, groups, c // groups, h, w)
            n = (c // groups) * h * w
            s1 = gx_hat.mean(axis=(2, 3, 4), keepdims=True)
            s2 = (gx_hat * xhat_g).mean(axis=(2, 3, 4), keepdims=True)
            del n
            gx = inv * (gx_hat - s1 - xhat_g * s2)
            x.accumulate_grad(gx.reshape(bsz, c, h, w))

    return _make(data, (x, gamma, beta), bwd, "group_norm")


# -- convolution -------------------------------------------------------------------------


def _conv_out_extent(n: int, k: int, stride: int, pad: int) -> int:
    span = n + 2 * pad - k
    if span < 0 or span % stride != 0:
        raise TensorError(f"conv2d: extent {n} with kernel {k}, stride {stride}, pad {pad} has no integral output size")
    return span // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # xp: padded [B, C, Hp, Wp] -> [B, ho*wo, C*kh*kw], patch layout matching w.reshape(O, -1)
    view = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    view = view[:, :, ::stride, ::stride, :, :]          # [B, C, ho, wo, kh, kw]
    cols = view.transpose(0, 2, 3, 1, 4, 5)               # [B, ho, wo, C, kh, kw]
    return np.ascontiguousarray(cols).reshape(xp.shape[0], ho * wo, -1)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of [B, C, H, W] with [O, C, kh, kw]."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise TensorError(f"conv2d expects 4-D tensors, got {x.shape} and {w.shape}")
    bsz, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if cw != c:
        raise TensorError(f"conv2d: input channels {c} != kernel channels {cw}")
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise TensorError("conv2d: kernel larger than padded input")
    ho = _conv_out_extent(h, kh, stride, pad)
    wo = _conv_out_extent(wd, kw, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)            # [B, ho*wo, C*kh*kw]
    wflat = w.data.reshape(o, -1)
    out = np.matmul(cols, wflat.T)                        # [B, ho*wo, O]
    if b is not None:
        if b.shape != (o,):
            raise TensorError(f"conv2d: bias shape {b.shape} != ({o},)")
        out = out + b.data
    data = np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(bsz, o, ho, wo)

    def bwd(g):
        gflat = np.ascontiguousarray(g.reshape(bsz, o, ho * wo).transpose(0, 2, 1))  # [B, ho*wo, O]
        if w.requires_grad:
            gw = np.matmul(gflat.reshape(-1, o).T, cols.reshape(-1, cols.shape[-1]))
            w.accumulate_grad(gw.reshape(w.shape))
        if b is not None and b.requires_grad:
            b.accumulate_grad(gflat.reshape(-1, o).sum(axis=0))
        if x.requires_grad:
            gcols = np.matmul(gflat, wflat)               # [B, ho*wo, C*kh*kw]
            gcols = gcols.reshape(bsz, ho, wo, c, kh, kw)
            gxp = np.zeros((bsz, c, h + 2 * pad, wd + 2 * pad), dtype=x.data.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
            x.accumulate_grad(gx)

    parents = (x, w) if b is None else (x, w, b)
    return _make(data, parents, bwd, "conv2d")


def masked_where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Per-cell select: mask==1 takes ``a`` bits, mask==0 takes ``b`` bits.

    np.where copies elements verbatim, so the unselected side cannot leak
    even at the level of -0.0 sign bits.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "masked_where")
    mask = np.asarray(mask)
    sel = np.broadcast_to(mask != 0, a.shape)
    data = np.where(sel, a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.where(sel, g, 0.0))
        if b.requires_grad:
            b.accumulate_grad(np.where(sel, 0.0, g))

    return _make(data, (a, b), bwd, "masked_where")


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 4:
        raise TensorError(f"upsample expects [B, C, H, W], got {x.shape}")
    data = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def bwd(g):
        bsz, c, h, w = x.shape
        gr = g.reshape(bsz, c, h, factor, w, factor)
        x.accumulate_grad(gr.sum(axis=(3, 5)))

    return _make(data, (x,), bwd, "upsample")
