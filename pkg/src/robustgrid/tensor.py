"""Dense float64 tensors with reverse-mode automatic differentiation.

The operator set is exactly what the structure grid needs: matrix multiply,
1-D/2-D convolution, layer normalization, GELU, softmax, pooling, elementwise
arithmetic, shape movement, and a fused softmax cross-entropy. Ops append a
record to the active :class:`Tape` while one is open; ``Tape.backward`` replays
the records in reverse execution order exactly once.

Conventions
-----------
* every array is float64 and C-contiguous
* gradients accumulate into ``Tensor.grad``; callers zero them explicitly
* a tensor is treated as immutable once an op has produced it
* a tape is single-threaded; concurrent work must use private tapes
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf


class ShapeError(ValueError):
    """Operand shapes cannot be combined."""


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """A float64 array plus an optional accumulated gradient."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        # note: asarray with order="C", not ascontiguousarray, which would
        # promote 0-d scalars to 1-d
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; the free functions hold the actual tape logic.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _TapeStack(threading.local):
    def __init__(self):
        self.stack: list["Tape"] = []


_TAPES = _TapeStack()


class Tape:
    """Ordered record of executed ops for one forward pass.

    Use as a context manager around the forward computation, then call
    :meth:`backward` with the scalar loss. Repeated backward calls accumulate
    into leaf gradients; there is no implicit zeroing anywhere.
    """

    def __init__(self):
        # each node: (out, parents, backward_fn)
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPES.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPES.stack.pop()

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {loss.shape}"
            )
        if not self.nodes:
            raise ValueError("backward called on an empty tape")
        produced = {id(node[0]) for node in self.nodes}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for out, parents, backward_fn in reversed(self.nodes):
            gout = grads.pop(id(out), None)
            if gout is None:
                continue
            holders.pop(id(out), None)
            for parent, pgrad in zip(parents, backward_fn(gout)):
                if pgrad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pgrad
                else:
                    grads[key] = pgrad
                    holders[key] = parent
        # whatever is left was never produced by a node: the leaves
        for key, grad in grads.items():
            leaf = holders[key]
            if id(leaf) in produced:
                continue
            if leaf.grad is None:
                leaf.grad = grad
            else:
                leaf.grad = leaf.grad + grad


def _active_tape() -> Tape | None:
    stack = _TAPES.stack
    return stack[-1] if stack else None


def _record(out: Tensor, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.nodes.append((out, tuple(parents), backward_fn))
    return out


def _check_nonempty(*tensors: Tensor) -> None:
    for t in tensors:
        if 0 in t.shape:
            raise ShapeError(f"zero-extent dimension in operand of shape {t.shape}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(
        i for i, (gdim, sdim) in enumerate(zip(grad.shape, shape)) if sdim == 1 and gdim != 1
    )
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_or_raise(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_nonempty(a, b)
    _broadcast_or_raise(a, b, "add")
    out = Tensor(a.data + b.data)

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _record(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_nonempty(a, b)
    _broadcast_or_raise(a, b, "sub")
    out = Tensor(a.data - b.data)

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _record(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_nonempty(a, b)
    _broadcast_or_raise(a, b, "mul")
    out = Tensor(a.data * b.data)

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _record(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    _check_nonempty(a)
    c = float(c)
    out = Tensor(a.data * c)

    def backward(g):
        return (g * c,)

    return _record(out, (a,), backward)


def abs_val(a: Tensor) -> Tensor:
    """Elementwise absolute value; subgradient at 0 is 0."""
    _check_nonempty(a)
    out = Tensor(np.abs(a.data))

    def backward(g):
        return (g * np.sign(a.data),)

    return _record(out, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x), via the error function."""
    _check_nonempty(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Tensor(x * cdf)

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (cdf + x * pdf),)

    return _record(out, (a,), backward)


# ---------------------------------------------------------------------------
# shape movement


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    _check_nonempty(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = Tensor(a.data.reshape(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None

    def backward(g):
        return (g.reshape(a.shape),)

    return _record(out, (a,), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    _check_nonempty(a)
    axes = tuple(int(ax) for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _record(out, (a,), backward)


def roll(a: Tensor, shift, axes) -> Tensor:
    """Cyclic shift along the given axes; gradient rolls back."""
    _check_nonempty(a)
    out = Tensor(np.roll(a.data, shift, axis=axes))
    neg = tuple(-s for s in shift) if isinstance(shift, (tuple, list)) else -shift

    def backward(g):
        return (np.roll(g, neg, axis=axes),)

    return _record(out, (a,), backward)


# ---------------------------------------------------------------------------
# reductions


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(ax % ndim for ax in axes)


def reduce_sum(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    _check_nonempty(a)
    axes = _norm_axes(axes, a.ndim)
    out = Tensor(a.data.sum(axis=axes, keepdims=keepdims))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), backward)


def mean(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    _check_nonempty(a)
    axes = _norm_axes(axes, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = Tensor(a.data.mean(axis=axes, keepdims=keepdims))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _record(out, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_nonempty(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-D or higher operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} @ {b.shape}")
    try:
        out = Tensor(np.matmul(a.data, b.data))
    except ValueError:
        raise ShapeError(f"matmul: cannot broadcast {a.shape} @ {b.shape}") from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.shape)
        return (ga, gb)

    return _record(out, (a, b), backward)


# ---------------------------------------------------------------------------
# normalization and softmax


def layer_norm(a: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean/unit variance, then scale and shift."""
    _check_nonempty(a)
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    dim = a.shape[-1]
    for p, name in ((gain, "gain"), (bias, "bias")):
        if p is not None and p.shape != (dim,):
            raise ShapeError(f"layer_norm {name} shape {p.shape} != ({dim},)")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat
    if gain is not None:
        y = y * gain.data
    if bias is not None:
        y = y + bias.data
    out = Tensor(y)
    parents = tuple(p for p in (a, gain, bias) if p is not None)

    def backward(g):
        grads = []
        dy = g * gain.data if gain is not None else g
        if a.requires_grad:
            m1 = dy.mean(axis=-1, keepdims=True)
            m2 = (dy * xhat).mean(axis=-1, keepdims=True)
            grads.append(inv * (dy - m1 - xhat * m2))
        else:
            grads.append(None)
        if gain is not None:
            reduce_axes = tuple(range(g.ndim - 1))
            grads.append((g * xhat).sum(axis=reduce_axes) if gain.requires_grad else None)
        if bias is not None:
            reduce_axes = tuple(range(g.ndim - 1))
            grads.append(g.sum(axis=reduce_axes) if bias.requires_grad else None)
        return tuple(grads)

    return _record(out, parents, backward)


def softmax(a: Tensor) -> Tensor:
    """Row-stochastic softmax over the last axis, max-subtracted for stability."""
    _check_nonempty(a)
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s)

    def backward(g):
        inner = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - inner),)

    return _record(out, (a,), backward)


# ---------------------------------------------------------------------------
# convolution and pooling


def _conv2d_geometry(h: int, w: int, kh: int, kw: int, stride: int, padding: int):
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(
            f"conv2d: kernel ({kh},{kw}) stride {stride} padding {padding} "
            f"does not fit input ({h},{w})"
        )
    return ho, wo


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation over B x C x H x W input with O x C x kh x kw kernels."""
    _check_nonempty(x, w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape}, {w.shape}")
    bsz, cin, h, wid = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input channels {cin} != kernel channels {cin_w}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {b.shape} != ({cout},)")
    ho, wo = _conv2d_geometry(h, wid, kh, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols6 = _im2col(xp, kh, kw, stride, ho, wo)
    cols = cols6.reshape(bsz, cin * kh * kw, ho * wo)
    w2 = w.data.reshape(cout, cin * kh * kw)
    y = np.matmul(w2, cols)
    if b is not None:
        y = y + b.data[:, None]
    out = Tensor(y.reshape(bsz, cout, ho, wo))
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(bsz, cout, ho * wo)
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2).reshape(bsz, cin, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += \
                        gcols[:, :, i, j]
            gx = gxp[:, :, padding : padding + h, padding : padding + wid]
            gx = np.ascontiguousarray(gx)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if b is None else (gx, gw, gb)

    return _record(out, parents, backward)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """1-D cross-correlation over B x C x L input with O x C x k kernels."""
    _check_nonempty(x, w)
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d expects 3-D input and kernel, got {x.shape}, {w.shape}")
    bsz, cin, length = x.shape
    cout, cin_w, k = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv1d: input channels {cin} != kernel channels {cin_w}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv1d bias shape {b.shape} != ({cout},)")
    lo = (length + 2 * padding - k) // stride + 1
    if lo <= 0:
        raise ShapeError(
            f"conv1d: kernel {k} stride {stride} padding {padding} does not fit length {length}"
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)))
    cols3 = np.empty((bsz, cin, k, lo), dtype=np.float64)
    for i in range(k):
        cols3[:, :, i] = xp[:, :, i : i + stride * lo : stride]
    cols = cols3.reshape(bsz, cin * k, lo)
    w2 = w.data.reshape(cout, cin * k)
    y = np.matmul(w2, cols)
    if b is not None:
        y = y + b.data[:, None]
    out = Tensor(y)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        if x.requires_grad:
            gcols = np.matmul(w2.T, g).reshape(bsz, cin, k, lo)
            gxp = np.zeros_like(xp)
            for i in range(k):
                gxp[:, :, i : i + stride * lo : stride] += gcols[:, :, i]
            gx = np.ascontiguousarray(gxp[:, :, padding : padding + length])
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2))
        return (gx, gw) if b is None else (gx, gw, gb)

    return _record(out, parents, backward)


def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k max pooling; ties route the gradient to the first max."""
    _check_nonempty(x)
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d expects 4-D input, got {x.shape}")
    bsz, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"max_pool2d: spatial size ({h},{w}) not divisible by {k}")
    ho, wo = h // k, w // k
    win = x.data.reshape(bsz, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(bsz, c, ho, wo, k * k)
    idx = win.argmax(axis=-1)
    out = Tensor(np.take_along_axis(win, idx[..., None], axis=-1)[..., 0])

    def backward(g):
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gwin = gwin.reshape(bsz, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5)
        return (np.ascontiguousarray(gwin.reshape(x.shape)),)

    return _record(out, (x,), backward)


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k average pooling."""
    _check_nonempty(x)
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d expects 4-D input, got {x.shape}")
    bsz, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d: spatial size ({h},{w}) not divisible by {k}")
    ho, wo = h // k, w // k
    win = x.data.reshape(bsz, c, ho, k, wo, k)
    out = Tensor(win.mean(axis=(3, 5)))
    inv = 1.0 / (k * k)

    def backward(g):
        gg = np.broadcast_to(g[:, :, :, None, :, None] * inv, (bsz, c, ho, k, wo, k))
        return (np.ascontiguousarray(gg.reshape(x.shape)),)

    return _record(out, (x,), backward)


# ---------------------------------------------------------------------------
# loss


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of B x K logits against integer labels."""
    _check_nonempty(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects B x K logits, got {logits.shape}")
    labels = np.asarray(labels)
    bsz, k = logits.shape
    if labels.shape != (bsz,):
        raise ShapeError(f"cross_entropy: {bsz} rows but labels shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"cross_entropy: labels outside [0, {k})")
    labels = labels.astype(np.int64)
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=-1))
    picked = x[np.arange(bsz), labels]
    out = Tensor((lse - picked).mean())

    def backward(g):
        p = np.exp(x - m)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(bsz), labels] -= 1.0
        return (p * (float(g) / bsz),)

    return _record(out, (logits,), backward)


def per_sample_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Loss of each row separately; plain numpy, no tape."""
    x = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    m = x.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=-1))
    return lse - x[np.arange(x.shape[0]), labels]


# ---------------------------------------------------------------------------
# finite differences


def grad_check(f: Callable[[Tensor], Tensor], x: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between tape gradients of scalar ``f`` and central differences.

    Relative error per coordinate is |analytic - numeric| / max(1, |numeric|).
    Raises if the comparison produces a NaN, naming the offending coordinate.
    """
    x = np.asarray(x, dtype=np.float64)
    xt = Tensor(x.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(xt)
        if y.size != 1:
            raise ValueError(f"grad_check needs a scalar-valued f, got shape {y.shape}")
        tape.backward(y)
    analytic = xt.grad
    if analytic is None:
        raise ValueError("grad_check: f does not depend on x")
    numeric = np.empty_like(x)
    flat = x.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(Tensor(x)).item()
        flat[i] = orig - h
        lo = f(Tensor(x)).item()
        flat[i] = orig
        nflat[i] = (hi - lo) / (2.0 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    if np.isnan(err).any():
        bad = int(np.flatnonzero(np.isnan(err.reshape(-1)))[0])
        raise FloatingPointError(f"grad_check produced NaN at flat coordinate {bad}")
    return float(err.max())
