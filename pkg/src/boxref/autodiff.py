"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything downstream (attention, decoder, losses) is built from the
primitives here.  The design is deliberately small: a ``Tensor`` wraps a
contiguous float64 ndarray; every op records the parent tensors and a
vector-Jacobian closure on a per-forward-pass tape; ``Tensor.backward``
walks the tape once in reverse topological order.  Parameters are plain
leaf tensors created with ``requires_grad=True`` whose ``.grad`` persists
across passes until zeroed.

Broadcasting is supported for elementwise ops (numpy rules, gradients
un-broadcast by summation) and for batched matmul.  Anything else is a
shape error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


_F64 = np.dtype(np.float64)


def _all_finite(arr: np.ndarray) -> bool:
    # single reduction; nan/inf are sticky under summation.  A non-finite
    # sum of individually-finite values (astronomic magnitudes) is
    # re-checked before rejecting.
    s = arr.sum()
    if math.isfinite(s):
        return True
    return bool(np.isfinite(arr).all())


class ShapeError(ValueError):
    """Raised when operands do not conform to an op's shape rule."""


class NumericError(FloatingPointError):
    """Raised when an op would produce or consume non-finite values."""


# Toggle for the per-op finiteness check on outputs.  On by default:
# this library trades throughput for verifiability.
_CHECK_FINITE = True

# When True, ops do not record tape nodes (cheap forward-only probes).
_NO_GRAD = False


def set_finite_checks(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


class no_grad:
    """Context manager: forward evaluation without tape recording."""

    def __enter__(self):
        global _NO_GRAD
        self._prev = _NO_GRAD
        _NO_GRAD = True
        return self

    def __exit__(self, *exc):
        global _NO_GRAD
        _NO_GRAD = self._prev
        return False


def _as_array(data) -> np.ndarray:
    if type(data) is np.ndarray and data.dtype == _F64:
        return data
    return np.asarray(data, dtype=np.float64)


class Tensor:
    """A dense float64 value, optionally attached to the current tape.

    ``_vjps`` holds ``(parent, fn)`` pairs where ``fn`` maps the output
    gradient to the parent's gradient contribution.  Leaf tensors have an
    empty tape record; parameter leaves additionally accumulate ``.grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_vjps")

    def __init__(self, data, requires_grad: bool = False, _vjps=()):
        self.data = _as_array(data)
        if _CHECK_FINITE and not _all_finite(self.data):
            raise NumericError("non-finite values in tensor of shape %s" % (self.data.shape,))
        self.requires_grad = requires_grad
        self.grad = None
        self._vjps = _vjps

    # ------------------------------------------------------------------
    # basics

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() on tensor of shape %s" % (self.shape,))
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # ------------------------------------------------------------------
    # operator sugar

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    # ------------------------------------------------------------------
    # reverse pass

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's .grad.

        ``self`` must be a scalar.  The tape is traversed once; fan-out
        contributions sum.  Intermediate gradients are released as soon
        as the node has been processed.
        """
        if self.data.size != 1:
            raise ShapeError("backward() root must be scalar, got shape %s" % (self.shape,))

        # Iterative reverse topological order over the tape DAG.
        order: list[Tensor] = []
        seen = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node._vjps:
                if id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and not node._vjps:
                node.grad = g if node.grad is None else node.grad + g
            for parent, fn in node._vjps:
                contrib = fn(g)
                prev = grads.get(id(parent))
                grads[id(parent)] = contrib if prev is None else prev + contrib


def tensor(data) -> Tensor:
    """Constant (non-differentiable) tensor."""
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    """Leaf tensor tracked by backward()."""
    return Tensor(data, requires_grad=True)


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _tracked(*tensors: Tensor) -> bool:
    # invariant: any tensor with recorded vjps has requires_grad=True
    if _NO_GRAD:
        return False
    for t in tensors:
        if t.requires_grad:
            return True
    return False


def _make(data, vjps) -> Tensor:
    # for ops that preserve finiteness (bounded maps, structural moves,
    # sums at desk scale); ops that can create inf/nan use _make_checked
    if type(data) is not np.ndarray:
        data = np.asarray(data, dtype=np.float64)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if vjps:
        out._vjps = tuple(vjps)
        out.requires_grad = True
    else:
        out._vjps = ()
        out.requires_grad = False
    return out


def _make_checked(data, vjps) -> Tensor:
    if type(data) is not np.ndarray:
        data = np.asarray(data, dtype=np.float64)
    if _CHECK_FINITE and not _all_finite(data):
        raise NumericError("non-finite values in tensor of shape %s" % (data.shape,))
    return _make(data, vjps)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    for da, db in zip(sa[::-1], sb[::-1]):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: shapes {sa} and {sb} do not broadcast")


# ----------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    if type(b) in (float, int) and isinstance(a, Tensor):
        out = a.data + b
        if not _tracked(a):
            return _make(out, ())
        return _make(out, [(a, lambda g: g)])
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a.data, b.data, "add")
    out = a.data + b.data
    if not _tracked(a, b):
        return _make(out, ())
    vjps = []
    if a.requires_grad:
        vjps.append((a, lambda g, sa=a.data.shape: _unbroadcast(g, sa)))
    if b.requires_grad:
        vjps.append((b, lambda g, sb=b.data.shape: _unbroadcast(g, sb)))
    return _make(out, vjps)


def sub(a, b) -> Tensor:
    if type(b) in (float, int) and isinstance(a, Tensor):
        out = a.data - b
        if not _tracked(a):
            return _make(out, ())
        return _make(out, [(a, lambda g: g)])
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a.data, b.data, "sub")
    out = a.data - b.data
    if not _tracked(a, b):
        return _make(out, ())
    vjps = []
    if a.requires_grad:
        vjps.append((a, lambda g, sa=a.data.shape: _unbroadcast(g, sa)))
    if b.requires_grad:
        vjps.append((b, lambda g, sb=b.data.shape: _unbroadcast(-g, sb)))
    return _make(out, vjps)


def mul(a, b) -> Tensor:
    if type(b) in (float, int) and isinstance(a, Tensor):
        out = a.data * b
        if not _tracked(a):
            return _make(out, ())
        return _make(out, [(a, lambda g, b=b: g * b)])
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a.data, b.data, "mul")
    out = a.data * b.data
    if not _tracked(a, b):
        return _make(out, ())
    vjps = []
    if a.requires_grad:
        vjps.append((a, lambda g, bd=b.data, sa=a.data.shape: _unbroadcast(g * bd, sa)))
    if b.requires_grad:
        vjps.append((b, lambda g, ad=a.data, sb=b.data.shape: _unbroadcast(g * ad, sb)))
    return _make(out, vjps)


def div(a, b) -> Tensor:
    if type(b) in (float, int) and isinstance(a, Tensor):
        if b == 0:
            raise ZeroDivisionError("division of tensor by scalar zero")
        out = a.data / b
        if not _tracked(a):
            return _make(out, ())
        return _make(out, [(a, lambda g, b=b: g / b)])
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a.data, b.data, "div")
    out = a.data / b.data
    if not _tracked(a, b):
        return _make_checked(out, ())
    vjps = []
    if a.requires_grad:
        vjps.append((a, lambda g, bd=b.data, sa=a.data.shape: _unbroadcast(g / bd, sa)))
    if b.requires_grad:
        vjps.append(
            (b, lambda g, ad=a.data, bd=b.data, sb=b.data.shape: _unbroadcast(-g * ad / (bd * bd), sb))
        )
    return _make_checked(out, vjps)


def neg(a) -> Tensor:
    a = _coerce(a)
    out = -a.data
    if not _tracked(a):
        return _make(out, ())
    return _make(out, [(a, lambda g: -g)])


def absolute(a) -> Tensor:
    a = _coerce(a)
    out = np.abs(a.data)
    if not _tracked(a):
        return _make(out, ())
    return _make(out, [(a, lambda g, s=np.sign(a.data): g * s)])


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient goes to the first operand."""
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a.data, b.data, "maximum")
    out = np.maximum(a.data, b.data)
    if not _tracked(a, b):
        return _make(out, ())
    mask = a.data >= b.data
    vjps = []
    if a.requires_grad:
        vjps.append((a, lambda g, m=mask, sa=a.data.shape: _unbroadcast(g * m, sa)))
    if b.requires_grad:
        vjps.append((b, lambda g, m=~mask, sb=b.data.shape: _unbroadcast(g * m, sb)))
    return _make(out, vjps)


def minimum(a, b) -> Tensor:
    """Elementwise min; on ties the gradient goes to the first operand."""
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a.data, b.data, "minimum")
    out = np.minimum(a.data, b.data)
    if not _tracked(a, b):
        return _make(out, ())
    mask = a.data <= b.data
    vjps = []
    if a.requires_grad:
        vjps.append((a, lambda g, m=mask, sa=a.data.shape: _unbroadcast(g * m, sa)))
    if b.requires_grad:
        vjps.append((b, lambda g, m=~mask, sb=b.data.shape: _unbroadcast(g * m, sb)))
    return _make(out, vjps)


# ----------------------------------------------------------------------
# nonlinearities


def relu(a) -> Tensor:
    a = _coerce(a)
    out = np.maximum(a.data, 0.0)
    if not _tracked(a):
        return _make(out, ())
    return _make(out, [(a, lambda g, m=a.data > 0: g * m)])


def sigmoid(a) -> Tensor:
    a = _coerce(a)
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    if not _tracked(a):
        return _make(out, ())
    return _make(out, [(a, lambda g, s=out: g * s * (1.0 - s))])


def tanh(a) -> Tensor:
    a = _coerce(a)
    out = np.tanh(a.data)
    if not _tracked(a):
        return _make(out, ())
    return _make(out, [(a, lambda g, t=out: g * (1.0 - t * t))])


def exp(a) -> Tensor:
    a = _coerce(a)
    out = np.exp(a.data)
    if not _tracked(a):
        return _make_checked(out, ())
    return _make_checked(out, [(a, lambda g, e=out: g * e)])


def log(a) -> Tensor:
    a = _coerce(a)
    out = np.log(a.data)
    if not _tracked(a):
        return _make_checked(out, ())
    return _make_checked(out, [(a, lambda g, x=a.data: g / x)])


def sin(a) -> Tensor:
    a = _coerce(a)
    out = np.sin(a.data)
    if not _tracked(a):
        return _make(out, ())
    return _make(out, [(a, lambda g, x=a.data: g * np.cos(x))])


def cos(a) -> Tensor:
    a = _coerce(a)
    out = np.cos(a.data)
    if not _tracked(a):
        return _make(out, ())
    return _make(out, [(a, lambda g, x=a.data: -g * np.sin(x))])


def logit_clamped(a, eps: float) -> Tensor:
    """ln(p/(1-p)) with p clamped to [eps, 1-eps]; zero gradient outside."""
    if not 0.0 < eps < 0.5:
        raise ValueError(f"logit_clamped: eps must be in (0, 0.5), got {eps}")
    a = _coerce(a)
    p = np.clip(a.data, eps, 1.0 - eps)
    out = np.log(p / (1.0 - p))
    if not _tracked(a):
        return _make(out, ())
    inside = (a.data > eps) & (a.data < 1.0 - eps)
    return _make(out, [(a, lambda g, p=p, m=inside: g * m / (p * (1.0 - p)))])


# ----------------------------------------------------------------------
# linear algebra / structural


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    ad, bd = a.data, b.data
    if ad.ndim < 1 or bd.ndim < 1:
        raise ShapeError(f"matmul: operands must have ndim >= 1, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dimensions differ, {ad.shape} @ {bd.shape}")
    try:
        out = ad @ bd
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions do not broadcast, {ad.shape} @ {bd.shape}") from None
    if not _tracked(a, b):
        return _make_checked(out, ())
    vjps = []
    if a.requires_grad:
        def grad_a(g, bd=bd, sa=ad.shape):
            if bd.ndim == 1:
                ga = np.multiply.outer(g, bd) if g.ndim else g * bd
            else:
                ga = g @ bd.swapaxes(-1, -2)
            return _unbroadcast(ga, sa)

        vjps.append((a, grad_a))
    if b.requires_grad:
        def grad_b(g, ad=ad, sb=bd.shape):
            if ad.ndim == 1:
                gb = np.multiply.outer(ad, g) if g.ndim else ad * g
            else:
                gb = ad.swapaxes(-1, -2) @ g
            return _unbroadcast(gb, sb)

        vjps.append((b, grad_b))
    return _make_checked(out, vjps)


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    if not _tracked(a):
        return _make(out, ())
    return _make(out, [(a, lambda g, s=a.data.shape: g.reshape(s))])


def transpose(a, axes=None) -> Tensor:
    a = _coerce(a)
    out = np.transpose(a.data, axes)
    if not _tracked(a):
        return _make(out, ())
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(out, [(a, lambda g, inv=inv: np.transpose(g, inv))])


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [_coerce(p) for p in parts]
    if not parts:
        raise ShapeError("concat: need at least one input")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(
            "concat: incompatible shapes %s" % ([p.data.shape for p in parts],)
        ) from None
    if not _tracked(*parts):
        return _make(out, ())
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)
    vjps = []
    for i, p in enumerate(parts):
        if p.requires_grad:
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            vjps.append((p, lambda g, sl=tuple(sl): g[sl]))
    return _make(out, vjps)


def getitem(a, key) -> Tensor:
    """Basic slicing/int indexing; gradient scatters back into place."""
    a = _coerce(a)
    out = a.data[key]
    if not _tracked(a):
        return _make(out, ())

    def grad_fn(g, key=key, shape=a.data.shape):
        full = np.zeros(shape)
        full[key] = g
        return full

    return _make(out, [(a, grad_fn)])


def take_rows(a, index) -> Tensor:
    """Gather rows along axis 0 by integer index (duplicates allowed)."""
    a = _coerce(a)
    idx = np.asarray(index, dtype=np.intp)
    out = a.data[idx]
    if not _tracked(a):
        return _make(out, ())

    def grad_fn(g, idx=idx, shape=a.data.shape):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return full

    return _make(out, [(a, grad_fn)])


def diag_block_select(a, blocks: int) -> Tensor:
    """(..., n, n*d) -> (..., n, d): row i of the next-to-last axis keeps
    its i-th length-d block of the last axis."""
    a = _coerce(a)
    n = blocks
    if a.data.shape[-2] != n or a.data.shape[-1] % n != 0:
        raise ShapeError(f"diag_block_select: shape {a.shape} incompatible with {n} blocks")
    d = a.data.shape[-1] // n
    view = a.data.reshape(a.data.shape[:-1] + (n, d))
    ar = np.arange(n)
    out = view[..., ar, ar, :]
    if not _tracked(a):
        return _make(out, ())

    def grad_fn(g, shape=a.data.shape, n=n, d=d):
        full = np.zeros(shape[:-1] + (n, d))
        full[..., ar, ar, :] = g
        return full.reshape(shape)

    return _make(out, [(a, grad_fn)])


def affine(x, w, b) -> Tensor:
    """Fused x @ w + b for 2-D x (rows, fan_in) and bias (fan_out,)."""
    x, w, b = _coerce(x), _coerce(w), _coerce(b)
    xd, wd, bd = x.data, w.data, b.data
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[0] or bd.shape != (wd.shape[1],):
        raise ShapeError(f"affine: incompatible shapes {xd.shape} @ {wd.shape} + {bd.shape}")
    out = xd @ wd
    out += bd
    if not _tracked(x, w, b):
        return _make_checked(out, ())
    vjps = []
    if x.requires_grad:
        vjps.append((x, lambda g, wd=wd: g @ wd.T))
    if w.requires_grad:
        vjps.append((w, lambda g, xd=xd: xd.T @ g))
    if b.requires_grad:
        vjps.append((b, lambda g: g.sum(axis=0)))
    return _make_checked(out, vjps)


def sinusoid_pairs(t, angular: np.ndarray) -> Tensor:
    """Interleaved (sin, cos) features: t (...,) x angular (F,) -> (..., 2F).

    Output channel 2i is sin(t * angular[i]), channel 2i+1 is the cosine.
    """
    t = _coerce(t)
    ang = np.asarray(angular, dtype=np.float64)
    if ang.ndim != 1:
        raise ShapeError(f"sinusoid_pairs: angular frequencies must be 1-D, got {ang.shape}")
    phase = t.data[..., None] * ang
    f = ang.shape[0]
    out = np.empty(t.data.shape + (2 * f,))
    sin = np.sin(phase)
    cos = np.cos(phase)
    out[..., 0::2] = sin
    out[..., 1::2] = cos
    if not _tracked(t):
        return _make(out, ())

    def grad_fn(g, sin=sin, cos=cos, ang=ang):
        return (g[..., 0::2] * cos - g[..., 1::2] * sin) @ ang

    return _make(out, [(t, grad_fn)])


def sinusoid_embed2d(points, angular: np.ndarray) -> Tensor:
    """(..., 2) points -> (..., 4F) embedding: the x-part (interleaved
    sin/cos over F frequencies) followed by the y-part."""
    pts = _coerce(points)
    ang = np.asarray(angular, dtype=np.float64)
    pd = pts.data
    if pd.shape[-1] != 2:
        raise ShapeError(f"sinusoid_embed2d: points must end in 2 coords, got {pd.shape}")
    f = ang.shape[0]
    phase = pd[..., :, None] * ang            # (..., 2, F)
    sin = np.sin(phase)
    cos = np.cos(phase)
    out = np.empty(pd.shape[:-1] + (4 * f,))
    out[..., 0:2 * f:2] = sin[..., 0, :]
    out[..., 1:2 * f:2] = cos[..., 0, :]
    out[..., 2 * f::2] = sin[..., 1, :]
    out[..., 2 * f + 1::2] = cos[..., 1, :]
    if not _tracked(pts):
        return _make(out, ())

    def grad_fn(g, sin=sin, cos=cos, ang=ang, f=f):
        gx = g[..., 0:2 * f:2] * cos[..., 0, :] - g[..., 1:2 * f:2] * sin[..., 0, :]
        gy = g[..., 2 * f::2] * cos[..., 1, :] - g[..., 2 * f + 1::2] * sin[..., 1, :]
        return np.stack([gx @ ang, gy @ ang], axis=-1)

    return _make(out, [(pts, grad_fn)])


# ----------------------------------------------------------------------
# reductions


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    if not _tracked(a):
        return _make(out, ())

    def grad_fn(g, shape=a.data.shape, axis=axis, keepdims=keepdims):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _make(out, [(a, grad_fn)])


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if not _tracked(a):
        return _make(out, ())
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def grad_fn(g, shape=a.data.shape, axis=axis, keepdims=keepdims, count=float(count)):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g / count, shape).copy()

    return _make(out, [(a, grad_fn)])


# ----------------------------------------------------------------------
# fused neural-net primitives


def softmax(a) -> Tensor:
    """Numerically stable softmax over the last axis."""
    a = _coerce(a)
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    if not _tracked(a):
        return _make(out, ())

    def grad_fn(g, s=out):
        return s * (g - (g * s).sum(axis=-1, keepdims=True))

    return _make(out, [(a, grad_fn)])


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (pre-affine)."""
    a = _coerce(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv
    if not _tracked(a):
        return _make(out, ())

    def grad_fn(g, xhat=out, inv=inv):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return inv * (g - gm - xhat * gx)

    return _make(out, [(a, grad_fn)])


def layer_norm_affine(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """layer_norm(a) * gamma + beta, fused over the last axis."""
    a, gamma, beta = _coerce(a), _coerce(gamma), _coerce(beta)
    x = a.data
    if gamma.data.shape != (x.shape[-1],) or beta.data.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm_affine: scale/shift shaped {gamma.data.shape}/{beta.data.shape}"
            f" for inputs {x.shape}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    if not _tracked(a, gamma, beta):
        return _make(out, ())
    vjps = []
    if a.requires_grad:
        def grad_a(g, xhat=xhat, inv=inv, gd=gamma.data):
            gg = g * gd
            gm = gg.mean(axis=-1, keepdims=True)
            gx = (gg * xhat).mean(axis=-1, keepdims=True)
            return inv * (gg - gm - xhat * gx)

        vjps.append((a, grad_a))
    if gamma.requires_grad:
        vjps.append((gamma, lambda g, xhat=xhat: (g * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)))
    if beta.requires_grad:
        vjps.append((beta, lambda g: g.reshape(-1, g.shape[-1]).sum(axis=0)))
    return _make(out, vjps)


def softmax_cross_entropy(logits, targets, weights=None) -> Tensor:
    """Weighted sum over rows of -log softmax(logits)[target].

    logits: (N, C); targets: (N,) integer class indices; weights: (N,) or
    None (all ones).  Returns a scalar tensor (sum, not mean).
    """
    logits = _coerce(logits)
    x = logits.data
    if x.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be 2-D, got {x.shape}")
    t = np.asarray(targets, dtype=np.intp)
    if t.shape != (x.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: targets shape {t.shape} vs logits {x.shape}")
    if np.any(t < 0) or np.any(t >= x.shape[1]):
        raise ValueError("softmax_cross_entropy: target class out of range")
    w = np.ones(x.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    rows = np.arange(x.shape[0])
    nll = lse - shifted[rows, t]
    out = np.asarray((w * nll).sum())
    if not _tracked(logits):
        return _make(out, ())

    probs = np.exp(shifted - lse[:, None])

    def grad_fn(g, probs=probs, t=t, w=w):
        d = probs * w[:, None]
        d[rows, t] -= w
        return g * d

    return _make(out, [(logits, grad_fn)])


def detach(a) -> Tensor:
    return _coerce(a).detach()


# ----------------------------------------------------------------------
# generic dispatch (one entry point over the primitive set)

_OPS: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "abs": absolute,
    "maximum": maximum,
    "minimum": minimum,
    "matmul": matmul,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "sin": sin,
    "cos": cos,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "concat": concat,
    "slice": getitem,
    "sum": tsum,
    "mean": tmean,
    "reshape": reshape,
    "transpose": transpose,
}


def apply(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Name-based dispatch over the primitive set (see _OPS)."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op kind {op_kind!r}") from None
    return fn(*inputs, **kwargs)


# ----------------------------------------------------------------------
# parameters and optimizer


class ParamStore:
    """Ordered name -> parameter tensor registry.

    Insertion order is the canonical parameter order used by the
    optimizer and the checkpoint writer, so builds must register
    parameters deterministically.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = parameter(data)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad = None

    def grad_arrays(self) -> dict[str, np.ndarray]:
        """Current gradients; parameters untouched by backward get exact zeros."""
        return {
            k: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for k, p in self._params.items()
        }

    def count(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self._params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ValueError(f"parameter name mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for k, p in self._params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ShapeError(f"parameter {k}: shape {arr.shape} vs expected {p.data.shape}")
            p.data = arr.copy()


@dataclass
class OptState:
    """Adam moment accumulators and hyperparameters."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptState):
    """One bias-corrected Adam update, in place on the parameter data.

    Returns (params, state) for convenience.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} vs param {p.data.shape} for {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ----------------------------------------------------------------------
# verification oracle


def finite_difference_check(loss_fn: Callable[[], Tensor],
                            params: Mapping[str, Tensor] | Iterable[Tensor],
                            eps: float = 1e-6) -> float:
    """Max relative error between backward() and central differences.

    ``loss_fn`` must be a deterministic closure over ``params`` returning
    a scalar Tensor.  Error per entry is |analytic - fd| / max(1, |fd|).
    """
    if eps <= 0:
        raise ValueError(f"finite_difference_check: eps must be > 0, got {eps}")
    if isinstance(params, Mapping):
        plist = list(params.values())
    else:
        plist = list(params)

    base1 = loss_fn().item()
    base2 = loss_fn().item()
    if base1 != base2:
        raise RuntimeError(
            f"finite_difference_check: loss_fn is not deterministic ({base1!r} != {base2!r})"
        )

    for p in plist:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [
        (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for p in plist
    ]

    worst = 0.0
    with no_grad():
        for p, an in zip(plist, analytic):
            flat = p.data.reshape(-1)
            aflat = an.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                fd = (up - down) / (2.0 * eps)
                err = abs(aflat[i] - fd) / max(1.0, abs(fd))
                if err > worst:
                    worst = err
    return worst


def linear_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    """Uniform Glorot initialization for a (fan_in, fan_out) weight."""
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))
