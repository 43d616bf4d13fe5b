"""Dense tensors with reverse-mode automatic differentiation on top of numpy.

Every op that touches a tensor with ``requires_grad`` records its inputs and a
backward rule on the output.  ``Tensor.backward`` walks the reachable nodes in
exact reverse creation order (a global sequence counter is the tape), so the
gradient of a graph is bit-reproducible run to run.
"""
from __future__ import annotations

import contextlib
import itertools
import struct

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "Parameter", "ShapeError", "DomainError", "GradError",
    "tensor", "zeros", "ones", "as_tensor",
    "elementwise", "matmul", "conv2d", "upsample_nearest",
    "sum", "mean", "max", "softmax", "log_softmax", "logsumexp",
    "reshape", "transpose", "concat", "stack", "pad2d", "dropout",
    "bce_with_logits", "no_grad", "is_grad_enabled", "precision",
    "get_default_dtype", "set_default_dtype", "strict_mode",
    "to_bytes", "from_bytes", "detach_all", "l2_normalize",
]

_default_dtype = np.float32
_grad_enabled = True
_strict = False
_seq = itertools.count()


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class GradError(RuntimeError):
    pass


def get_default_dtype():
    return _default_dtype


def set_default_dtype(dtype):
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default float type (gradient checks run in float64)."""
    old = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


def is_grad_enabled():
    return _grad_enabled


@contextlib.contextmanager
def strict_mode(enabled=True):
    """Make log/div raise DomainError on nonpositive / zero operands."""
    global _strict
    old = _strict
    _strict = enabled
    try:
        yield
    finally:
        _strict = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is None:
            dtype = _default_dtype
        self.data = np.array(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._seq = next(_seq)

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    # -- autodiff --------------------------------------------------------
    def backward(self, grad=None):
        if not self.requires_grad:
            raise GradError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise GradError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        nodes = {}
        stack = [self]
        while stack:
            n = stack.pop()
            if id(n) in nodes:
                continue
            nodes[id(n)] = n
            stack.extend(p for p in n._parents if p.requires_grad)
        order = sorted(nodes.values(), key=lambda n: n._seq, reverse=True)
        pending = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for n in order:
            g = pending.pop(id(n), None)
            if g is None:
                continue
            n.grad = g if n.grad is None else n.grad + g
            if n._backward is None:
                continue
            for p, gp in zip(n._parents, n._backward(g)):
                if gp is None or not p.requires_grad:
                    continue
                k = id(p)
                pending[k] = gp if k not in pending else pending[k] + gp

    # -- operators -------------------------------------------------------
    def __add__(self, o):
        return elementwise("add", self, o)

    def __radd__(self, o):
        return elementwise("add", o, self)

    def __sub__(self, o):
        return elementwise("sub", self, o)

    def __rsub__(self, o):
        return elementwise("sub", o, self)

    def __mul__(self, o):
        return elementwise("mul", self, o)

    def __rmul__(self, o):
        return elementwise("mul", o, self)

    def __truediv__(self, o):
        return elementwise("div", self, o)

    def __rtruediv__(self, o):
        return elementwise("div", o, self)

    def __neg__(self):
        return elementwise("neg", self)

    def __pow__(self, p):
        return elementwise("pow", self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def exp(self):
        return elementwise("exp", self)

    def log(self):
        return elementwise("log", self)

    def relu(self):
        return elementwise("relu", self)

    def leaky_relu(self, slope=0.2):
        return elementwise("leaky-relu", self, slope=slope)

    def sigmoid(self):
        return elementwise("sigmoid", self)

    def tanh(self):
        return elementwise("tanh", self)

    def sum(self, axes=None, keepdims=False):
        return sum(self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return mean(self, axes, keepdims)

    def max(self, axes=None, keepdims=False):
        return max(self, axes, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


class Parameter(Tensor):
    """A leaf tensor that always requires grad."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=_default_dtype), requires_grad)


def ones(shape, requires_grad=False):
    return Tensor(np.ones(shape, dtype=_default_dtype), requires_grad)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def detach_all(tensors):
    return [t.detach() for t in tensors]


def _result(data, parents, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._seq = next(_seq)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_check(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


_UNARY = {"neg", "exp", "log", "relu", "leaky-relu", "sigmoid", "tanh"}
_BINARY = {"add", "sub", "mul", "div", "pow"}


def elementwise(kind, a, b=None, slope=0.2):
    """Apply one elementwise op. Binary kinds broadcast numpy-style."""
    if kind in _UNARY:
        return _unary(kind, as_tensor(a), slope)
    if kind not in _BINARY:
        raise ValueError(f"unknown elementwise op {kind!r}")
    if kind == "pow" and not isinstance(b, Tensor):
        return _pow_scalar(as_tensor(a), float(b))
    if isinstance(a, Tensor):
        b = as_tensor(b, like=a)
    else:
        b = as_tensor(b)
        a = as_tensor(a, like=b)
    _broadcast_check(a, b)
    ad, bd = a.data, b.data
    sa, sb = ad.shape, bd.shape

    if kind == "add":
        return _result(ad + bd, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))
    if kind == "sub":
        return _result(ad - bd, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))
    if kind == "mul":
        return _result(ad * bd, (a, b),
                       lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)))
    if kind == "div":
        if _strict and np.any(bd == 0):
            raise DomainError("division by zero")
        out = ad / bd
        return _result(out, (a, b),
                       lambda g: (_unbroadcast(g / bd, sa), _unbroadcast(-g * out / bd, sb)))
    # tensor exponent
    if _strict and np.any(ad <= 0):
        raise DomainError("pow with a tensor exponent needs a positive base")
    out = ad ** bd

    def back(g):
        gb = _unbroadcast(g * out * np.log(np.where(ad > 0, ad, 1)), sb) if b.requires_grad else None
        return _unbroadcast(g * bd * ad ** (bd - 1), sa), gb
    return _result(out, (a, b), back)


def _pow_scalar(a, p):
    ad = a.data
    out = ad ** p
    return _result(out, (a,), lambda g: (g * p * ad ** (p - 1),))


def _unary(kind, a, slope):
    x = a.data
    if kind == "neg":
        return _result(-x, (a,), lambda g: (-g,))
    if kind == "exp":
        out = np.exp(x)
        return _result(out, (a,), lambda g: (g * out,))
    if kind == "log":
        if _strict and np.any(x <= 0):
            raise DomainError("log of a nonpositive value")
        return _result(np.log(x), (a,), lambda g: (g / x,))
    if kind == "relu":
        mask = x > 0
        return _result(x * mask, (a,), lambda g: (g * mask,))
    if kind == "leaky-relu":
        scale = np.where(x > 0, 1.0, slope).astype(x.dtype)
        return _result(x * scale, (a,), lambda g: (g * scale,))
    if kind == "sigmoid":
        out = _sigmoid(x)
        return _result(out, (a,), lambda g: (g * out * (1 - out),))
    out = np.tanh(x)
    return _result(out, (a,), lambda g: (g * (1 - out * out),))


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb
    return _result(ad @ bd, (a, b), back)


def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def _expand_grad(g, shape, axes, keepdims):
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(x, axes=None, keepdims=False):
    axes = _norm_axes(axes, x.ndim)
    shape = x.shape
    out = x.data.sum(axis=axes, keepdims=keepdims)
    return _result(np.asarray(out), (x,), lambda g: (_expand_grad(g, shape, axes, keepdims),))


def mean(x, axes=None, keepdims=False):
    axes = _norm_axes(axes, x.ndim)
    n = 1
    for ax in axes:
        n *= x.shape[ax]
    if n == 0:
        raise ShapeError("mean over an empty axis")
    shape = x.shape
    out = x.data.mean(axis=axes, keepdims=keepdims)
    return _result(np.asarray(out), (x,), lambda g: (_expand_grad(g / n, shape, axes, keepdims),))


def max(x, axes=None, keepdims=False):
    axes = _norm_axes(axes, x.ndim)
    if any(x.shape[ax] == 0 for ax in axes):
        raise ShapeError("max over an empty axis")
    m = x.data.max(axis=axes, keepdims=True)
    mask = (x.data == m)
    mask = mask / mask.sum(axis=axes, keepdims=True)
    out = m if keepdims else np.squeeze(m, axis=axes)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (g * mask,)
    return _result(np.asarray(out), (x,), back)


def softmax(x, axis=-1):
    if x.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _result(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _result(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def logsumexp(x, axis=-1, keepdims=False):
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    p = e / s
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * p,)
    return _result(out, (x,), back)


def reshape(x, shape):
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def _getitem(x, idx):
    shape, dtype = x.shape, x.data.dtype

    def back(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, idx, g)
        return (out,)
    return _result(x.data[idx], (x,), back)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"cannot concatenate shapes {ref} and {t.shape} along axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _result(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=ax)))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _result(out, tuple(tensors),
                   lambda g: tuple(np.squeeze(s, axis=axis) for s in np.split(g, n, axis=axis)))


def pad2d(x, top, bottom, left, right):
    """Zero-pad the last two axes."""
    pads = [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)]
    H, W = x.shape[-2:]
    out = np.pad(x.data, pads)
    return _result(out, (x,), lambda g: (g[..., top:top + H, left:left + W],))


def upsample_nearest(x, factor=2):
    out = x.data.repeat(factor, axis=-2).repeat(factor, axis=-1)
    B = x.shape[:-2]
    H, W = x.shape[-2:]

    def back(g):
        return (g.reshape(*B, H, factor, W, factor).sum(axis=(-3, -1)),)
    return _result(out, (x,), back)


def _conv_pad(padding, k):
    if padding == "same":
        return k // 2
    if padding == "valid":
        return 0
    if isinstance(padding, int) and padding >= 0:
        return padding
    raise ValueError(f"bad padding {padding!r}")


def conv2d(x, kernel, stride=1, padding="same", depthwise=False):
    """2-D cross-correlation over ``x[B,C,H,W]``.

    ``kernel`` is ``[O,C,k,k]`` or, with ``depthwise=True``, ``[C,1,k,k]``
    (one filter per channel).
    """
    B, C, H, W = x.shape
    O, Ck, kh, kw = kernel.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"kernel must be square with odd extent, got {kh}x{kw}")
    k = kh
    if depthwise:
        if O != C or Ck != 1:
            raise ShapeError(f"depthwise conv needs kernel [C,1,k,k] with C={C}, got {kernel.shape}")
    elif Ck != C:
        raise ShapeError(f"kernel expects {Ck} input channels, input has {C}")
    p = _conv_pad(padding, k)
    Hp, Wp = H + 2 * p, W + 2 * p
    if k > Hp or k > Wp:
        raise ShapeError(f"kernel {k}x{k} larger than padded input {Hp}x{Wp}")
    s = stride
    Ho, Wo = (Hp - k) // s + 1, (Wp - k) // s + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    K = kernel.data
    span_h, span_w = s * (Ho - 1) + 1, s * (Wo - 1) + 1

    if depthwise:
        out = np.zeros((B, C, Ho, Wo), dtype=xp.dtype)
        for i in range(k):
            for j in range(k):
                out += xp[:, :, i:i + span_h:s, j:j + span_w:s] * K[None, :, 0, i, j, None, None]

        def back(g):
            gx = gk = None
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i:i + span_h:s, j:j + span_w:s] += g * K[None, :, 0, i, j, None, None]
                gx = gxp[:, :, p:p + H, p:p + W]
            if kernel.requires_grad:
                gk = np.zeros_like(K)
                for i in range(k):
                    for j in range(k):
                        gk[:, 0, i, j] = (g * xp[:, :, i:i + span_h:s, j:j + span_w:s]).sum(axis=(0, 2, 3))
            return gx, gk
        return _result(out, (x, kernel), back)

    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]   # B,C,Ho,Wo,k,k
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)
    K2 = K.reshape(O, C * k * k)
    out = (cols @ K2.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gx = gk = None
        if kernel.requires_grad:
            gk = (g2.T @ cols).reshape(K.shape)
        if x.requires_grad:
            gcols = (g2 @ K2).reshape(B, Ho, Wo, C, k, k)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + span_h:s, j:j + span_w:s] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, p:p + H, p:p + W]
        return gx, gk
    return _result(np.ascontiguousarray(out), (x, kernel), back)


def dropout(x, rate, rng, training=True):
    """Inverted dropout with a mask drawn from ``rng``; identity when not training."""
    if not training or rate <= 0:
        return x
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0,1), got {rate}")
    mask = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1 - rate)
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def bce_with_logits(logits, targets):
    """Mean of ``-[t log s(x) + (1-t) log(1-s(x))]`` in the overflow-free form."""
    x = logits.data
    t = targets.data if isinstance(targets, Tensor) else np.broadcast_to(
        np.asarray(targets, dtype=x.dtype), x.shape)
    if t.shape != x.shape:
        raise ShapeError(f"logits {x.shape} and targets {t.shape} differ")
    if np.any((t < 0) | (t > 1)):
        raise ValueError("targets must lie in [0, 1]")
    n = x.size
    loss = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    out = np.asarray(loss.mean(), dtype=x.dtype)
    sig = _sigmoid(x)
    parents = (logits, targets) if isinstance(targets, Tensor) else (logits,)

    def back(g):
        gx = g * (sig - t) / n
        if len(parents) == 2:
            return gx, -g * x / n
        return (gx,)
    return _result(out, parents, back)


# -- serialization ---------------------------------------------------------
_MAGIC = b"MSPT"
_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def to_bytes(t):
    """Encode as ``MSPT | u8 dtype | u8 rank | u32 extents... | raw LE values``."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise ValueError(f"cannot serialize dtype {arr.dtype}")
    head = _MAGIC + struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dt).tobytes()


def from_bytes(buf, offset=0):
    """Decode one tensor; returns ``(Tensor, next_offset)``."""
    if buf[offset:offset + 4] != _MAGIC:
        raise ValueError("bad tensor magic")
    code, rank = struct.unpack_from("<BB", buf, offset + 4)
    if code not in _CODE_DTYPES:
        raise ValueError(f"unknown dtype code {code}")
    shape = struct.unpack_from(f"<{rank}I", buf, offset + 6)
    dt = _CODE_DTYPES[code]
    start = offset + 6 + 4 * rank
    n = int(np.prod(shape, dtype=np.int64))
    arr = np.frombuffer(buf, dtype=dt, count=n, offset=start).reshape(shape)
    native = dt.newbyteorder("=")
    return Tensor(arr.astype(native), dtype=native), start + n * dt.itemsize


def l2_normalize(x, axis=-1, eps=1e-8):
    """``x / max(||x||, eps)`` along ``axis``; an all-zero row maps to zeros."""
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    safe = n > eps
    d = np.where(safe, n, eps)
    u = x.data / d

    def back(g):
        radial = (g * u).sum(axis=axis, keepdims=True)
        return (np.where(safe, (g - u * radial) / d, g / eps),)
    return _result(u, (x,), back)
