"""Dense f32 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: just enough ops to train a block CNN with
an attention head and to differentiate the style hooks. Feature maps follow
the NCHW layout. Ops execute eagerly on numpy arrays; while a Tape is active,
every op whose output needs a gradient appends a backward closure to it, and
Tape.backward replays the closures in reverse insertion order. Insertion
order is a valid topological order because tensors are immutable once
created.

Elementwise ops accept equal shapes or a scalar operand, nothing else;
shape-changing broadcasts go through explicit expand() so every gradient
reduction is visible at the call site. Reductions accumulate in f64 before
rounding back to f32 to bound drift.
"""

from __future__ import annotations

import json

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not fit; the message names the offending dimension."""


class NumericError(ArithmeticError):
    """An op produced NaN or Inf from finite inputs (raised in debug mode)."""


_debug_checks = False
_active_tape = None


def set_debug_checks(enabled):
    """Screen every op output for NaN/Inf. Slow; meant for tests and the CLI."""
    global _debug_checks
    _debug_checks = bool(enabled)


class Tape:
    """Backward-closure recorder for one forward pass.

    Use as a context manager around the forward computation, then call
    backward(loss). Tapes do not nest and are single threaded; independent
    tapes never share closures, so sequential backward passes cannot
    cross-contaminate gradients.
    """

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        global _active_tape
        if _active_tape is not None:
            raise RuntimeError("tapes do not nest; close the active tape first")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _active_tape
        _active_tape = None

    def backward(self, loss):
        """Populate .grad for every requires_grad tensor reachable from loss."""
        if loss.data.shape != ():
            raise ShapeError(
                "backward expects a scalar loss, got shape %r" % (loss.data.shape,)
            )
        loss.grad = np.ones((), dtype=np.float32)
        for node in reversed(self._nodes):
            if node.grad is not None:
                node._backward(node.grad)


class Tensor:
    """A dense f32 array, optionally carrying a gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float32)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return "Tensor(shape=%r, requires_grad=%r)" % (
            tuple(self.data.shape),
            self.requires_grad,
        )

    # -- elementwise arithmetic ------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape ops --------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def expand(self, shape):
        return expand(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    # -- reductions and nonlinearities -------------------------------------

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis, keepdims)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)

    def leaky_relu(self, slope=0.1):
        return leaky_relu(self, slope)


def _coerce(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.float32(x))


def _finish(out, backward):
    """Attach a backward closure when recording; run debug screening."""
    if _debug_checks and not np.all(np.isfinite(out.data)):
        raise NumericError("op produced a non-finite value from finite inputs")
    if out.requires_grad and _active_tape is not None:
        out._backward = backward
        _active_tape._nodes.append(out)
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        # own a fresh buffer on first write; g may alias caller memory
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _scatter_rows(t, idx, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    idx = np.asarray(idx)
    # np.add.at is unbuffered but slow; plain fancy add is correct whenever
    # no row index repeats
    if len(np.unique(idx)) == len(idx):
        t.grad[idx] += g
    else:
        np.add.at(t.grad, idx, g)


def _shrink(g, shape):
    # scalar operands collect the whole upstream gradient
    if shape == () and g.shape != ():
        return np.float32(g.sum(dtype=np.float64))
    return g


def _check_elementwise(a, b, op):
    if a.data.shape != b.data.shape and a.data.shape != () and b.data.shape != ():
        raise ShapeError(
            "%s operands differ: %r vs %r (use expand() for broadcasts)"
            % (op, tuple(a.data.shape), tuple(b.data.shape))
        )


def add(a, b):
    a, b = _coerce(a), _coerce(b)
    _check_elementwise(a, b, "add")
    out = Tensor(a.data + b.data, a.requires_grad or b.requires_grad)

    def backward(g):
        _accum(a, _shrink(g, a.data.shape))
        _accum(b, _shrink(g, b.data.shape))

    return _finish(out, backward)


def sub(a, b):
    a, b = _coerce(a), _coerce(b)
    _check_elementwise(a, b, "sub")
    out = Tensor(a.data - b.data, a.requires_grad or b.requires_grad)

    def backward(g):
        _accum(a, _shrink(g, a.data.shape))
        _accum(b, _shrink(-g, b.data.shape))

    return _finish(out, backward)


def mul(a, b):
    a, b = _coerce(a), _coerce(b)
    _check_elementwise(a, b, "mul")
    out = Tensor(a.data * b.data, a.requires_grad or b.requires_grad)

    def backward(g):
        _accum(a, _shrink(g * b.data, a.data.shape))
        _accum(b, _shrink(g * a.data, b.data.shape))

    return _finish(out, backward)


def div(a, b):
    a, b = _coerce(a), _coerce(b)
    _check_elementwise(a, b, "div")
    out = Tensor(a.data / b.data, a.requires_grad or b.requires_grad)

    def backward(g):
        _accum(a, _shrink(g / b.data, a.data.shape))
        _accum(b, _shrink(-g * a.data / (b.data * b.data), b.data.shape))

    return _finish(out, backward)


def neg(t):
    out = Tensor(-t.data, t.requires_grad)

    def backward(g):
        _accum(t, -g)

    return _finish(out, backward)


def reshape(t, shape):
    out = Tensor(t.data.reshape(shape), t.requires_grad)

    def backward(g):
        _accum(t, g.reshape(t.data.shape))

    return _finish(out, backward)


def expand(t, shape):
    """Broadcast to `shape`; the gradient sums over the broadcast axes."""
    try:
        data = np.broadcast_to(t.data, shape)
    except ValueError:
        raise ShapeError(
            "cannot expand %r to %r" % (tuple(t.data.shape), tuple(shape))
        ) from None
    out = Tensor(data, t.requires_grad)
    src = t.data.shape

    def backward(g):
        extra = g.ndim - len(src)
        if extra:
            g = g.sum(axis=tuple(range(extra)), dtype=np.float64)
        squeezed = tuple(i for i, d in enumerate(src) if d == 1 and g.shape[i] != 1)
        if squeezed:
            g = g.sum(axis=squeezed, keepdims=True, dtype=np.float64)
        _accum(t, np.asarray(g, dtype=np.float32))

    return _finish(out, backward)


def transpose(t, axes=None):
    out = Tensor(np.transpose(t.data, axes), t.requires_grad)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        _accum(t, np.transpose(g, inv))

    return _finish(out, backward)


def _spread(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.asarray(g, dtype=np.float32), shape)
    ax = axis if isinstance(axis, tuple) else (axis,)
    ax = tuple(a % len(shape) for a in ax)
    if not keepdims:
        for a in sorted(ax):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def tensor_sum(t, axis=None, keepdims=False):
    data = t.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64)
    out = Tensor(data, t.requires_grad)

    def backward(g):
        _accum(t, _spread(g, t.data.shape, axis, keepdims))

    return _finish(out, backward)


def tensor_mean(t, axis=None, keepdims=False):
    data = t.data.mean(axis=axis, keepdims=keepdims, dtype=np.float64)
    out = Tensor(data, t.requires_grad)
    if axis is None:
        count = t.data.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for a in ax:
            count *= t.data.shape[a]

    def backward(g):
        _accum(t, _spread(g / np.float32(count), t.data.shape, axis, keepdims))

    return _finish(out, backward)


def sqrt(t):
    """Elementwise square root; callers must keep inputs away from 0."""
    out = Tensor(np.sqrt(t.data), t.requires_grad)

    def backward(g):
        _accum(t, g * (np.float32(0.5) / out.data))

    return _finish(out, backward)


def relu(t):
    out = Tensor(np.maximum(t.data, 0), t.requires_grad)

    def backward(g):
        # subgradient at the kink fixed to 0
        _accum(t, g * (t.data > 0))

    return _finish(out, backward)


def leaky_relu(t, slope=0.1):
    s = np.float32(slope)
    out = Tensor(np.where(t.data > 0, t.data, t.data * s), t.requires_grad)

    def backward(g):
        _accum(t, g * np.where(t.data > 0, np.float32(1), s))

    return _finish(out, backward)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            "matmul expects 2-d operands, got %r and %r"
            % (tuple(a.data.shape), tuple(b.data.shape))
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            "matmul inner dimensions differ: %d vs %d"
            % (a.data.shape[1], b.data.shape[0])
        )
    out = Tensor(a.data @ b.data, a.requires_grad or b.requires_grad)

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _finish(out, backward)


def bmm(a, b):
    """Batched matmul over a shared leading axis: [B,n,k] @ [B,k,m]."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ShapeError(
            "bmm expects 3-d operands, got %r and %r"
            % (tuple(a.data.shape), tuple(b.data.shape))
        )
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2] != b.data.shape[1]:
        raise ShapeError(
            "bmm shapes incompatible: %r vs %r"
            % (tuple(a.data.shape), tuple(b.data.shape))
        )
    out = Tensor(a.data @ b.data, a.requires_grad or b.requires_grad)

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ b.data.transpose(0, 2, 1))
        if b.requires_grad:
            _accum(b, a.data.transpose(0, 2, 1) @ g)

    return _finish(out, backward)


def concat(parts, axis=0):
    parts = [_coerce(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    out = Tensor(data, any(p.requires_grad for p in parts))
    splits = np.cumsum([p.data.shape[axis] for p in parts])[:-1]

    def backward(g):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            _accum(p, piece)

    return _finish(out, backward)


def gather_rows(t, indices):
    """Select rows along axis 0; repeated indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.int64)
    out = Tensor(t.data[idx], t.requires_grad)

    def backward(g):
        _scatter_rows(t, idx, g)

    return _finish(out, backward)


def conv2d(x, w, b, stride=1, pad=0):
    """2-d convolution via im2col. Requires exact output-size division."""
    if x.data.ndim != 4:
        raise ShapeError("conv2d input must be [B,C,H,W], got %r" % (tuple(x.shape),))
    bs, c, h, wd = x.data.shape
    co, ci, kh, kw = w.data.shape
    if kh != kw:
        raise ShapeError("conv2d kernels must be square, got %dx%d" % (kh, kw))
    if ci != c:
        raise ShapeError("conv2d weight expects %d input channels, input has %d" % (ci, c))
    if b.data.shape != (co,):
        raise ShapeError("conv2d bias must have shape (%d,), got %r" % (co, tuple(b.shape)))
    k = kh
    hp, wp = h + 2 * pad, wd + 2 * pad
    if k > hp or k > wp:
        raise ShapeError("conv2d kernel %d exceeds padded input %dx%d" % (k, hp, wp))
    if (hp - k) % stride or (wp - k) % stride:
        raise ShapeError(
            "conv2d output size not integral: height (%d-%d)/%d, width (%d-%d)/%d"
            % (hp, k, stride, wp, k, stride)
        )
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = np.empty((bs, c, k, k, ho, wo), dtype=np.float32)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    colm = cols.reshape(bs, c * k * k, ho * wo)
    wm = w.data.reshape(co, c * k * k)
    out_data = np.matmul(wm, colm) + b.data.reshape(1, co, 1)
    out = Tensor(
        out_data.reshape(bs, co, ho, wo),
        x.requires_grad or w.requires_grad or b.requires_grad,
    )

    def backward(g):
        gm = np.ascontiguousarray(g.reshape(bs, co, ho * wo))
        if w.requires_grad:
            dw = np.matmul(gm, colm.transpose(0, 2, 1)).sum(axis=0)
            _accum(w, dw.reshape(w.data.shape))
        if b.requires_grad:
            _accum(b, gm.sum(axis=(0, 2), dtype=np.float64).astype(np.float32))
        if x.requires_grad:
            dcols = np.matmul(wm.T, gm).reshape(bs, c, k, k, ho, wo)
            dxp = np.zeros((bs, c, hp, wp), dtype=np.float32)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
            _accum(x, dxp[:, :, pad : pad + h, pad : pad + wd])

    return _finish(out, backward)


def global_avg_pool(x):
    """Spatial mean per channel: [B,C,H,W] -> [B,C]."""
    if x.data.ndim != 4:
        raise ShapeError("global_avg_pool input must be [B,C,H,W], got %r" % (tuple(x.shape),))
    h, w = x.data.shape[2], x.data.shape[3]
    data = x.data.mean(axis=(2, 3), dtype=np.float64)
    out = Tensor(data, x.requires_grad)

    def backward(g):
        gx = (g / np.float32(h * w))[:, :, None, None]
        _accum(x, np.broadcast_to(gx, x.data.shape))

    return _finish(out, backward)


def linear(x, w, b):
    """Affine map: [B,D] @ [O,D]^T + [O] -> [B,O]."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError(
            "linear expects 2-d input and weight, got %r and %r"
            % (tuple(x.shape), tuple(w.shape))
        )
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(
            "linear input width %d does not match weight width %d"
            % (x.data.shape[1], w.data.shape[1])
        )
    if b.data.shape != (w.data.shape[0],):
        raise ShapeError(
            "linear bias must have shape (%d,), got %r" % (w.data.shape[0], tuple(b.shape))
        )
    out = Tensor(x.data @ w.data.T + b.data, x.requires_grad or w.requires_grad or b.requires_grad)

    def backward(g):
        if x.requires_grad:
            _accum(x, g @ w.data)
        if w.requires_grad:
            _accum(w, g.T @ x.data)
        if b.requires_grad:
            _accum(b, g.sum(axis=0, dtype=np.float64).astype(np.float32))

    return _finish(out, backward)


def softmax(t, axis=-1):
    z = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s, t.requires_grad)

    def backward(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        _accum(t, s * (g - dot))

    return _finish(out, backward)


def softmax_cross_entropy(logits, labels):
    """Mean over the batch of -log softmax(logits)[label], stabilized."""
    if logits.data.ndim != 2:
        raise ShapeError("softmax_cross_entropy expects [B,K] logits, got %r" % (tuple(logits.shape),))
    y = np.asarray(labels, dtype=np.int64)
    bs, k = logits.data.shape
    if y.shape != (bs,):
        raise ShapeError("labels must have shape (%d,), got %r" % (bs, tuple(y.shape)))
    if y.min(initial=0) < 0 or y.max(initial=0) >= k:
        raise ShapeError("labels out of range [0,%d)" % k)
    z = logits.data.astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = Tensor(-logp[np.arange(bs), y].mean(), logits.requires_grad)
    probs = np.exp(logp)

    def backward(g):
        gb = probs.copy()
        gb[np.arange(bs), y] -= 1.0
        _accum(logits, (gb * (float(g) / bs)).astype(np.float32))

    return _finish(out, backward)


# -- fixture file format ----------------------------------------------------
# One UTF-8 JSON header line {"shape":[...],"dtype":"f32"}, a newline, then
# the raw little-endian f32 payload in row-major order.


def save_tensor(path, t):
    data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float32)
    header = json.dumps({"shape": list(data.shape), "dtype": "f32"})
    with open(path, "wb") as f:
        f.write(header.encode("utf-8"))
        f.write(b"\n")
        f.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def load_tensor(path):
    with open(path, "rb") as f:
        header = f.readline()
        meta = json.loads(header.decode("utf-8"))
        if meta.get("dtype") != "f32":
            raise ValueError("unsupported fixture dtype %r" % meta.get("dtype"))
        shape = tuple(meta["shape"])
        payload = f.read()
    expected = int(np.prod(shape)) * 4 if shape else 4
    if len(payload) != expected:
        raise ValueError(
            "fixture payload holds %d bytes, header shape %r needs %d"
            % (len(payload), shape, expected)
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(shape)
    return Tensor(arr.copy())
