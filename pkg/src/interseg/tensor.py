"""Dense NCHW tensors with reverse-mode autodiff.

The graph is built define-by-run: every op stamps its output with a
monotonically increasing sequence number and a local backward rule.
``backward(loss)`` collects the ops reachable from the loss into a
:class:`Tape` (execution order is already a topological order) and walks
it once in reverse, accumulating gradients.

Training runs in float32 by default; gradient-check tests switch the
whole build to float64 via :func:`use_dtype`.
"""

from __future__ import annotations

import contextlib
import itertools

import numpy as np

_default_dtype = np.float32
_grad_enabled = True
_op_counter = itertools.count()


class ShapeError(ValueError):
    """Raised when an op's operands disagree on some dimension."""


def default_dtype():
    return _default_dtype


def set_default_dtype(dtype):
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _default_dtype = dtype.type


@contextlib.contextmanager
def use_dtype(dtype):
    """Run a block with a different default dtype (e.g. float64 grad checks)."""
    global _default_dtype
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _default_dtype = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional value; a node in the gradient graph.

    ``requires_grad`` marks trainable leaves; op outputs inherit it from
    their parents. ``grad`` is allocated lazily by backward passes and
    accumulates additively until :meth:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _default_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._seq = -1

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

    def item(self):
        return float(self.data.item())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- grad bookkeeping ----------------------------------------------

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def detach(self):
        """Same values, severed from the graph (stops gradient flow)."""
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        backward(self)

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _coerce(other, self.dtype))

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _coerce(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_coerce(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def log(self):
        return log(self)

    def clip(self, lo, hi):
        return clip(self, lo, hi)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)


def _coerce(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _make(data, parents, backward_fn):
    """Wrap an op result; record graph edges only when grad mode is on."""
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._seq = next(_op_counter)
    return out


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tape:
    """Ordered record of the ops reachable from one root.

    Entries are op-output tensors sorted by execution sequence, which is
    a valid topological order by construction (an op can only consume
    tensors that already exist). ``execute`` visits each entry exactly
    once, in reverse.
    """

    def __init__(self, entries):
        self.entries = entries

    @classmethod
    def from_root(cls, root):
        seen = set()
        entries = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen or t._backward is None:
                continue
            seen.add(id(t))
            entries.append(t)
            stack.extend(t._parents)
        entries.sort(key=lambda t: t._seq)
        return cls(entries)

    def execute(self, root, seed=None):
        if seed is None:
            seed = np.ones_like(root.data)
        flows = {id(root): seed}
        alive = {id(root): root}
        for t in reversed(self.entries):
            g = flows.pop(id(t), None)
            alive.pop(id(t), None)
            if g is None:
                continue
            t.accumulate_grad(g)
            contribs = t._backward(g)
            for parent, pg in zip(t._parents, contribs):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in flows:
                    flows[id(parent)] = flows[id(parent)] + pg
                else:
                    flows[id(parent)] = pg
                    alive[id(parent)] = parent
        # whatever is left are leaves
        for key, g in flows.items():
            leaf = alive[key]
            if leaf.requires_grad:
                leaf.accumulate_grad(g)


def backward(loss):
    """Reverse pass from a scalar loss; grads accumulate additively."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward is None:
        if loss.requires_grad:
            loss.accumulate_grad(np.ones_like(loss.data))
        return
    Tape.from_root(loss).execute(loss)


# -- elementwise ops ---------------------------------------------------


def add(a, b):
    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), back)


def sub(a, b):
    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), back)


def mul(a, b):
    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), back)


def div(a, b):
    def back(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(a.data / b.data, (a, b), back)


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, exponent):
    exponent = float(exponent)

    def back(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _make(a.data**exponent, (a,), back)


def log(a):
    def back(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), back)


def clip(a, lo, hi):
    """Clamp values; gradient passes only strictly inside (lo, hi)."""
    inside = (a.data > lo) & (a.data < hi)

    def back(g):
        return (g * inside,)

    return _make(np.clip(a.data, lo, hi), (a,), back)


def tsum(a, axis=None):
    if axis is not None and not isinstance(axis, tuple):
        axis = (axis,)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)
        ge = np.expand_dims(g, axis)
        return (np.broadcast_to(ge, a.shape).astype(a.dtype, copy=True),)

    return _make(a.data.sum(axis=axis), (a,), back)


def tmean(a, axis=None):
    if axis is not None and not isinstance(axis, tuple):
        axis = (axis,)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in axis]))

    def back(g):
        if axis is None:
            gb = np.broadcast_to(g, a.shape)
        else:
            gb = np.broadcast_to(np.expand_dims(g, axis), a.shape)
        return (gb.astype(a.dtype, copy=True) / count,)

    return _make(a.data.mean(axis=axis), (a,), back)


def relu(a):
    mask = a.data > 0

    def back(g):
        return (g * mask,)

    return _make(np.where(mask, a.data, 0), (a,), back)


def sigmoid(a):
    x = a.data
    # stable split form; output stays strictly inside (0, 1) up to fp rounding
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def back(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), back)


def activation(a, kind):
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ValueError(f"unknown activation kind {kind!r}")


# -- structural ops ----------------------------------------------------


def concat_channels(a, b):
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError("concat_channels expects NCHW tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(
            f"concat_channels: N/H/W must match, got {a.shape} vs {b.shape}"
        )
    ca = a.shape[1]

    def back(g):
        return g[:, :ca], g[:, ca:]

    return _make(np.concatenate([a.data, b.data], axis=1), (a, b), back)


def upsample_nearest(a, factor=2):
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if a.ndim != 4:
        raise ShapeError("upsample_nearest expects an NCHW tensor")
    if factor == 1:
        return _make(a.data.copy(), (a,), lambda g: (g,))
    n, c, h, w = a.shape

    def back(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    out = np.repeat(np.repeat(a.data, factor, axis=2), factor, axis=3)
    return _make(out, (a,), back)


def maxpool2d(a, window=2):
    if a.ndim != 4:
        raise ShapeError("maxpool2d expects an NCHW tensor")
    n, c, h, w = a.shape
    if h % window or w % window:
        raise ShapeError(
            f"maxpool2d: spatial extents {h}x{w} not divisible by window {window}"
        )
    oh, ow = h // window, w // window
    tiles = a.data.reshape(n, c, oh, window, ow, window)
    tiles = tiles.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, window * window)
    idx = tiles.argmax(axis=-1)  # first max wins on ties
    out = np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gt = np.zeros((n, c, oh, ow, window * window), dtype=g.dtype)
        np.put_along_axis(gt, idx[..., None], g[..., None], axis=-1)
        gt = gt.reshape(n, c, oh, ow, window, window).transpose(0, 1, 2, 4, 3, 5)
        return (gt.reshape(n, c, h, w),)

    return _make(out, (a,), back)


# -- convolutions ------------------------------------------------------


def _pad2d(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _windows(x, k, stride):
    """Sliding k-by-k views of an already padded NCHW array: (N,C,OH,OW,k,k)."""
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _im2col(xp, k, stride):
    """Contiguous (N*OH*OW, C*k*k) patch matrix of a padded NCHW array."""
    win = _windows(xp, k, stride)
    n, c, oh, ow = win.shape[:4]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(n * oh * ow, c * k * k), oh, ow


def _col2im(pcols, n, c, hp, wp, k, stride, oh, ow):
    """Adjoint of `_im2col`: scatter-add patch columns into the padded image."""
    out = np.zeros((n, c, hp, wp), dtype=pcols.dtype)
    p6 = pcols.reshape(n, oh, ow, c, k, k)
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += (
                p6[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
            )
    return out


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of an NCHW input with an [Cout,Cin,k,k] kernel."""
    if x.ndim != 4:
        raise ShapeError("conv2d expects an NCHW input")
    if weight.ndim != 4:
        raise ShapeError("conv2d expects a 4-D [Cout,Cin,k,k] weight")
    co, ci, k, k2 = weight.shape
    if k != k2:
        raise ShapeError(f"conv2d: kernel must be square, got {k}x{k2}")
    if x.shape[1] != ci:
        raise ShapeError(
            f"conv2d: input has {x.shape[1]} channels (dim 1) but weight expects {ci}"
        )
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({co},)")
    if stride < 1 or k < 1:
        raise ValueError("conv2d: kernel size and stride must be >= 1")
    if padding < 0:
        raise ValueError("conv2d: padding must be >= 0")
    n, _, h, w = x.shape
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError(
            f"conv2d: padded input {h + 2 * padding}x{w + 2 * padding} smaller than kernel {k}"
        )

    xp = _pad2d(x.data, padding)
    # one contiguous im2col matrix; reused by the weight-gradient matmul
    cols, oh, ow = _im2col(xp, k, stride)
    out = cols @ weight.data.reshape(co, -1).T  # (N*OH*OW, Co)
    out = np.ascontiguousarray(out.reshape(n, oh, ow, co).transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.data[None, :, None, None]

    def back(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, co)
        gw = (gm.T @ cols).reshape(co, ci, k, k)
        gx_pad = _col2im(
            gm @ weight.data.reshape(co, -1),
            n, ci, xp.shape[2], xp.shape[3], k, stride, oh, ow,
        )
        gx = (
            gx_pad[:, :, padding : padding + h, padding : padding + w]
            if padding
            else gx_pad
        )
        gb = None if bias is None else g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, back)


def conv_transpose2d(x, weight, bias=None, stride=1, padding=0, output_size=None):
    """Transposed convolution: the exact adjoint of conv2d on the same kernel.

    The weight layout is [Cin,Cout,k,k], so an encoder kernel [Co,Ci,k,k]
    may be passed as-is to map Co channels back down to Ci.
    """
    if x.ndim != 4:
        raise ShapeError("conv_transpose2d expects an NCHW input")
    if weight.ndim != 4:
        raise ShapeError("conv_transpose2d expects a 4-D [Cin,Cout,k,k] weight")
    ci, co, k, k2 = weight.shape
    if k != k2:
        raise ShapeError(f"conv_transpose2d: kernel must be square, got {k}x{k2}")
    if x.shape[1] != ci:
        raise ShapeError(
            f"conv_transpose2d: input has {x.shape[1]} channels (dim 1) "
            f"but weight expects {ci}"
        )
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv_transpose2d: bias shape {bias.shape} != ({co},)")
    n, _, h, w = x.shape
    oh = (h - 1) * stride + k - 2 * padding
    ow = (w - 1) * stride + k - 2 * padding
    if output_size is not None:
        oh, ow = output_size
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv_transpose2d: output extent {oh}x{ow} is empty")

    # scatter through the kernel into the full natural extent, then crop to
    # the requested window; a larger request reads the zero margin instead
    hp = max((h - 1) * stride + k, oh + 2 * padding)
    wp = max((w - 1) * stride + k, ow + 2 * padding)
    xm = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(n * h * w, ci)
    out_pad = _col2im(
        xm @ weight.data.reshape(ci, -1), n, co, hp, wp, k, stride, h, w
    )
    out = out_pad[:, :, padding : padding + oh, padding : padding + ow]
    out = np.ascontiguousarray(out)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def back(g):
        gp = _pad2d(g, padding)
        # scatter targets past the crop were discarded in forward; pad with
        # zeros so every input position still sees a full window
        need_h = (h - 1) * stride + k
        need_w = (w - 1) * stride + k
        if gp.shape[2] < need_h or gp.shape[3] < need_w:
            gp = np.pad(
                gp,
                (
                    (0, 0),
                    (0, 0),
                    (0, max(0, need_h - gp.shape[2])),
                    (0, max(0, need_w - gp.shape[3])),
                ),
            )
        gcols, goh, gow = _im2col(gp, k, stride)  # (N*OH'*OW', Co*k*k)
        if goh != h or gow != w:
            gcols = gcols.reshape(n, goh, gow, -1)[:, :h, :w].reshape(n * h * w, -1)
        gx = gcols @ weight.data.reshape(ci, -1).T  # (N*H*W, Ci)
        gx = np.ascontiguousarray(gx.reshape(n, h, w, ci).transpose(0, 3, 1, 2))
        gw = (xm.T @ gcols).reshape(ci, co, k, k)
        gb = None if bias is None else g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, back)
