"""Small dense-tensor engine with tape-based reverse-mode differentiation.

Tensors wrap numpy arrays. Operations executed inside an active :class:`Tape`
are recorded when at least one operand requires a gradient; outside a tape
they run as plain numpy and nothing is kept around, which is what inference
uses.

Image tensors are channels-first. Every layer accepts an optional leading
batch axis (``N x C x H x W`` for convolutions, ``N x n`` for dense layers).
"""
from __future__ import annotations

from collections import OrderedDict

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError, UsageError

__all__ = [
    "Tensor", "Tape", "ParamStore", "backward",
    "add", "sub", "mul", "scale_shift", "neg", "tsum", "mean", "reshape",
    "concat", "getitem", "activation", "sigmoid", "clip", "power", "l2_norm",
    "dense", "conv2d", "conv_transpose2d", "residual_block", "rowdot",
    "scale_rows", "bmv", "conv_output_size", "conv_transpose_output_size",
]

LEAKY_SLOPE = 0.01

_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_from_op")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._from_op = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise UsageError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale_shift(self, other, 0.0)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, fn):
        self.out = out
        self.inputs = inputs
        self.backward = fn


class Tape:
    """Ordered record of the operations executed while the tape is active."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, output):
        backward(self, output)


def _emit(data, inputs, fn):
    out = Tensor(data)
    tape = _TAPES[-1] if _TAPES else None
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._from_op = True
        tape.nodes.append(_Node(out, inputs, fn))
    return out


def backward(tape: Tape, output: Tensor):
    """Accumulate d(output)/d(leaf) into every reachable leaf's ``grad``.

    The tape is left intact, so a second call accumulates again.
    """
    if output.data.size != 1:
        raise UsageError(f"backward needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        return
    if not output._from_op:
        output.grad += 1.0
        return
    grads = {id(output): np.ones_like(output.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._from_op:
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
            else:
                inp.grad += gi


class ParamStore:
    """Named trainable tensors in insertion order."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name, value):
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()

    def grad_norm(self):
        return float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in self._params.values())))

    def n_values(self):
        return sum(p.data.size for p in self._params.values())

    def astype(self, dtype):
        out = ParamStore()
        for name, p in self._params.items():
            out.add(name, p.data.astype(dtype))
        return out

    def state(self):
        return OrderedDict((k, p.data.copy()) for k, p in self._params.items())

    def load_state(self, state):
        for k, v in state.items():
            if k not in self._params:
                raise ConfigError(f"unknown parameter {k!r}")
            if self._params[k].shape != v.shape:
                raise DimensionError(f"{k}: stored {v.shape} vs model {self._params[k].shape}")
            self._params[k].data[...] = v


# ---------------------------------------------------------------- elementwise

def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "sub")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def neg(x):
    return _emit(-x.data, (x,), lambda g: (-g,))


def scale_shift(x, a, b=0.0):
    """``a * x + b`` with constant scalars ``a`` and ``b``."""
    x = _as_tensor(x)
    return _emit(a * x.data + b, (x,), lambda g: (a * g,))


def activation(x):
    """Leaky ReLU, slope 0.01 below zero."""
    d = x.data
    return _emit(np.maximum(d, LEAKY_SLOPE * d), (x,),
                 lambda g: (np.where(d >= 0, g, LEAKY_SLOPE * g),))


def sigmoid(x):
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit(y, (x,), lambda g: (g * y * (1.0 - y),))


def clip(x, lo, hi):
    d = x.data
    inside = ((d >= lo) & (d <= hi)).astype(d.dtype)
    return _emit(np.clip(d, lo, hi), (x,), lambda g: (g * inside,))


def power(x, p):
    d = x.data
    if p == 0:
        return _emit(np.ones_like(d), (x,), lambda g: (np.zeros_like(d),))
    if p == 1:
        return _emit(d.copy(), (x,), lambda g: (g,))
    return _emit(d ** p, (x,), lambda g: (g * p * d ** (p - 1),))


# ---------------------------------------------------------------- reductions

def tsum(x, axis=None):
    d = x.data
    y = np.sum(d, axis=axis)

    def fn(g):
        if axis is None:
            return (np.broadcast_to(g, d.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), d.shape).copy(),)

    return _emit(y, (x,), fn)


def mean(x):
    n = x.data.size
    return scale_shift(tsum(x), 1.0 / n)


def l2_norm(x, batched=False):
    """Euclidean norm of all entries, or per leading-axis item when ``batched``.

    Gradient is ``x / |x|`` and zero where the norm vanishes.
    """
    d = x.data
    if not batched:
        nrm = np.sqrt(np.sum(d * d))
        safe = nrm if nrm > 0 else 1.0
        return _emit(nrm, (x,), lambda g: (g * d / safe if nrm > 0 else np.zeros_like(d),))
    axes = tuple(range(1, d.ndim))
    nrm = np.sqrt(np.sum(d * d, axis=axes))
    safe = np.where(nrm > 0, nrm, 1.0)
    shape = (-1,) + (1,) * (d.ndim - 1)

    def fn(g):
        return ((g / safe).reshape(shape) * d * (nrm > 0).reshape(shape),)

    return _emit(nrm, (x,), fn)


# ---------------------------------------------------------------- structural

def reshape(x, shape):
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes):
    inv = tuple(np.argsort(axes))
    return _emit(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def concat(xs, axis=0):
    xs = [_as_tensor(t) for t in xs]
    ref = xs[0].shape
    ax = axis % len(ref)
    for t in xs[1:]:
        if len(t.shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != ax):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in xs])[:-1]

    def fn(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _emit(np.concatenate([t.data for t in xs], axis=ax), tuple(xs), fn)


def getitem(x, idx):
    d = x.data

    def fn(g):
        out = np.zeros_like(d)
        out[idx] = g
        return (out,)

    return _emit(d[idx].copy(), (x,), fn)


# ---------------------------------------------------------------- linear maps

def dense(x, W, b=None):
    """``y = W x + b`` for ``x`` of shape ``(n_in,)`` or ``(N, n_in)``."""
    if W.data.ndim != 2 or x.shape[-1] != W.shape[1] or x.data.ndim not in (1, 2):
        raise DimensionError(f"dense: input {x.shape} does not match weight {W.shape}")
    if b is not None and b.shape != (W.shape[0],):
        raise DimensionError(f"dense: bias {b.shape} does not match weight {W.shape}")
    xd, Wd = x.data, W.data
    y = xd @ Wd.T
    if b is not None:
        y = y + b.data
    inputs = (x, W) if b is None else (x, W, b)

    def fn(g):
        if xd.ndim == 1:
            gW = np.outer(g, xd)
            gb = g
        else:
            gW = g.T @ xd
            gb = g.sum(axis=0)
        gx = g @ Wd
        return (gx, gW) if b is None else (gx, gW, gb)

    return _emit(y, inputs, fn)


def rowdot(a, b):
    """Per-row dot product of two ``(N, k)`` tensors -> ``(N,)``."""
    _same_shape(a, b, "rowdot")
    ad, bd = a.data, b.data
    return _emit(np.sum(ad * bd, axis=-1), (a, b),
                 lambda g: (g[..., None] * bd, g[..., None] * ad))


def scale_rows(x, s):
    """``x[n, :] * s[n]`` for ``x`` of shape ``(N, k)`` and ``s`` of shape ``(N,)``."""
    if s.shape != x.shape[:-1]:
        raise DimensionError(f"scale_rows: scales {s.shape} vs rows {x.shape}")
    xd, sd = x.data, s.data
    return _emit(xd * sd[..., None], (x, s),
                 lambda g: (g * sd[..., None], np.sum(g * xd, axis=-1)))


def bmv(M, v):
    """Batched matrix-vector product ``(N, m, k) x (N, k) -> (N, m)``."""
    if M.data.ndim != 3 or v.data.ndim != 2 or M.shape[0] != v.shape[0] or M.shape[2] != v.shape[1]:
        raise DimensionError(f"bmv: matrix {M.shape} and vector {v.shape} do not conform")
    Md, vd = M.data, v.data
    y = np.einsum("nmk,nk->nm", Md, vd)
    return _emit(y, (M, v), lambda g: (g[:, :, None] * vd[:, None, :], np.einsum("nmk,nm->nk", Md, g)))


# ---------------------------------------------------------------- convolution

def conv_output_size(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def conv_transpose_output_size(n, k, stride, padding, output_padding=0):
    return (n - 1) * stride - 2 * padding + k + output_padding


def _pad_hw(x, padding):
    """Zero-pad the two spatial axes of a CHWN array."""
    if not padding:
        return x
    c, h, w, n = x.shape
    out = np.zeros((c, h + 2 * padding, w + 2 * padding, n), dtype=x.dtype)
    out[:, padding:padding + h, padding:padding + w] = x
    return out


def _im2col(x, kh, kw, stride, padding):
    """CHWN input -> ``(C*kh*kw, ho*wo*N)`` patch matrix, rows ordered (c, i, j)."""
    x = _pad_hw(x, padding)
    c, h, w, n = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    cols = np.empty((c, kh, kw, ho, wo, n), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = x[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
    return cols.reshape(c * kh * kw, ho * wo * n), ho, wo


def _col2im(cols, c, hp, wp, n, kh, kw, stride, padding, ho, wo):
    """Adjoint of :func:`_im2col`: scatter-add patches into a CHWN array of padded size ``hp x wp``."""
    cols = cols.reshape(c, kh, kw, ho, wo, n)
    out = np.zeros((c, hp, wp, n), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += cols[:, i, j]
    if padding:
        out = out[:, padding:hp - padding, padding:wp - padding]
    return out


def _batchify(x, op, layout):
    if layout not in ("NCHW", "CHWN"):
        raise ConfigError(f"{op}: unknown layout {layout!r}")
    if x.data.ndim == 4:
        return x, False
    if x.data.ndim == 3:
        shape = (1,) + x.shape if layout == "NCHW" else x.shape + (1,)
        return reshape(x, shape), True
    raise DimensionError(f"{op}: expected C x H x W or batched 4D input, got {x.shape}")


def _unbatch(out, squeeze, layout):
    if not squeeze:
        return out
    return reshape(out, out.shape[1:] if layout == "NCHW" else out.shape[:-1])


def _to_chwn(d, layout):
    return d if layout == "CHWN" else np.ascontiguousarray(d.transpose(1, 2, 3, 0))


def _from_chwn(d, layout):
    return d if layout == "CHWN" else np.ascontiguousarray(d.transpose(3, 0, 1, 2))


def _chwn_shape(x, layout):
    """``(C, H, W, N)`` extents of a batched tensor in either layout."""
    if layout == "CHWN":
        return x.shape
    n, c, h, w = x.shape
    return c, h, w, n


def conv2d(x, W, b=None, stride=1, padding=0, layout="NCHW"):
    """Cross-correlation with zero padding. ``W`` has shape ``(C_out, C_in, k, k)``.

    ``layout`` is ``"NCHW"`` (default) or ``"CHWN"``; the latter keeps the
    batch axis innermost so every patch copy is a long contiguous run.
    """
    x, squeeze = _batchify(x, "conv2d", layout)
    cin, h, w, n = _chwn_shape(x, layout)
    cout, wcin, kh, kw = W.shape
    if wcin != cin:
        raise DimensionError(f"conv2d: input {x.shape} has {cin} channels, kernel {W.shape} expects {wcin}")
    ho, wo = conv_output_size(h, kh, stride, padding), conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ConfigError(f"conv2d: output extent {ho}x{wo} < 1 for input {h}x{w}, kernel {kh}, stride {stride}, padding {padding}")
    cols, _, _ = _im2col(_to_chwn(x.data, layout), kh, kw, stride, padding)
    Wm = W.data.reshape(cout, -1)
    y = (Wm @ cols).reshape(cout, ho, wo, n)
    if b is not None:
        y += b.data[:, None, None, None]
    inputs = (x, W) if b is None else (x, W, b)
    hp, wp = h + 2 * padding, w + 2 * padding

    def fn(g):
        gm = _to_chwn(g, layout).reshape(cout, -1)
        gW = (gm @ cols.T).reshape(W.shape)
        gx = _from_chwn(_col2im(Wm.T @ gm, cin, hp, wp, n, kh, kw, stride, padding, ho, wo), layout)
        if b is None:
            return gx, gW
        return gx, gW, gm.sum(axis=1)

    return _unbatch(_emit(_from_chwn(y, layout), inputs, fn), squeeze, layout)


def conv_transpose2d(x, W, b=None, stride=1, padding=0, output_padding=0, layout="NCHW"):
    """Adjoint of :func:`conv2d`. ``W`` has shape ``(C_in, C_out, k, k)``."""
    x, squeeze = _batchify(x, "conv_transpose2d", layout)
    cin, h, w, n = _chwn_shape(x, layout)
    wcin, cout, kh, kw = W.shape
    if wcin != cin:
        raise DimensionError(f"conv_transpose2d: input {x.shape} has {cin} channels, kernel {W.shape} expects {wcin}")
    if output_padding >= stride and output_padding:
        raise ConfigError("conv_transpose2d: output_padding must be smaller than stride")
    ho = conv_transpose_output_size(h, kh, stride, padding, output_padding)
    wo = conv_transpose_output_size(w, kw, stride, padding, output_padding)
    if ho < 1 or wo < 1:
        raise ConfigError(f"conv_transpose2d: output extent {ho}x{wo} < 1")
    xm = _to_chwn(x.data, layout).reshape(cin, -1)
    Wm = W.data.reshape(cin, -1)
    y = _col2im(Wm.T @ xm, cout, ho + 2 * padding, wo + 2 * padding, n, kh, kw, stride, padding, h, w)
    if b is not None:
        y += b.data[:, None, None, None]
    inputs = (x, W) if b is None else (x, W, b)

    def fn(g):
        gc = _to_chwn(g, layout)
        gcols, _, _ = _im2col(gc, kh, kw, stride, padding)
        gx = _from_chwn((Wm @ gcols).reshape(cin, h, w, n), layout)
        gW = (xm @ gcols.T).reshape(W.shape)
        if b is None:
            return gx, gW
        return gx, gW, gc.sum(axis=(1, 2, 3))

    return _unbatch(_emit(_from_chwn(np.ascontiguousarray(y), layout), inputs, fn), squeeze, layout)


def residual_block(x, W1, b1, W2, b2, transpose=False, layout="NCHW"):
    """``x + F(x)`` with ``F`` two 3x3 stride-1 padding-1 layers and an activation between."""
    layer = conv_transpose2d if transpose else conv2d
    cin = x.shape[0] if layout == "CHWN" else x.shape[-3]
    for W in (W1, W2):
        if W.shape[0] != cin or W.shape[1] != cin:
            raise DimensionError(f"residual_block: kernel {W.shape} does not preserve {cin} channels")
    h = activation(layer(x, W1, b1, stride=1, padding=1, layout=layout))
    return add(x, layer(h, W2, b2, stride=1, padding=1, layout=layout))
