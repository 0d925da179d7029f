"""Dense-tensor engine with reverse-mode autodiff.

Small by design: numpy arrays (f32 or f64) wrapped in Tensor, a Tape that
records closures, and the ~20 ops the model actually needs. Broadcasting is
restricted to three sanctioned forms: python scalar with tensor,
trailing-dimension bias add, and leading-dimension per-sample scale
(scale_leading). Everything else must shape-match exactly; mismatches raise
ShapeError instead of silently broadcasting.

Every op checks its output for NaN/+Inf and raises NumericError on the spot,
so a numeric blowup is reported at the op that produced it, not three modules
later. -Inf is legal only as an attention-mask value and only on the way
into softmax_lastdim, which turns it into an exact 0 weight.

Gradients accumulate into Tensor.grad across backward() calls; optimizers
zero them between steps. Tensors are treated as immutable after construction
except for the documented in-place optimizer update on parameter data.
"""

from __future__ import annotations

import math

import numpy as np

from . import kernels
from .rng import RngStream

__all__ = [
    "Tensor",
    "Tape",
    "no_grad",
    "ShapeError",
    "NumericError",
    "FullyMaskedError",
    "backward",
    "zeros",
    "ones",
    "rng_normal",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "scale_leading",
    "reshape",
    "permute",
    "concat",
    "narrow",
    "repeat_interleave",
    "gather_rows",
    "sum_all",
    "mean_all",
    "mean_axis",
    "softmax_lastdim",
    "layer_norm",
    "gelu",
    "tanh",
    "clamp",
    "softplus",
    "stop_gradient",
]

DTYPES = {"f32": np.float32, "f64": np.float64}


class ShapeError(ValueError):
    """Operand shapes or dtypes violate an op contract."""


class NumericError(ArithmeticError):
    """An op produced NaN or Inf."""


class FullyMaskedError(NumericError):
    """A softmax row had every entry masked."""


# ------------------------------------------------------------------- tensors

class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, dtype=None, requires_grad=False):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw arrays, not Tensors")
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dt = data.dtype.type
            else:
                dt = np.float32
        else:
            dt = DTYPES[dtype] if isinstance(dtype, str) else np.dtype(dtype).type
            if dt not in (np.float32, np.float64):
                raise ShapeError(f"unsupported dtype {dtype}")
        arr = np.ascontiguousarray(data, dtype=dt)
        if np.isnan(arr).any():
            raise NumericError("NaN in tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return "f32" if self.data.dtype == np.float32 else "f64"

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on shape {self.data.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def detach(self):
        return stop_gradient(self)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; all routes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


# ---------------------------------------------------------------------- tape

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Records ops for one backward pass. Use as a context manager."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def record(self, out, inputs, back):
        """back(g_out) -> list of grads aligned with inputs (None = no grad)."""
        self.nodes.append((out, inputs, back))


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class no_grad:
    """Suspends tape recording inside the block (ops run untracked)."""

    def __enter__(self):
        self._saved = _TAPE_STACK[:]
        _TAPE_STACK.clear()
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.extend(self._saved)
        return False


def backward(loss, tape, ensure=None):
    """Reverse the tape from scalar loss, accumulating into Tensor.grad.

    ensure: optional iterable of parameters that must come out with a grad
    buffer even when they did not participate (they get zeros).
    """
    if loss.shape != ():
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
    holders: dict[int, Tensor] = {}
    for out, inputs, back in reversed(tape.nodes):
        g_out = grads.pop(id(out), None)
        if g_out is None:
            continue
        for inp, g in zip(inputs, back(g_out)):
            if g is None or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = grads[key] + g if key in grads else g
            holders[key] = inp
    # whatever was never popped belongs to leaves; intermediates were consumed
    # at their own node
    for key, g in grads.items():
        t = holders.get(key)
        if t is not None:
            t.grad = g if t.grad is None else t.grad + g
    if ensure is not None:
        for p in ensure:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)


# ------------------------------------------------------------------- helpers

def _check(arr, op):
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values out of {op}")
    return arr


def _same_dtype(a, b, op):
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


def _result(arr, op, inputs, back, finite=True):
    if finite:
        _check(arr, op)
    rg = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.requires_grad = rg
    out.grad = None
    tape = _active_tape()
    if tape is not None and rg:
        tape.record(out, inputs, back)
    return out


def zeros(shape, dtype="f32", requires_grad=False):
    return Tensor(np.zeros(shape, dtype=DTYPES[dtype]), requires_grad=requires_grad)


def ones(shape, dtype="f32", requires_grad=False):
    return Tensor(np.ones(shape, dtype=DTYPES[dtype]), requires_grad=requires_grad)


def rng_normal(stream: RngStream, shape, dtype="f32", requires_grad=False):
    """Standard normals drawn from a named counter stream."""
    return Tensor(stream.normal(shape, dtype=DTYPES[dtype]), requires_grad=requires_grad)


# ----------------------------------------------------------------------- ops

def matmul(a, b):
    """2D x 2D, batched x batched (equal leading dims), or batched x 2D."""
    _same_dtype(a, b, "matmul")
    an, bn = a.data.ndim, b.data.ndim
    if an < 2 or bn < 2:
        raise ShapeError(f"matmul: rank must be >= 2, got {an} and {bn}")
    if a.shape[-1] != b.shape[-2 if bn > 1 else 0]:
        raise ShapeError(f"matmul: inner dims {a.shape} x {b.shape}")
    if bn == 2:
        shared = an > 2
    elif a.shape[:-2] == b.shape[:-2]:
        shared = False
    else:
        raise ShapeError(f"matmul: batch dims {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        if not b.requires_grad:
            return [ga, None]
        if shared:
            k = a.shape[-1]
            n = g.shape[-1]
            gb = np.matmul(a.data.reshape(-1, k).T, g.reshape(-1, n))
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return [ga, gb]

    return _result(out, "matmul", (a, b), back)


def add(a, b):
    """Same shape, trailing-dims bias (b.shape a suffix of a.shape), or scalar."""
    if not isinstance(b, Tensor):
        s = float(b)
        out = a.data + a.data.dtype.type(s)
        return _result(out, "add", (a,), lambda g: [g])
    _same_dtype(a, b, "add")
    if a.shape == b.shape:
        out = a.data + b.data
        return _result(out, "add", (a, b), lambda g: [g, g])
    nb = b.data.ndim
    if 1 <= nb < a.data.ndim and a.shape[a.data.ndim - nb:] == b.shape:
        out = a.data + b.data

        def back(g):
            gb = g.reshape(-1, *b.shape).sum(axis=0) if b.requires_grad else None
            return [g, gb]

        return _result(out, "add", (a, b), back)
    raise ShapeError(f"add: shapes {a.shape} + {b.shape}")


def sub(a, b):
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _same_dtype(a, b, "sub")
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} - {b.shape}")
    out = a.data - b.data
    return _result(out, "sub", (a, b), lambda g: [g, -g])


def mul(a, b):
    """Elementwise same-shape, or python scalar."""
    if not isinstance(b, Tensor):
        s = a.data.dtype.type(float(b))
        out = a.data * s
        return _result(out, "mul", (a,), lambda g: [g * s])
    _same_dtype(a, b, "mul")
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} * {b.shape}")
    out = a.data * b.data

    def back(g):
        return [
            g * b.data if a.requires_grad else None,
            g * a.data if b.requires_grad else None,
        ]

    return _result(out, "mul", (a, b), back)


def neg(a):
    return _result(-a.data, "neg", (a,), lambda g: [-g])


def scale_leading(a, s):
    """Multiply a by per-sample scalars: s.shape must be a prefix of a.shape."""
    _same_dtype(a, s, "scale_leading")
    k = s.data.ndim
    if a.shape[:k] != s.shape:
        raise ShapeError(f"scale_leading: {s.shape} not a prefix of {a.shape}")
    exp = s.data.reshape(s.shape + (1,) * (a.data.ndim - k))
    out = a.data * exp

    def back(g):
        ga = g * exp if a.requires_grad else None
        gs = None
        if s.requires_grad:
            red = tuple(range(k, a.data.ndim))
            gs = (g * a.data).sum(axis=red) if red else g * a.data
        return [ga, gs]

    return _result(out, "scale_leading", (a, s), back)


def reshape(a, shape):
    shape = tuple(int(d) for d in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise ShapeError(f"reshape: {a.shape} -> {shape}")
    out = np.ascontiguousarray(a.data.reshape(shape))
    src = a.shape
    return _result(out, "reshape", (a,), lambda g: [g.reshape(src)], finite=False)


def permute(a, axes):
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"permute: axes {axes} for rank {a.data.ndim}")
    inv = tuple(int(x) for x in np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return _result(out, "permute", (a,), lambda g: [np.transpose(g, inv)], finite=False)


def concat(parts, axis):
    if not parts:
        raise ShapeError("concat: empty list")
    axis = int(axis)
    for p in parts[1:]:
        _same_dtype(parts[0], p, "concat")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return list(np.split(g, splits, axis=axis))

    return _result(out, "concat", tuple(parts), back, finite=False)


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    axis = int(axis)
    start, length = int(start), int(length)
    if not (0 <= start and start + length <= a.shape[axis]):
        raise ShapeError(f"narrow: [{start}:{start + length}] of dim {a.shape[axis]}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    out = np.ascontiguousarray(a.data[tuple(idx)])

    def back(g):
        full = np.zeros_like(a.data)
        full[tuple(idx)] = g
        return [full]

    return _result(out, "narrow", (a,), back, finite=False)


def repeat_interleave(a, repeats, axis):
    """Repeat each slice along `axis` `repeats` times, in place order."""
    axis = int(axis)
    r = int(repeats)
    out = np.ascontiguousarray(np.repeat(a.data, r, axis=axis))
    src = a.shape

    def back(g):
        folded = g.reshape(src[:axis] + (src[axis], r) + src[axis + 1:])
        return [folded.sum(axis=axis + 1)]

    return _result(out, "repeat_interleave", (a,), back, finite=False)


def gather_rows(table, ids):
    """Embedding lookup: rows of a 2D table by an integer index vector."""
    if table.data.ndim != 2:
        raise ShapeError(f"gather_rows: table must be 2D, got {table.shape}")
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows: ids must be 1D, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError("gather_rows: id out of range")
    out = np.ascontiguousarray(table.data[idx])

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return [gt]

    return _result(out, "gather_rows", (table,), back, finite=False)


def sum_all(a):
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)
    return _result(out, "sum_all", (a,), lambda g: [np.full_like(a.data, g)])


def mean_all(a):
    n = a.data.size
    out = np.asarray(a.data.mean(), dtype=a.data.dtype)
    return _result(out, "mean_all", (a,), lambda g: [np.full_like(a.data, g / n)])


def mean_axis(a, axis):
    axis = int(axis)
    n = a.shape[axis]
    out = np.ascontiguousarray(a.data.mean(axis=axis))

    def back(g):
        return [np.repeat(np.expand_dims(g / n, axis), n, axis=axis)]

    return _result(out, "mean_axis", (a,), back)


def softmax_lastdim(a, mask=None, fully_masked_ok=False):
    """Softmax over the last dim; masked (-inf) entries get weight exactly 0.

    mask: optional numpy array of 0.0 / -inf, broadcastable against a.shape,
    added to the scores before normalizing. The mask is data, never a Tensor,
    and takes no gradient. A row with every entry masked is a contract
    violation unless fully_masked_ok, in which case it yields all zeros and
    the count is exposed as out_fully_masked on the result.
    """
    x = a.data
    if mask is not None:
        m = np.asarray(mask, dtype=x.dtype)
        if np.isnan(m).any() or (m == np.inf).any():
            raise NumericError("mask must contain only finite values and -inf")
        x = x + np.broadcast_to(m, x.shape)
    cols = x.shape[-1]
    flat = np.ascontiguousarray(x.reshape(-1, cols))
    y2, n_bad = kernels.masked_softmax_fwd(flat)
    if n_bad and not fully_masked_ok:
        raise FullyMaskedError(f"{n_bad} fully-masked softmax rows")
    y = y2.reshape(x.shape)
    _check(y, "softmax_lastdim")

    def back(g):
        gs = kernels.softmax_bwd(y2, np.ascontiguousarray(g.reshape(-1, cols)))
        return [gs.reshape(x.shape)]

    out = _result(y, "softmax_lastdim", (a,), back)
    if fully_masked_ok:
        return out, n_bad
    return out


def layer_norm(a, eps=1e-5):
    """Normalize the last dim to zero mean, unit variance. No affine here;
    modulation layers own any scale/shift."""
    cols = a.shape[-1]
    flat = np.ascontiguousarray(a.data.reshape(-1, cols))
    y2, mean, rstd = kernels.layer_norm_fwd(flat, eps)
    y = y2.reshape(a.shape)
    _check(y, "layer_norm")

    def back(g):
        gx = kernels.layer_norm_bwd(flat, mean, rstd, np.ascontiguousarray(g.reshape(-1, cols)))
        return [gx.reshape(a.shape)]

    return _result(y, "layer_norm", (a,), back)


def gelu(a):
    x = np.ascontiguousarray(a.data)
    out = kernels.gelu_fwd(x)

    def back(g):
        return [kernels.gelu_bwd(x, np.ascontiguousarray(g))]

    return _result(out, "gelu", (a,), back)


def tanh(a):
    out = np.tanh(a.data)
    return _result(out, "tanh", (a,), lambda g: [g * (1.0 - out * out)])


def clamp(a, lo=None, hi=None):
    """Clip values; gradient is 1 inside [lo, hi] and 0 outside."""
    if lo is None and hi is None:
        raise ShapeError("clamp: need lo or hi")
    out = np.clip(a.data, lo, hi)
    inside = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return _result(out, "clamp", (a,), lambda g: [np.where(inside, g, 0.0)])


def softplus(a):
    """log(1 + exp(x)), computed in the overflow-safe form."""
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = 1.0 / (1.0 + np.exp(-x))
    return _result(out.astype(x.dtype), "softplus", (a,), lambda g: [g * sig])


def stop_gradient(a):
    """Copy of a that is a leaf: no history, no grad requirement."""
    return Tensor(a.data.copy())
