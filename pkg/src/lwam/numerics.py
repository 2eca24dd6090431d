"""Dense tensors with reverse-mode automatic differentiation on a single-use tape.

Everything learnable in this package lives in a ``DiffTensor``. Primitive
operations record themselves on the currently active ``Tape`` in execution
order, which is already a topological order, so the backward pass is a plain
reverse sweep. A tape is single-use: after ``Tape.backward`` it is consumed
and rejects a second sweep.

Training runs in float64; float32 is accepted for inference-only graphs
(tensors that do not require grad never touch the tape).
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float64
_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when operand dimensions are incompatible."""


class TapeStateError(RuntimeError):
    """Raised on tape misuse: no active tape, double backward, non-scalar root."""


_ACTIVE_TAPE = None


class Tape:
    """Ordered record of primitive operations for one forward pass.

    Use as a context manager around graph construction::

        with Tape() as tape:
            loss = ...
            tape.backward(loss)
    """

    def __init__(self):
        self._records = []  # (out tensor, backward fn) in execution order
        self._consumed = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise TapeStateError("a Tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self):
        return len(self._records)

    def _push(self, out, backward_fn):
        self._records.append((out, backward_fn))
        return len(self._records) - 1

    def backward(self, root):
        """Accumulate gradients of the scalar ``root`` into all ancestors."""
        if self._consumed:
            raise TapeStateError("tape already consumed; build a fresh graph for a second backward")
        if root.values.size != 1:
            raise TapeStateError(f"backward root must be scalar, got shape {root.shape}")
        if not root.requires_grad:
            raise TapeStateError("backward root does not require grad")
        self._consumed = True
        root.grad = np.ones_like(root.values)
        for out, backward_fn in reversed(self._records):
            if out.grad is None:
                continue  # unreachable from root
            backward_fn(out.grad)


def active_tape():
    return _ACTIVE_TAPE


class DiffTensor:
    """Dense float array plus a lazily allocated gradient buffer."""

    __slots__ = ("values", "grad", "requires_grad", "node_id")

    def __init__(self, values, requires_grad=False, dtype=None):
        arr = np.asarray(values)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.values = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = None  # assigned when an op records this tensor as output

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def size(self):
        return self.values.size

    def item(self):
        return float(self.values.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return DiffTensor(self.values, requires_grad=False)

    def __repr__(self):
        return f"DiffTensor(shape={list(self.shape)}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take_slice(self, key)


def tensor(values, requires_grad=False, dtype=None):
    return DiffTensor(values, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like):
    if isinstance(x, DiffTensor):
        return x
    return DiffTensor(np.asarray(x, dtype=like.dtype))


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _accum(t, g):
    if not t.requires_grad:
        return
    g = _unbroadcast(np.asarray(g), t.values.shape)
    if t.grad is None:
        t.grad = g.astype(t.dtype, copy=True)
    else:
        t.grad += g


def _record(out, backward_fn, *parents):
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        tape = _ACTIVE_TAPE
        if tape is None:
            raise TapeStateError("operation on grad-requiring tensors outside an active Tape")
        out.node_id = tape._push(out, backward_fn)
    return out


def _check_same_dtype(*ts):
    dt = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != dt:
            raise ShapeError(f"mixed dtypes {dt} and {t.dtype} in one op")
    return dt


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a = a if isinstance(a, DiffTensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    _check_same_dtype(a, b)
    out = DiffTensor(a.values + b.values)

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _record(out, backward, a, b)


def neg(a):
    out = DiffTensor(-a.values)

    def backward(g):
        _accum(a, -g)

    return _record(out, backward, a)


def sub(a, b):
    a = a if isinstance(a, DiffTensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    _check_same_dtype(a, b)
    out = DiffTensor(a.values - b.values)

    def backward(g):
        _accum(a, g)
        _accum(b, -g)

    return _record(out, backward, a, b)


def mul(a, b):
    a = a if isinstance(a, DiffTensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    _check_same_dtype(a, b)
    out = DiffTensor(a.values * b.values)

    def backward(g):
        _accum(a, g * b.values)
        _accum(b, g * a.values)

    return _record(out, backward, a, b)


def div(a, b):
    a = a if isinstance(a, DiffTensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    _check_same_dtype(a, b)
    out = DiffTensor(a.values / b.values)

    def backward(g):
        _accum(a, g / b.values)
        _accum(b, -g * a.values / (b.values * b.values))

    return _record(out, backward, a, b)


def relu(a):
    out = DiffTensor(np.maximum(a.values, 0.0))

    def backward(g):
        _accum(a, np.where(a.values > 0.0, g, 0.0))

    return _record(out, backward, a)


def exp(a):
    v = np.exp(a.values)
    out = DiffTensor(v)

    def backward(g):
        _accum(a, g * v)

    return _record(out, backward, a)


def log(a):
    out = DiffTensor(np.log(a.values))

    def backward(g):
        _accum(a, g / a.values)

    return _record(out, backward, a)


def sqrt(a):
    v = np.sqrt(a.values)
    out = DiffTensor(v)

    def backward(g):
        _accum(a, g * (0.5 / v))

    return _record(out, backward, a)


def xlogx(a):
    """x*log(x) with the convention 0*log(0) = 0 (and x<=0 -> 0)."""
    pos = a.values > 0.0
    v = np.where(pos, a.values * np.log(np.where(pos, a.values, 1.0)), 0.0)
    out = DiffTensor(v)

    def backward(g):
        d = np.where(pos, np.log(np.where(pos, a.values, 1.0)) + 1.0, 0.0)
        _accum(a, g * d)

    return _record(out, backward, a)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    out = DiffTensor(a.values.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.values.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg, a.values.shape))

    return _record(out, backward, a)


def mean(a, axis=None, keepdims=False):
    n = a.values.size if axis is None else a.values.shape[axis]
    out = DiffTensor(a.values.mean(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g / n, a.values.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg / n, a.values.shape))

    return _record(out, backward, a)


def reshape(a, shape):
    out = DiffTensor(a.values.reshape(shape))

    def backward(g):
        _accum(a, g.reshape(a.values.shape))

    return _record(out, backward, a)


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = DiffTensor(a.values.transpose(axes))

    def backward(g):
        _accum(a, g.transpose(inv))

    return _record(out, backward, a)


def broadcast_to(a, shape):
    out = DiffTensor(np.broadcast_to(a.values, shape).copy())

    def backward(g):
        _accum(a, g)  # _accum unbroadcasts

    return _record(out, backward, a)


def concatenate(tensors, axis=0):
    _check_same_dtype(*tensors)
    out = DiffTensor(np.concatenate([t.values for t in tensors], axis=axis))
    sizes = [t.values.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _record(out, backward, *tensors)


def take_slice(a, key):
    """Basic slicing (slices / ints); backward scatters into zeros."""
    out = DiffTensor(a.values[key])

    def backward(g):
        ga = np.zeros_like(a.values)
        ga[key] = g
        _accum(a, ga)

    return _record(out, backward, a)


def gather(a, idx, axis):
    """Select rows ``idx`` (1-D int array, no duplicates required) along ``axis``."""
    idx = np.asarray(idx)
    out = DiffTensor(np.take(a.values, idx, axis=axis))

    def backward(g):
        ga = np.zeros_like(a.values)
        sel = [slice(None)] * ga.ndim
        sel[axis] = idx
        np.add.at(ga, tuple(sel), g)
        _accum(a, ga)

    return _record(out, backward, a)


def scatter(a, idx, axis, size):
    """Place slices of ``a`` at positions ``idx`` along ``axis`` of a zero tensor.

    ``idx`` must not contain duplicates.
    """
    idx = np.asarray(idx)
    shape = list(a.values.shape)
    shape[axis] = size
    v = np.zeros(shape, dtype=a.dtype)
    sel = [slice(None)] * len(shape)
    sel[axis] = idx
    v[tuple(sel)] = a.values
    out = DiffTensor(v)

    def backward(g):
        _accum(a, np.take(g, idx, axis=axis))

    return _record(out, backward, a)


def embedding_lookup(table, ids):
    """Rows of ``table`` at integer ``ids``; backward scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    out = DiffTensor(table.values[ids])

    def backward(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, ids, g)
        _accum(table, gt)

    return _record(out, backward, table)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Matrix product; supports 2-D and stacked 3-D operands via numpy rules."""
    if a.values.ndim < 2 or b.values.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.values.shape[-1] != b.values.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    _check_same_dtype(a, b)
    out = DiffTensor(np.matmul(a.values, b.values))

    def backward(g):
        _accum(a, np.matmul(g, np.swapaxes(b.values, -1, -2)))
        _accum(b, np.matmul(np.swapaxes(a.values, -1, -2), g))

    return _record(out, backward, a, b)


def linear(x, w, b=None):
    """x @ w (+ b). Thin composition kept as a named kernel."""
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def l2_norm(a, axis=-1, keepdims=False):
    """Euclidean norm along ``axis``; zero vectors get zero gradient."""
    n = np.sqrt(np.sum(a.values * a.values, axis=axis, keepdims=True))
    out_v = n if keepdims else np.squeeze(n, axis=axis)
    out = DiffTensor(out_v)

    def backward(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        safe = np.where(n > 0.0, n, 1.0)
        _accum(a, np.where(n > 0.0, gg * a.values / safe, 0.0))

    return _record(out, backward, a)


def rms_norm(x, gain, eps=1e-8):
    """Root-mean-square normalization over the last axis with a learned gain."""
    _check_same_dtype(x, gain)
    n = x.values.shape[-1]
    ms = np.mean(x.values * x.values, axis=-1, keepdims=True) + eps
    r = 1.0 / np.sqrt(ms)
    out = DiffTensor(x.values * r * gain.values)

    def backward(g):
        gg = g * gain.values
        dot = np.sum(gg * x.values, axis=-1, keepdims=True)
        _accum(x, gg * r - x.values * (r ** 3) * dot / n)
        _accum(gain, g * x.values * r)

    return _record(out, backward, x, gain)


def masked_softmax(scores, mask):
    """Row softmax over the last axis with hard masking.

    Masked-out positions receive exactly zero probability. ``mask`` is a
    boolean array broadcastable to ``scores``; a row with no allowed entry is
    rejected (it signals a malformed layout).
    """
    m = np.asarray(mask, dtype=bool)
    mb = np.broadcast_to(m, scores.values.shape)
    if not mb.any(axis=-1).all():
        raise ValueError("fully masked row in masked_softmax: every query needs at least one key")
    shifted = np.where(mb, scores.values, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.exp(shifted)  # exactly 0.0 at masked entries
    p = e / e.sum(axis=-1, keepdims=True)
    out = DiffTensor(p)

    def backward(g):
        dot = np.sum(g * p, axis=-1, keepdims=True)
        _accum(scores, p * (g - dot))

    return _record(out, backward, scores)


def eigh_sym(g):
    """Eigendecomposition of a symmetric matrix, eigenvalues descending.

    The input is symmetrized as (G + G^T)/2 before solving and must already be
    symmetric to 1e-9. Backward propagates through eigenvalues only
    (dG = U diag(d_lambda) U^T); the eigenvector output is detached, which is
    sufficient because every loss in this package depends on the spectrum
    alone.
    """
    v = g.values
    if v.ndim != 2 or v.shape[0] != v.shape[1]:
        raise ShapeError(f"eigh_sym needs a square matrix, got {g.shape}")
    asym = np.abs(v - v.T).max() if v.size else 0.0
    if asym > 1e-9 * max(1.0, np.abs(v).max()):
        raise ValueError(f"eigh_sym input asymmetric beyond tolerance: max |G-G^T| = {asym:g}")
    s = (v + v.T) / 2.0
    w, u = np.linalg.eigh(s)
    w = w[::-1].copy()
    u = u[:, ::-1].copy()
    evals = DiffTensor(w)
    evecs = DiffTensor(u)  # detached

    def backward(gw):
        _accum(g, (u * gw) @ u.T)

    _record(evals, backward, g)
    return evals, evecs
