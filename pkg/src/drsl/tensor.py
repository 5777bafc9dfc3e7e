"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Operations record onto the innermost active :class:`Tape` (entered with a
``with`` block) whenever at least one operand requires a gradient. Outside a
tape nothing is recorded, which is how inference and finite differencing run.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    >>> tape.backward(y)
    >>> x.grad
    array([6.])
"""

import threading

import numpy as np

from . import _kernels
from .errors import ContractError, DimensionError, NumericError, ReuseError

_state = threading.local()


def _tape_stack():
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def current_tape():
    """The innermost tape active on this thread, or ``None``."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Record:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered log of the primitive operations applied during one forward pass.

    A tape can be replayed backward exactly once.
    """

    def __init__(self):
        self.records = []
        self._produced = set()
        self.consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def _record(self, out, parents, backward):
        if self.consumed:
            raise ReuseError("cannot record onto a tape that has already been replayed")
        self.records.append(_Record(out, parents, backward))
        self._produced.add(id(out))
        out._tape = self

    def backward(self, output):
        """Populate ``.grad`` on every gradient-requiring tensor reachable from ``output``.

        Leaf gradients accumulate into any existing ``.grad``; intermediate
        gradients are overwritten.
        """
        if self.consumed:
            raise ReuseError("tape has already been consumed by a backward pass")
        if not isinstance(output, Tensor) or output.data.size != 1:
            raise ContractError("backward needs a scalar output tensor")
        self.consumed = True
        if not output.requires_grad:
            return
        seed = np.ones_like(output.data)
        if id(output) not in self._produced:
            _accumulate_leaf(output, seed)
            return

        pending = {id(output): seed}
        for rec in reversed(self.records):
            g = pending.pop(id(rec.out), None)
            if g is None:
                continue
            rec.out.grad = g
            grads = rec.backward(g)
            for parent, pg in zip(rec.parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in self._produced:
                    if key in pending:
                        pending[key] = pending[key] + pg
                    else:
                        pending[key] = pg
                else:
                    _accumulate_leaf(parent, pg)
        # drop saved activations held by closures
        self.records = []


def _accumulate_leaf(t, g):
    g = np.asarray(g, dtype=np.float64).reshape(t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


class Tensor:
    """n-dimensional float64 array with optional gradient tracking."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None

    # -- introspection -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Replay the tape this tensor was produced on."""
        if self._tape is None:
            if self.requires_grad and self.data.size == 1:
                _accumulate_leaf(self, np.ones_like(self.data))
                return
            raise ContractError("tensor was not produced on a tape")
        self._tape.backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self):
        return len(self.data)

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._tape = None
    tape = current_tape()
    out.requires_grad = tape is not None and any(p.requires_grad for p in parents)
    if out.requires_grad:
        tape._record(out, parents, backward)
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward)


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    """Square root; the derivative at exactly 0 is taken as 0 instead of +inf."""
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def backward(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return _make(out, (a,), backward)


def clip_min(a, lo):
    """``max(a, lo)`` elementwise; no gradient flows where the floor binds."""
    a = as_tensor(a)
    mask = a.data >= lo
    return _make(np.where(mask, a.data, lo), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and shape
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    out = np.mean(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), backward)


def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def gather(a, index):
    """Pick ``a[i, index[i]]`` for every row of a 2-D tensor."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if a.ndim != 2 or index.shape != (a.shape[0],):
        raise DimensionError(f"gather needs (B, C) and (B,), got {a.shape} and {index.shape}")
    rows = np.arange(a.shape[0])

    def backward(g):
        out = np.zeros_like(a.data)
        out[rows, index] = g
        return (out,)

    return _make(a.data[rows, index].copy(), (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra / conv
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward)


def conv2d(x, w, b=None, pad=1):
    """Stride-1 2-D cross-correlation with zero padding.

    x: (B, C, H, W), w: (O, C, kh, kw), b: (O,) -> (B, O, H + 2*pad - kh + 1, ...)
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d shapes {x.shape} and {w.shape} do not align")
    B = x.shape[0]
    O, C, kh, kw = w.shape
    Ho = x.shape[2] + 2 * pad - kh + 1
    Wo = x.shape[3] + 2 * pad - kw + 1
    cols = _kernels.im2col(x.data, kh, kw, pad)
    wm = w.data.reshape(O, -1)
    out = cols @ wm.T
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        out += b.data
        parents = (x, w, b)
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gx = _kernels.col2im(gm @ wm, x.shape, kh, kw, pad) if x.requires_grad else None
        gw = (gm.T @ cols).reshape(w.shape) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)

    return _make(out, parents, backward)


def maxpool2d(x):
    """2x2 max pool with stride 2; ties route the gradient to the first slot."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d needs (B, C, H, W), got {x.shape}")
    out, idx = _kernels.maxpool2(x.data)
    return _make(out, (x,), lambda g: (_kernels.maxpool2_backward(g, idx, x.shape),))


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------

def _check_logits(a, axis):
    if a.data.size == 0 or a.shape[axis] == 0:
        raise DimensionError("softmax of an empty vector")
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax input contains NaN or Inf")


def softmax(a, axis=-1):
    """Softmax along ``axis``, stabilised by subtracting the max."""
    a = as_tensor(a)
    _check_logits(a, axis)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (a,), backward)


def log_softmax(a, axis=-1):
    """``z - logsumexp(z)`` along ``axis``."""
    a = as_tensor(a)
    _check_logits(a, axis)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def backward(tape, output):
    tape.backward(output)


def grad(function, point):
    """Analytic gradient of a scalar ``function`` at ``point`` (array or Tensor)."""
    x = Tensor(as_tensor(point).data.copy(), requires_grad=True)
    with Tape() as tape:
        y = function(x)
    if not isinstance(y, Tensor) or y.data.size != 1:
        raise ContractError("function must return a scalar tensor")
    tape.backward(y)
    return np.zeros_like(x.data) if x.grad is None else x.grad


def grad_check(function, point, h=1e-6, coords=None):
    """Max relative error between the tape gradient and central differences.

    ``coords`` optionally restricts the check to a subset of flat indices.
    Relative error per coordinate is ``|a - n| / max(1e-12, |a| + |n|)``.
    """
    if h <= 0:
        raise ContractError("step h must be positive")
    base = as_tensor(point).data.astype(np.float64, copy=True)
    analytic = grad(function, base).reshape(-1)
    flat = base.reshape(-1)
    idx = np.arange(flat.size) if coords is None else np.asarray(coords, dtype=np.int64)
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = _scalar(function(Tensor(base)))
        flat[i] = orig - h
        fm = _scalar(function(Tensor(base)))
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * h)
        err = abs(analytic[i] - numeric) / max(1e-12, abs(analytic[i]) + abs(numeric))
        worst = max(worst, err)
    return worst


def _scalar(y):
    y = as_tensor(y)
    if y.data.size != 1:
        raise ContractError("function must return a scalar tensor")
    return float(y.data.reshape(-1)[0])
