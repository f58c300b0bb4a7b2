"""Dense tensors with reverse-mode autodiff (define-by-run tape).

Every operation eagerly computes its numpy result and, when gradients are
enabled and any input requires them, records a backward closure plus parent
links. ``Tensor.backward()`` topologically sorts the recorded tape and
accumulates gradients into every reachable ``requires_grad`` leaf.

float64 is the default dtype and is what all correctness tests use;
float32 is allowed for benchmark workloads.

A compute graph is confined to the thread that built it. Tensors with no
graph attached are plain value holders, safe to share across threads as
long as nobody mutates ``data`` in place.
"""

from contextlib import contextmanager

import numpy as np

from . import kernels

# -----------------------------------------------------------------------------
# Global switches and allocation stats (used by the fusion benchmark)
# -----------------------------------------------------------------------------

_grad_enabled = True
_alloc_bytes = 0


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / benchmarking)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


def reset_alloc_bytes():
    global _alloc_bytes
    _alloc_bytes = 0


def alloc_bytes():
    """Tensor bytes allocated since the last reset (memory high-water proxy)."""
    return _alloc_bytes


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        global _alloc_bytes
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=np.float64)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        _alloc_bytes += data.nbytes

    # --- basic introspection ---

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # --- autodiff machinery ---

    def backward(self):
        """Accumulate gradients of this scalar into all reachable leaves."""
        if self.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
        topo = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    def zero_grad(self):
        self.grad = None

    # --- operator sugar ---

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self.dtype), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _toposort(root):
    order = []
    seen = set()
    stack = [(root, iter(root._parents))]
    seen.add(id(root))
    while stack:
        node, it = stack[-1]
        advanced = False
        for parent in it:
            if id(parent) not in seen:
                seen.add(id(parent))
                stack.append((parent, iter(parent._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def _make(data, parents, backward):
    rg = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=rg)
    if rg:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    """Sum gradient g down to the given operand shape after broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -----------------------------------------------------------------------------
# Elementwise and structural ops
# -----------------------------------------------------------------------------


def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def mul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def matmul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim not in (2, 3) or b.ndim != a.ndim:
        raise ShapeError(f"matmul needs matching 2D or 3D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def backward(g):
        _accum(a, g @ b.data.swapaxes(-1, -2))
        _accum(b, a.data.swapaxes(-1, -2) @ g)

    return _make(data, (a, b), backward)


def transpose(a, axes=None):
    a = _as_tensor(a)
    ax = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(ax))
    data = np.ascontiguousarray(a.data.transpose(ax))

    def backward(g):
        _accum(a, g.transpose(inv))

    return _make(data, (a,), backward)


def reshape(a, shape):
    a = _as_tensor(a)
    data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _make(data, (a,), backward)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _make(data, tuple(tensors), backward)


def take(a, key):
    """Slicing with gradient scatter (basic int/slice indexing only)."""
    a = _as_tensor(a)
    data = np.ascontiguousarray(a.data[key])

    def backward(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[key] += g

    return _make(data, (a,), backward)


def embedding(table, ids):
    """Row gather: table [V, d] indexed by integer ids [T] -> [T, d]."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]}): {ids}")
    data = table.data[ids]

    def backward(g):
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids, g)

    return _make(data, (table,), backward)


def tensor_sum(a):
    a = _as_tensor(a)
    data = np.asarray(a.data.sum(), dtype=a.dtype)

    def backward(g):
        _accum(a, np.broadcast_to(g, a.shape).astype(a.dtype))

    return _make(data, (a,), backward)


def mean(a):
    a = _as_tensor(a)
    return mul(tensor_sum(a), 1.0 / a.size)


def tanh(a):
    a = _as_tensor(a)
    data = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - data * data))

    return _make(data, (a,), backward)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(a):
    """tanh-approximation GELU; smooth, so finite-difference checks behave."""
    a = _as_tensor(a)
    x = a.data
    u = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(u)
    data = 0.5 * x * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        _accum(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du))

    return _make(data, (a,), backward)


# -----------------------------------------------------------------------------
# Normalization, softmax, loss
# -----------------------------------------------------------------------------


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = _as_tensor(x)
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(
            f"layer_norm gain/bias {gain.shape}/{bias.shape} must match last dim of {x.shape}"
        )
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, n).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, n).sum(axis=0))
        dxhat = g * gain.data
        # standard layer-norm backward in terms of xhat
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        _accum(x, dx)

    return _make(data, (x, gain, bias), backward)


def softmax(x, mask=None):
    """Softmax over the last axis with an optional boolean allow-mask.

    Masked entries get zero probability; rows with every entry masked are
    defined to be all-zero (not uniform), so fully masked attention rows
    contribute nothing downstream.
    """
    x = _as_tensor(x)
    shape = x.shape
    rows = x.data.reshape(-1, shape[-1])
    if mask is None:
        allow = np.ones(rows.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != shape:
            try:
                mask = np.broadcast_to(mask, shape)
            except ValueError:
                raise ShapeError(f"softmax mask {mask.shape} does not broadcast to {shape}")
        allow = np.ascontiguousarray(mask.reshape(-1, shape[-1]))
    y = kernels.softmax_rows(np.ascontiguousarray(rows), allow)
    data = y.reshape(shape)

    def backward(g):
        dy = np.ascontiguousarray(g.reshape(-1, shape[-1]))
        dx = kernels.softmax_backward_rows(y, dy)
        _accum(x, dx.reshape(shape))

    return _make(data, (x,), backward)


def cross_entropy(logits, targets, ignore_index=-1):
    """Mean negative log-likelihood of integer targets under row softmax.

    Rows whose target equals ``ignore_index`` contribute nothing; gradient
    is (softmax - one_hot) / n_kept on the remaining rows.
    """
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [T, V] logits, got {logits.shape}")
    t, v = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (t,):
        raise ShapeError(f"targets shape {targets.shape} does not match logits rows {t}")
    keep = targets != ignore_index
    if np.any((targets[keep] < 0) | (targets[keep] >= v)):
        raise IndexError(f"target id out of range [0, {v})")
    n_kept = int(keep.sum())
    if n_kept == 0:
        raise ValueError("cross_entropy: every target is ignored")

    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=1, keepdims=True)
    logp = (z - m) - np.log(s)
    nll = -logp[np.arange(t), targets * keep]  # dummy index 0 on ignored rows
    nll = np.where(keep, nll, 0.0)
    data = np.asarray(nll.sum() / n_kept, dtype=logits.dtype)

    def backward(g):
        grad = e / s
        grad[np.arange(t), targets * keep] -= 1.0
        grad[~keep] = 0.0
        _accum(logits, g * grad / n_kept)

    return _make(data, (logits,), backward)
