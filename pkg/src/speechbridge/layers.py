"""Attention primitives and transformer blocks.

Masks are plain boolean numpy arrays [query_len, key_len] with True where
attention is allowed. Fully masked query rows produce zero output vectors
(see ``tensor.softmax``), which is what lets prompt rows carry no speech
contribution.

A module-global counter tracks attention score-matrix entries (Tq * Tk per
attention call, heads folded into the feature dim) for the fusion-cost
benchmark.
"""

import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

# -----------------------------------------------------------------------------
# Score-op instrumentation
# -----------------------------------------------------------------------------

_score_ops = 0


def reset_score_ops():
    global _score_ops
    _score_ops = 0


def score_ops():
    """Attention score entries computed since the last reset."""
    return _score_ops


# -----------------------------------------------------------------------------
# Masks and positional encodings
# -----------------------------------------------------------------------------


def full_mask(tq, tk):
    return np.ones((tq, tk), dtype=bool)


def causal_mask(t):
    return np.tril(np.ones((t, t), dtype=bool))


def window_mask(t, left, right):
    """Band mask: query i may attend keys j with i-left <= j <= i+right."""
    i = np.arange(t)[:, None]
    j = np.arange(t)[None, :]
    return (j >= i - left) & (j <= i + right)


def staircase_mask(allowed_counts, tk):
    """Row i attends keys [0, allowed_counts[i]); counts must be nondecreasing
    for the mask to count as a valid streaming schedule (not enforced here)."""
    counts = np.asarray(allowed_counts, dtype=np.int64)
    return np.arange(tk)[None, :] < counts[:, None]


def positional_encoding(t, d_model, dtype=np.float64):
    """Deterministic sinusoidal table [t, d_model]; row 0 is [0,1,0,1,...]."""
    if t < 1:
        raise ValueError("positional_encoding needs t >= 1")
    pos = np.arange(t, dtype=np.float64)[:, None]
    i = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    freq = np.power(10000.0, -i / d_model)
    table = np.zeros((t, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq[:, : table[:, 1::2].shape[1]])
    return table.astype(dtype)


# -----------------------------------------------------------------------------
# Parameters
# -----------------------------------------------------------------------------


class ParamStore:
    """Flat name -> Tensor registry; init randomness comes from one rng.

    Matrices default to fan-in scaling (N(0, 1/sqrt(fan_in))), which keeps
    activations near unit scale at d_model ~ 64 and desk-scale learning
    rates workable.
    """

    def __init__(self, rng, dtype=np.float64, init_scale=None):
        self.rng = rng
        self.dtype = dtype
        self.init_scale = init_scale
        self.tensors = {}

    def _register(self, name, arr):
        if name in self.tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(arr.astype(self.dtype), requires_grad=True)
        self.tensors[name] = t
        return t

    def normal(self, name, shape, scale=None):
        s = scale if scale is not None else self.init_scale
        if s is None:
            fan_in = shape[0] if len(shape) > 1 else shape[-1]
            s = 1.0 / math.sqrt(fan_in)
        return self._register(name, self.rng.normal(0.0, s, size=shape))

    def zeros(self, name, shape):
        return self._register(name, np.zeros(shape))

    def ones(self, name, shape):
        return self._register(name, np.ones(shape))

    def arrays(self):
        return {k: t.data for k, t in self.tensors.items()}

    def grads(self):
        return {
            k: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for k, t in self.tensors.items()
        }

    def zero_grads(self):
        for t in self.tensors.values():
            t.grad = None

    def load_arrays(self, arrays):
        """Overwrite parameter values in place (shapes must match)."""
        missing = set(self.tensors) - set(arrays)
        extra = set(arrays) - set(self.tensors)
        if missing or extra:
            raise KeyError(f"parameter set mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for k, t in self.tensors.items():
            a = arrays[k]
            if a.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {k!r}: {a.shape} vs {t.data.shape}")
            t.data = a.astype(self.dtype, copy=True)


# -----------------------------------------------------------------------------
# Attention
# -----------------------------------------------------------------------------


def scaled_dot_attention(q, k, v, mask):
    """softmax(q kᵀ / sqrt(d)) v with a boolean allow-mask.

    q: [..., Tq, d], k/v: [..., Tk, d]; mask: [Tq, Tk] (broadcast over any
    leading head axis). Fully masked query rows yield zero vectors.
    """
    global _score_ops
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1]:
        raise T.ShapeError(f"attention shapes disagree: q={q.shape} k={k.shape} v={v.shape}")
    tq, tk = q.shape[-2], k.shape[-2]
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[-2:] != (tq, tk):
        raise T.ShapeError(f"mask shape {mask.shape} does not match [{tq}, {tk}]")
    _score_ops += tq * tk
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = T.mul(T.matmul(q, T.transpose(k, axes=_swap_last(k.ndim))), scale)
    weights = T.softmax(scores, mask=mask)
    return T.matmul(weights, v)


def _swap_last(ndim):
    ax = list(range(ndim))
    ax[-1], ax[-2] = ax[-2], ax[-1]
    return ax


class MultiHeadAttention:
    """Projected multi-head attention; output projection carries no bias so
    that zero attention output means exactly zero contribution."""

    def __init__(self, store, prefix, d_model, n_heads):
        if d_model % n_heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.wq = store.normal(f"{prefix}.wq", (d_model, d_model))
        self.bq = store.zeros(f"{prefix}.bq", (d_model,))
        self.wk = store.normal(f"{prefix}.wk", (d_model, d_model))
        self.bk = store.zeros(f"{prefix}.bk", (d_model,))
        self.wv = store.normal(f"{prefix}.wv", (d_model, d_model))
        self.bv = store.zeros(f"{prefix}.bv", (d_model,))
        self.wo = store.normal(f"{prefix}.wo", (d_model, d_model))

    def _split(self, x, t):
        # [t, d] -> [heads, t, d_head]
        return T.transpose(T.reshape(x, (t, self.n_heads, self.d_head)), (1, 0, 2))

    def __call__(self, x_q, x_kv, mask):
        tq, tk = x_q.shape[0], x_kv.shape[0]
        q = self._split(T.add(T.matmul(x_q, self.wq), self.bq), tq)
        k = self._split(T.add(T.matmul(x_kv, self.wk), self.bk), tk)
        v = self._split(T.add(T.matmul(x_kv, self.wv), self.bv), tk)
        heads = scaled_dot_attention(q, k, v, mask)
        merged = T.reshape(T.transpose(heads, (1, 0, 2)), (tq, self.d_model))
        return T.matmul(merged, self.wo)


class FeedForward:
    """Two-layer GELU MLP; the output projection carries no bias."""

    def __init__(self, store, prefix, d_model, d_ff):
        self.w1 = store.normal(f"{prefix}.w1", (d_model, d_ff))
        self.b1 = store.zeros(f"{prefix}.b1", (d_ff,))
        self.w2 = store.normal(f"{prefix}.w2", (d_ff, d_model))

    def __call__(self, x):
        return T.matmul(T.gelu(T.add(T.matmul(x, self.w1), self.b1)), self.w2)


class LayerNormParams:
    def __init__(self, store, prefix, d_model, eps=1e-5):
        self.gain = store.ones(f"{prefix}.gain", (d_model,))
        self.bias = store.zeros(f"{prefix}.bias", (d_model,))
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias, self.eps)


@dataclass
class TransformerBlockConfig:
    d_model: int
    n_heads: int
    d_ff: int
    dropout_rate: float = 0.0  # 0 in all correctness tests

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")


_dropout_rng = None


@contextmanager
def dropout_active(rng):
    """Enable dropout inside the block forward passes (training only)."""
    global _dropout_rng
    prev = _dropout_rng
    _dropout_rng = rng
    try:
        yield
    finally:
        _dropout_rng = prev


def _maybe_dropout(t, rate):
    if rate <= 0.0 or _dropout_rng is None:
        return t
    keep = (_dropout_rng.random(t.shape) >= rate) / (1.0 - rate)
    return T.mul(t, Tensor(keep.astype(t.dtype)))


class TransformerBlock:
    """Pre-norm residual block: self-attention, optional cross-attention, FFN.

    With zero-initialized output projections the block is the identity map.
    Dropout (on sublayer outputs) only fires inside a ``dropout_active``
    context, so inference and correctness tests see rate 0.
    """

    def __init__(self, store, prefix, d_model, n_heads, d_ff, cross=False, dropout_rate=0.0):
        self.config = TransformerBlockConfig(d_model, n_heads, d_ff, dropout_rate)
        self.ln1 = LayerNormParams(store, f"{prefix}.ln1", d_model)
        self.self_attn = MultiHeadAttention(store, f"{prefix}.self_attn", d_model, n_heads)
        self.cross_attn = None
        if cross:
            self.ln2 = LayerNormParams(store, f"{prefix}.ln2", d_model)
            self.cross_attn = MultiHeadAttention(store, f"{prefix}.cross_attn", d_model, n_heads)
        self.ln3 = LayerNormParams(store, f"{prefix}.ln3", d_model)
        self.ffn = FeedForward(store, f"{prefix}.ffn", d_model, d_ff)

    @classmethod
    def from_config(cls, store, prefix, config, cross=False):
        return cls(
            store, prefix, config.d_model, config.n_heads, config.d_ff,
            cross=cross, dropout_rate=config.dropout_rate,
        )

    def __call__(self, x, self_mask, cross_kv=None, cross_mask=None):
        if cross_mask is not None and cross_kv is None:
            raise ValueError("cross_mask given without cross_kv")
        rate = self.config.dropout_rate
        xn = self.ln1(x)
        h = T.add(x, _maybe_dropout(self.self_attn(xn, xn, self_mask), rate))
        if cross_kv is not None:
            if self.cross_attn is None:
                raise ValueError("block was built without a cross-attention sublayer")
            if cross_mask is None:
                cross_mask = full_mask(h.shape[0], cross_kv.shape[0])
            hn = self.ln2(h)
            h = T.add(h, _maybe_dropout(self.cross_attn(hn, cross_kv, cross_mask), rate))
        return T.add(h, _maybe_dropout(self.ffn(self.ln3(h)), rate))
