"""Hot numeric kernels: numba-jitted with a pure-numpy fallback.

The backend is chosen once at import time from the environment variable
``SPEECHBRIDGE_KERNELS`` ("numba" or "numpy", default "numba"). When numba
is unavailable the numpy path is used regardless. Both paths compute the
same math; ``kernel_bench`` times them against each other.

All kernels operate on contiguous 2D row blocks (or 1D for the optimizer
update) so the jitted loops stay simple.
"""

import os

import numpy as np

_ENV_VAR = "SPEECHBRIDGE_KERNELS"


# -----------------------------------------------------------------------------
# numpy reference implementations
# -----------------------------------------------------------------------------


def _softmax_rows_np(x, allow):
    """Row softmax with a boolean allow-mask; fully masked rows yield zeros."""
    neg = np.where(allow, x, -np.inf)
    m = np.max(neg, axis=1, keepdims=True)
    # rows with no allowed entry have m == -inf; force their exp argument finite
    safe = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(neg - safe)
    e = np.where(allow, e, 0.0)
    s = np.sum(e, axis=1, keepdims=True)
    out = np.divide(e, s, out=np.zeros_like(e), where=s > 0)
    return out


def _softmax_backward_rows_np(y, dy):
    """dL/dx for y = softmax(x) rowwise; zero rows stay zero."""
    dot = np.sum(y * dy, axis=1, keepdims=True)
    return y * (dy - dot)


def _adam_update_np(p, g, m, v, t, lr, beta1, beta2, eps, weight_decay):
    """One decoupled-weight-decay Adam step on flat float64/float32 arrays.

    Returns new (p, m, v); inputs are not mutated.
    """
    m2 = beta1 * m + (1.0 - beta1) * g
    v2 = beta2 * v + (1.0 - beta2) * (g * g)
    mhat = m2 / (1.0 - beta1**t)
    vhat = v2 / (1.0 - beta2**t)
    p2 = p - lr * (mhat / (np.sqrt(vhat) + eps)) - lr * weight_decay * p
    return p2, m2, v2


def _levenshtein_np(a, b):
    """Edit distance between two int32 token arrays (two-row DP)."""
    n, m = len(a), len(b)
    if n == 0:
        return m
    if m == 0:
        return n
    prev = np.arange(m + 1, dtype=np.int64)
    cur = np.empty(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        cur[0] = i
        sub = prev[:-1] + (b != a[i - 1])
        # cur[j] depends on cur[j-1]: resolve the running minimum in a loop
        for j in range(1, m + 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, sub[j - 1])
        prev, cur = cur, prev
    return int(prev[m])


# -----------------------------------------------------------------------------
# numba implementations
# -----------------------------------------------------------------------------


def _build_numba_kernels():
    from numba import njit

    @njit(cache=True)
    def softmax_rows(x, allow):
        n, k = x.shape
        out = np.zeros_like(x)
        for i in range(n):
            m = -np.inf
            for j in range(k):
                if allow[i, j] and x[i, j] > m:
                    m = x[i, j]
            if m == -np.inf:
                continue
            s = 0.0
            for j in range(k):
                if allow[i, j]:
                    e = np.exp(x[i, j] - m)
                    out[i, j] = e
                    s += e
            inv = 1.0 / s
            for j in range(k):
                out[i, j] *= inv
        return out

    @njit(cache=True)
    def softmax_backward_rows(y, dy):
        n, k = y.shape
        dx = np.empty_like(y)
        for i in range(n):
            dot = 0.0
            for j in range(k):
                dot += y[i, j] * dy[i, j]
            for j in range(k):
                dx[i, j] = y[i, j] * (dy[i, j] - dot)
        return dx

    @njit(cache=True)
    def adam_update(p, g, m, v, t, lr, beta1, beta2, eps, weight_decay):
        n = p.shape[0]
        p2 = np.empty_like(p)
        m2 = np.empty_like(m)
        v2 = np.empty_like(v)
        c1 = 1.0 - beta1**t
        c2 = 1.0 - beta2**t
        for i in range(n):
            m2[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
            v2[i] = beta2 * v[i] + (1.0 - beta2) * (g[i] * g[i])
            mhat = m2[i] / c1
            vhat = v2[i] / c2
            p2[i] = p[i] - lr * (mhat / (np.sqrt(vhat) + eps)) - lr * weight_decay * p[i]
        return p2, m2, v2

    @njit(cache=True)
    def levenshtein(a, b):
        n = a.shape[0]
        m = b.shape[0]
        if n == 0:
            return m
        if m == 0:
            return n
        prev = np.empty(m + 1, dtype=np.int64)
        cur = np.empty(m + 1, dtype=np.int64)
        for j in range(m + 1):
            prev[j] = j
        for i in range(1, n + 1):
            cur[0] = i
            for j in range(1, m + 1):
                cost = 0 if a[i - 1] == b[j - 1] else 1
                best = prev[j] + 1
                if cur[j - 1] + 1 < best:
                    best = cur[j - 1] + 1
                if prev[j - 1] + cost < best:
                    best = prev[j - 1] + cost
                cur[j] = best
            prev, cur = cur, prev
        return prev[m]

    return {
        "softmax_rows": softmax_rows,
        "softmax_backward_rows": softmax_backward_rows,
        "adam_update": adam_update,
        "levenshtein": lambda a, b: int(levenshtein(a, b)),
    }


_NUMPY_KERNELS = {
    "softmax_rows": _softmax_rows_np,
    "softmax_backward_rows": _softmax_backward_rows_np,
    "adam_update": _adam_update_np,
    "levenshtein": _levenshtein_np,
}


def _select_backend():
    want = os.environ.get(_ENV_VAR, "numba").strip().lower()
    if want not in ("numba", "numpy"):
        raise ValueError(f"{_ENV_VAR} must be 'numba' or 'numpy', got {want!r}")
    if want == "numba":
        try:
            return "numba", _build_numba_kernels()
        except ImportError:
            return "numpy", _NUMPY_KERNELS
    return "numpy", _NUMPY_KERNELS


_BACKEND_NAME, _KERNELS = _select_backend()


def active_backend():
    return _BACKEND_NAME


def backends():
    """All importable backends, for tests and the kernel benchmark."""
    out = {"numpy": _NUMPY_KERNELS}
    try:
        out["numba"] = _build_numba_kernels()
    except ImportError:
        pass
    return out


def softmax_rows(x, allow):
    return _KERNELS["softmax_rows"](x, allow)


def softmax_backward_rows(y, dy):
    return _KERNELS["softmax_backward_rows"](y, dy)


def adam_update(p, g, m, v, t, lr, beta1, beta2, eps, weight_decay):
    return _KERNELS["adam_update"](p, g, m, v, t, lr, beta1, beta2, eps, weight_decay)


def levenshtein(a, b):
    a = np.ascontiguousarray(a, dtype=np.int32)
    b = np.ascontiguousarray(b, dtype=np.int32)
    return int(_KERNELS["levenshtein"](a, b))
