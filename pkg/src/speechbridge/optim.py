"""Adam with decoupled weight decay, plus global-norm gradient clipping.

``adam_step`` is a pure function over plain numpy arrays: it never mutates
its inputs and repeated calls with identical inputs are bit-identical.
Gradient clipping lives in the trainer, not here.
"""

import numpy as np

from . import kernels


def init_adam_state(params):
    """Fresh optimizer state (zero moments, t=0) for a name->array dict."""
    return {
        "t": 0,
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
    }


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """One Adam update over name->array dicts; returns (new_params, new_state).

    ``state`` may be empty/None, which is treated as zero moments at t=0.
    Raises on non-finite gradients (clip before calling).
    """
    if not state:
        state = init_adam_state(params)
    t = state["t"] + 1
    beta1, beta2 = betas
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        p2, m2, v2 = kernels.adam_update(
            p.reshape(-1),
            np.ascontiguousarray(g, dtype=p.dtype).reshape(-1),
            state["m"][name].reshape(-1),
            state["v"][name].reshape(-1),
            t,
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        )
        new_params[name] = p2.reshape(p.shape)
        new_m[name] = m2.reshape(p.shape)
        new_v[name] = v2.reshape(p.shape)
    return new_params, {"t": t, "m": new_m, "v": new_v}


def clip_global_norm(grads, max_norm):
    """Scale the whole gradient dict so its global L2 norm is <= max_norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm
