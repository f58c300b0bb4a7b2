"""Central finite-difference gradient checking.

The check is independent of the backward pass it validates: it only calls
the forward function at perturbed points. Relative error uses a unit floor
so near-zero gradients are compared absolutely.
"""

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    max_rel_err: float
    n_checked: int
    tol: float

    @property
    def ok(self):
        return self.max_rel_err < self.tol


def grad_check(f, x, h=1e-5, tol=1e-4, sample=None, rng=None):
    """Compare autodiff gradients of scalar-valued ``f`` at ``x`` with
    central finite differences.

    ``sample`` limits the number of perturbed coordinates (all by default);
    coordinates are drawn without replacement from ``rng`` when sampling.
    ``x`` must be float64 for the differences to be trustworthy.
    """
    if not isinstance(x, Tensor):
        raise TypeError("grad_check expects a Tensor input")
    if x.dtype != np.float64:
        raise ValueError(f"grad_check requires float64 input, got {x.dtype}")
    if not x.requires_grad:
        raise ValueError("input must have requires_grad=True")

    x.zero_grad()
    out = f(x)
    if out.size != 1:
        raise ValueError("f must be scalar-valued")
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    flat = x.data.reshape(-1)
    n = flat.size
    if sample is not None and sample < n:
        if rng is None:
            rng = np.random.default_rng(0)
        idxs = rng.choice(n, size=sample, replace=False)
    else:
        idxs = np.arange(n)

    ana_flat = analytic.reshape(-1)
    max_rel = 0.0
    with no_grad():
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(x).item()
            flat[i] = orig - h
            fm = f(x).item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            denom = max(1.0, abs(numeric), abs(ana_flat[i]))
            max_rel = max(max_rel, abs(numeric - ana_flat[i]) / denom)
    return GradCheckReport(max_rel_err=max_rel, n_checked=len(idxs), tol=tol)
