"""Central finite-difference checking of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from emodist.nnstack.value import Value

__all__ = ["finite_diff_check"]


def finite_diff_check(f: Callable[[], Value], params: Sequence[Value],
                      eps: float = 1e-4) -> float:
    """Compare analytic gradients of the scalar `f()` against central
    differences for every coordinate of every parameter in `params`.

    `f` must rebuild its graph from the current `params[i].data` on each
    call. Returns the max relative error, with denominator
    max(|analytic|, |numeric|, 1e-8).

    Raises ValueError if `f` evaluates non-finite anywhere it is probed.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")

    for p in params:
        p.zero_grad()
    root = f()
    if not np.isfinite(root.data).all():
        raise ValueError("function value is not finite at the test point")
    root.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]

    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f().item()
            flat[i] = orig - eps
            lo = f().item()
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise ValueError("function value is not finite at a probe point")
            numeric = (hi - lo) / (2.0 * eps)
            denom = max(abs(gflat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst
