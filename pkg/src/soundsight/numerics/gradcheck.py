from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, no_grad


class NonFiniteLossError(FloatingPointError):
    pass


def _value(f: Callable[[], Tensor]) -> float:
    with no_grad():
        out = float(f().data)
    if not np.isfinite(out):
        raise NonFiniteLossError(f"loss evaluated to {out}")
    return out


def grad_check(f: Callable[[], Tensor], params: list[Tensor], h: float = 1e-5) -> float:
    """Largest relative discrepancy between autodiff and central differences.

    ``f`` takes no arguments and closes over ``params``; each coordinate is
    perturbed in place by ``±h`` and restored.  The error for a coordinate
    is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    for p in params:
        p.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NonFiniteLossError(f"loss evaluated to {loss.data}")
    loss.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        # index in place: reshape(-1) would silently copy a non-contiguous array
        for idx in np.ndindex(p.data.shape):
            original = p.data[idx]
            p.data[idx] = original + h
            up = _value(f)
            p.data[idx] = original - h
            down = _value(f)
            p.data[idx] = original
            numeric = (up - down) / (2.0 * h)
            a = analytic[idx]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
