"""Central finite-difference gradients for checking :func:`backward`."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numerical_gradient(fn: Callable[[], Tensor], wrt: Tensor, h: float = 1e-5) -> np.ndarray:
    """Estimate d fn() / d wrt by perturbing ``wrt.data`` in place, one entry at a time."""
    grad = np.zeros_like(wrt.data)
    flat = wrt.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn().item()
        flat[i] = orig - h
        down = fn().item()
        flat[i] = orig
        out[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest entrywise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps entries whose true gradient is essentially zero from
    dividing finite-difference noise by nothing.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / scale)) if a.size else 0.0


def check_gradients(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-5,
    floor: float = 1e-6,
) -> dict[int, float]:
    """Compare analytic and finite-difference gradients of a scalar ``fn``.

    Returns the relative error per input position. The inputs' ``grad``
    slots are cleared before and after.
    """
    for t in tensors:
        t.grad = None
    backward(fn())
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    for t in tensors:
        t.grad = None
    return {
        i: relative_error(a, numerical_gradient(fn, t, h), floor)
        for i, (t, a) in enumerate(zip(tensors, analytic))
    }
