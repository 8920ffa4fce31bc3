"""Central finite-difference oracle for checking autodiff gradients.

The numeric side runs every tracked tensor in float64; the analytic side is the
ordinary float32 backward pass. The two share only the forward definition.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numeric_gradients(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], step: float = 1e-3) -> list[np.ndarray]:
    originals = [t.data for t in tensors]
    try:
        for t in tensors:
            t.data = t.data.astype(np.float64)
        grads = []
        for t in tensors:
            g = np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            g_flat = g.reshape(-1)
            for i in range(flat.size):
                saved = flat[i]
                flat[i] = saved + step
                plus = float(loss_fn().data)
                flat[i] = saved - step
                minus = float(loss_fn().data)
                flat[i] = saved
                g_flat[i] = (plus - minus) / (2 * step)
            grads.append(g)
        return grads
    finally:
        for t, original in zip(tensors, originals):
            t.data = original


def analytic_gradients(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor]) -> list[np.ndarray]:
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Norm-wise relative discrepancy ``|a - n| / max(|a|, |n|)``."""
    diff = np.linalg.norm(np.asarray(analytic, np.float64) - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(diff / scale)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    step: float = 1e-3,
    floor: float = 1e-8,
) -> list[float]:
    """Per-tensor relative errors between autodiff and finite differences.

    ``floor`` bounds the denominator, so a gradient that is exactly zero in
    theory (a bias a softmax cannot see) is not judged on float32 round-off.
    """
    analytic = analytic_gradients(loss_fn, tensors)
    numeric = numeric_gradients(loss_fn, tensors, step=step)
    return [relative_error(a, n, floor) for a, n in zip(analytic, numeric)]
