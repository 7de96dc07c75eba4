"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def numerical_grad(fn: Callable[[], Tensor], tensor: Tensor, h: float = 1e-5, indices=None) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. entries of ``tensor``.

    ``tensor.data`` is perturbed in place and restored.  When ``indices`` (flat
    positions) is given only those entries are evaluated; the rest stay NaN.
    """
    flat = tensor.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    positions = range(flat.size) if indices is None else indices
    with no_grad():
        for i in positions:
            orig = flat[i]
            flat[i] = orig + h
            plus = fn().item()
            flat[i] = orig - h
            minus = fn().item()
            flat[i] = orig
            out[i] = (plus - minus) / (2.0 * h)
    return out.reshape(tensor.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps entries whose true gradient is ~0 from dividing
    finite-difference noise by zero.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def check_gradients(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Return the worst relative error between backward and finite differences.

    ``fn`` must rebuild the graph from ``tensors`` on every call.  With
    ``max_entries`` each tensor is spot-checked at that many random positions.
    """
    for t in tensors:
        t.grad = None
    fn().backward()
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        idx = None
        if max_entries is not None and t.size > max_entries:
            rng = rng or np.random.default_rng(0)
            idx = rng.choice(t.size, size=max_entries, replace=False)
        numeric = numerical_grad(fn, t, h=h, indices=idx)
        if idx is not None:
            err = relative_error(analytic.reshape(-1)[idx], numeric.reshape(-1)[idx])
        else:
            err = relative_error(analytic, numeric)
        worst = max(worst, float(err.max()) if err.size else 0.0)
    return worst
