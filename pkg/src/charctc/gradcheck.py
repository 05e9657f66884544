"""Central finite-difference checks for the autograd engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, zero_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)`` elementwise."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(
    fn: Callable[[], float],
    tensor: Tensor,
    h: float = 1e-5,
    indices: Sequence[tuple[int, ...]] | None = None,
) -> np.ndarray:
    """Central differences of ``fn()`` w.r.t. entries of ``tensor`` (in place).

    With ``indices`` only those entries are probed and a 1-D array returned.
    """
    data = tensor.data
    if indices is None:
        indices = list(np.ndindex(data.shape))
        out = np.zeros(data.shape)
        put = lambda k, idx, v: out.__setitem__(idx, v)  # noqa: E731
    else:
        out = np.zeros(len(indices))
        put = lambda k, idx, v: out.__setitem__(k, v)  # noqa: E731
    for k, idx in enumerate(indices):
        old = data[idx]
        data[idx] = old + h
        fp = fn()
        data[idx] = old - h
        fm = fn()
        data[idx] = old
        put(k, idx, (fp - fm) / (2.0 * h))
    return out


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    floor: float = 1e-8,
) -> float:
    """Max relative error between backprop and finite differences over every
    entry of every tensor in ``params``."""
    zero_grad(params)
    grads = backward(loss_fn(), params)
    worst = 0.0
    for p, g in zip(params, grads):
        num = numeric_grad(lambda: loss_fn().item(), p, h)
        worst = max(worst, float(relative_error(g, num, floor).max(initial=0.0)))
    return worst
