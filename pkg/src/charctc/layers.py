"""Fused sequence kernels: 1-D convolution, max-pooling, batch norm, LSTM scan.

All kernels take ``[B, T, C]`` arrays (``[T, C]`` is accepted and treated as
a batch of one) and have hand-written backward passes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make_node


def _batched(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 2:
        return x.data[None], True
    if x.ndim == 3:
        return x.data, False
    raise ValueError(f"expected [T, C] or [B, T, C] input, got shape {x.shape}")


def same_padding(T: int, K: int, stride: int) -> tuple[int, int, int]:
    """Output length and (left, right) zero padding for ``same`` convolution."""
    t_out = -(-T // stride)
    total = max((t_out - 1) * stride + K - T, 0)
    return t_out, total // 2, total - total // 2


def conv1d(x, filters, bias=None, stride: int = 1, padding: str = "same") -> Tensor:
    """Convolve across time.

    ``x`` is ``[B, T, Cin]``, ``filters`` is ``[K, Cin, Cout]``.  Output frame
    ``t`` reads input frames ``t*stride + k - left_pad`` for ``k < K``;
    frames outside the input are zero.
    """
    x, w = as_tensor(x), as_tensor(filters)
    b = None if bias is None else as_tensor(bias)
    X, squeeze = _batched(x)
    W = w.data
    if W.ndim != 3:
        raise ValueError(f"filters must be [K, Cin, Cout], got {W.shape}")
    K, cin, cout = W.shape
    B, T, C = X.shape
    if C != cin:
        raise ValueError(f"channel mismatch: input has {C}, filters expect {cin}")
    if stride < 1 or K < 1:
        raise ValueError("stride and filter width must be positive")
    if padding == "same":
        t_out, left, right = same_padding(T, K, stride)
    elif padding == "valid":
        if K > T:
            raise ValueError(f"filter width {K} exceeds input length {T} under valid padding")
        t_out, left, right = (T - K) // stride + 1, 0, 0
    else:
        raise ValueError(f"unknown padding {padding!r}")

    Xp = np.pad(X, ((0, 0), (left, right), (0, 0))) if left or right else X
    win = sliding_window_view(Xp, K, axis=1)[:, ::stride][:, :t_out]  # [B, T', Cin, K]
    out = np.tensordot(win, W, axes=([3, 2], [0, 1]))
    if b is not None:
        out = out + b.data
    Tp = Xp.shape[1]

    def grad_fn(g):
        g3 = g[None] if squeeze else g
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros((B, Tp, C), dtype=g3.dtype)
            stop = stride * (t_out - 1) + 1
            for k in range(K):
                gxp[:, k : k + stop : stride] += g3 @ W[k].T
            gx = gxp[:, left : left + T]
            if squeeze:
                gx = gx[0]
        if w.requires_grad:
            gw = np.tensordot(win, g3, axes=([0, 1], [0, 1])).transpose(1, 0, 2)
        if b is not None and b.requires_grad:
            gb = g3.sum(axis=(0, 1))
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return make_node(out[0] if squeeze else out, parents, grad_fn, "conv1d")


def maxpool1d(x, window: int = 2, stride: int = 2) -> Tensor:
    """Max over time windows; output length ``ceil(T / stride)``.

    Windows running past the end only see the frames that exist.  Gradient
    goes to the first maximal element of each window.
    """
    x = as_tensor(x)
    X, squeeze = _batched(x)
    B, T, C = X.shape
    if T == 0:
        raise ValueError("maxpool1d on empty input")
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be positive")
    t_out = -(-T // stride)
    need = (t_out - 1) * stride + window
    Xp = X
    if need > T:
        Xp = np.concatenate([X, np.full((B, need - T, C), -np.inf, dtype=X.dtype)], axis=1)
    win = sliding_window_view(Xp, window, axis=1)[:, ::stride][:, :t_out]  # [B, T', C, W]
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    src = arg + (np.arange(t_out) * stride)[None, :, None]

    def grad_fn(g):
        g3 = g[None] if squeeze else g
        gx = np.zeros((B, T, C), dtype=g3.dtype)
        bi = np.arange(B)[:, None, None]
        ci = np.arange(C)[None, None, :]
        np.add.at(gx, (bi, src, ci), g3)
        return (gx[0] if squeeze else gx,)

    return make_node(out[0] if squeeze else out, (x,), grad_fn, "maxpool1d")


@dataclass
class BatchNormState:
    """Running per-channel statistics; ``None`` until the first train step."""

    mean: np.ndarray | None = None
    var: np.ndarray | None = None
    momentum: float = 0.9
    eps: float = 1e-5

    def update(self, mean: np.ndarray, var: np.ndarray) -> None:
        if self.mean is None:
            self.mean, self.var = mean.copy(), var.copy()
        else:
            m = self.momentum
            self.mean = m * self.mean + (1.0 - m) * mean
            self.var = m * self.var + (1.0 - m) * var


def batchnorm(x, gamma, beta, state: BatchNormState, mode: str = "train", mask=None) -> Tensor:
    """Per-channel normalisation over every axis but the last.

    In train mode, statistics come from the positions where ``mask`` (shape
    ``x.shape[:-1]``) is nonzero, and ``state`` is updated.  In infer mode only
    the running statistics are used.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    X = x.data
    C = X.shape[-1]
    axes = tuple(range(X.ndim - 1))
    eps = state.eps
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"gamma/beta must have shape ({C},)")

    if mode == "infer":
        if state.mean is None:
            raise RuntimeError("batchnorm in infer mode before any running statistics exist")
        inv = 1.0 / np.sqrt(state.var + eps)
        xhat = (X - state.mean) * inv
        gd = gamma.data

        def grad_infer(g):
            return g * gd * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return make_node(gd * xhat + beta.data, (x, gamma, beta), grad_infer, "batchnorm")
    if mode != "train":
        raise ValueError(f"unknown batchnorm mode {mode!r}")

    m = np.ones(X.shape[:-1], dtype=X.dtype) if mask is None else np.asarray(mask, X.dtype)
    m = m[..., None]
    n = float(m.sum())
    if n < 2:
        raise ValueError("batchnorm in train mode needs at least 2 positions")
    mu = (m * X).sum(axis=axes) / n
    xc = X - mu
    var = (m * xc * xc).sum(axis=axes) / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    state.update(mu, var * n / (n - 1.0))
    gd = gamma.data

    def grad_train(g):
        dxhat = g * gd
        dmu = -inv * dxhat.sum(axis=axes)
        dinv = (dxhat * xc).sum(axis=axes)
        dvar = -0.5 * dinv * inv**3
        dx = dxhat * inv + m * (2.0 * dvar * xc + dmu) / n
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return make_node(gd * xhat + beta.data, (x, gamma, beta), grad_train, "batchnorm")


def _sig(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def lstm_scan(gates_in, w_hh) -> Tensor:
    """Run a unidirectional LSTM over precomputed input projections.

    ``gates_in`` is ``[B, T, 4H]`` (input ``x_t @ W_ih + b``), ``w_hh`` is
    ``[H, 4H]``.  Gate order along the last axis: input, forget, cell, output.
    Initial hidden and cell states are zero.  Returns hidden states
    ``[B, T, H]``.
    """
    gates_in, w_hh = as_tensor(gates_in), as_tensor(w_hh)
    Z, squeeze = _batched(gates_in)
    W = w_hh.data
    B, T, H4 = Z.shape
    H = H4 // 4
    if W.shape != (H, H4):
        raise ValueError(f"recurrent weights must be [{H}, {H4}], got {W.shape}")
    dt = Z.dtype
    hs = np.zeros((B, T + 1, H), dtype=dt)
    cs = np.zeros((B, T + 1, H), dtype=dt)
    acts = np.empty((B, T, H4), dtype=dt)
    tcs = np.empty((B, T, H), dtype=dt)
    for t in range(T):
        z = Z[:, t] + hs[:, t] @ W
        a = acts[:, t]
        a[:, : 2 * H] = _sig(z[:, : 2 * H])
        a[:, 2 * H : 3 * H] = np.tanh(z[:, 2 * H : 3 * H])
        a[:, 3 * H :] = _sig(z[:, 3 * H :])
        i, f, gg, o = a[:, :H], a[:, H : 2 * H], a[:, 2 * H : 3 * H], a[:, 3 * H :]
        cs[:, t + 1] = f * cs[:, t] + i * gg
        tcs[:, t] = np.tanh(cs[:, t + 1])
        hs[:, t + 1] = o * tcs[:, t]
    out = hs[:, 1:].copy()

    def grad_fn(g):
        g3 = g[None] if squeeze else g
        dz_all = np.empty_like(acts)
        dh_next = np.zeros((B, H), dtype=dt)
        dc_next = np.zeros((B, H), dtype=dt)
        for t in reversed(range(T)):
            a = acts[:, t]
            i, f, gg, o = a[:, :H], a[:, H : 2 * H], a[:, 2 * H : 3 * H], a[:, 3 * H :]
            tc = tcs[:, t]
            dh = g3[:, t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz = dz_all[:, t]
            dz[:, :H] = dc * gg * i * (1.0 - i)
            dz[:, H : 2 * H] = dc * cs[:, t] * f * (1.0 - f)
            dz[:, 2 * H : 3 * H] = dc * i * (1.0 - gg * gg)
            dz[:, 3 * H :] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            dh_next = dz @ W.T
        dw = hs[:, :-1].reshape(-1, H).T @ dz_all.reshape(-1, H4)
        return (dz_all[0] if squeeze else dz_all), dw

    return make_node(out[0] if squeeze else out, (gates_in, w_hh), grad_fn, "lstm_scan")


def reverse_padded(x, lengths) -> Tensor:
    """Reverse each sequence of ``[B, T, C]`` within its true length.

    Padding frames stay where they are, so a forward scan over the result
    reads each utterance back-to-front before touching any padding.  The
    mapping is an involution.
    """
    x = as_tensor(x)
    B, T = x.shape[:2]
    lengths = np.asarray(lengths)
    t = np.arange(T)[None, :]
    idx = np.where(t < lengths[:, None], lengths[:, None] - 1 - t, t)
    return x[np.arange(B)[:, None], idx]


def time_mask(lengths, T: int, dtype=np.float64) -> np.ndarray:
    """``[B, T]`` array with ones on real frames and zeros on padding."""
    lengths = np.asarray(lengths)
    return (np.arange(T)[None, :] < lengths[:, None]).astype(dtype)


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


__all__ = [
    "BatchNormState",
    "batchnorm",
    "ceil_div",
    "conv1d",
    "lstm_scan",
    "maxpool1d",
    "reverse_padded",
    "same_padding",
    "time_mask",
]
