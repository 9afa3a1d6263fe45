"""Differentiable operators used by the classifier.

Every function takes and returns :class:`Tensor` objects. Leading batch
dimensions are allowed everywhere and broadcast with numpy rules, which is
how per-antenna-pair weights are applied to a stacked ``[P, ...]`` batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import NonFiniteError, Tensor, add, as_tensor, make, matmul, mul, unbroadcast

__all__ = [
    "add",
    "mul",
    "matmul",
    "reshape",
    "transpose",
    "swapaxes",
    "concat",
    "mean",
    "relu",
    "sigmoid",
    "tanh",
    "softmax",
    "dense",
    "conv1d",
    "maxpool1d",
    "BatchNormState",
    "batchnorm",
    "global_average_pool",
    "gru",
    "self_attention_residual",
    "AttentionOutput",
    "softmax_cross_entropy",
]


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return make(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make(np.concatenate([x.data for x in xs], axis=axis), xs, backward)


def mean(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return make(x.data.mean(axis=axis), (x,), backward)


# ---------------------------------------------------------------------------
# elementwise


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make(x.data * mask, (x,), lambda g: (g * mask,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # split form avoids overflow in exp for large |v|
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return make(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make(y, (x,), lambda g: (g * (1.0 - y * y),))


def _softmax(v: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    y = _softmax(x.data, axis)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make(y, (x,), backward)


# ---------------------------------------------------------------------------
# layers


def dense(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ W + b`` over the last axis of ``x``."""
    if x.shape[-1] != W.shape[-2]:
        raise ValueError(f"dense: input shape {x.shape} incompatible with weight shape {W.shape}")
    if x.ndim == 1:
        y = reshape(matmul(reshape(x, (1, -1)), W), (W.shape[-1],))
        return y if b is None else add(y, b)
    y = matmul(x, W)
    return y if b is None else add(y, b)


def conv1d(
    x: Tensor,
    kernels: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int | str = 0,
) -> Tensor:
    """Cross-correlation of ``x [..., C_in, L]`` with ``kernels [..., C_out, C_in, k]``.

    ``padding="same"`` pads ``(k - 1) // 2`` zeros on each side and needs an
    odd ``k``. Output length is ``(L + 2*pad - k) // stride + 1``.
    """
    xd, wd = x.data, kernels.data
    c_out, c_in, k = wd.shape[-3:]
    if xd.shape[-2] != c_in:
        raise ValueError(f"conv1d: input shape {xd.shape} has {xd.shape[-2]} channels, kernels {wd.shape} expect {c_in}")
    if padding == "same":
        if k % 2 == 0:
            raise ValueError(f"conv1d: same padding needs an odd kernel, got k={k}")
        padding = (k - 1) // 2
    length = xd.shape[-1]
    if k > length + 2 * padding:
        raise ValueError(f"conv1d: kernel size {k} exceeds padded length {length + 2 * padding}")
    pad_width = [(0, 0)] * (xd.ndim - 1) + [(padding, padding)]
    xp = np.pad(xd, pad_width) if padding else xd
    cols = sliding_window_view(xp, k, axis=-1)[..., ::stride, :]  # [..., C_in, L_out, k]
    l_out = cols.shape[-2]
    cols = np.swapaxes(cols, -3, -2).reshape(cols.shape[:-3] + (l_out, c_in * k))
    wmat = np.swapaxes(wd.reshape(wd.shape[:-3] + (c_out, c_in * k)), -1, -2)
    out = np.swapaxes(cols @ wmat, -1, -2)  # [..., C_out, L_out]
    if bias is not None:
        out = out + bias.data[..., :, None]

    def backward(g):
        gy = np.swapaxes(g, -1, -2)  # [..., L_out, C_out]
        gcols = (gy @ np.swapaxes(wmat, -1, -2)).reshape(gy.shape[:-2] + (l_out, c_in, k))
        gw = np.swapaxes(np.swapaxes(cols, -1, -2) @ gy, -1, -2)  # [..., C_out, C_in*k]
        gw = unbroadcast(gw, wd.shape[:-3] + (c_out, c_in * k)).reshape(wd.shape)
        gxp = np.zeros(gcols.shape[:-3] + (c_in, xp.shape[-1]), dtype=g.dtype)
        span = stride * (l_out - 1) + 1
        for j in range(k):
            gxp[..., :, j : j + span : stride] += np.swapaxes(gcols[..., j], -1, -2)
        gx = gxp[..., padding : padding + length] if padding else gxp
        gx = unbroadcast(gx, xd.shape)
        grads = [gx, gw]
        if bias is not None:
            grads.append(unbroadcast(g.sum(axis=-1), bias.shape))
        return tuple(grads)

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return make(out, parents, backward)


def maxpool1d(x: Tensor, size: int = 3, stride: Optional[int] = None) -> Tensor:
    """Max over non-overlapping windows along the last axis; the remainder is dropped."""
    stride = size if stride is None else stride
    if stride != size:
        raise NotImplementedError("only stride == size is supported")
    xd = x.data
    l_out = xd.shape[-1] // size
    if l_out < 1:
        raise ValueError(f"maxpool1d: length {xd.shape[-1]} shorter than window {size}")
    blocks = xd[..., : l_out * size].reshape(xd.shape[:-1] + (l_out, size))
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros(xd.shape, dtype=g.dtype)
        gx[..., : l_out * size] = gb.reshape(xd.shape[:-1] + (l_out * size,))
        return (gx,)

    return make(out, (x,), backward)


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray
    updates: int = 0
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, shape: Sequence[int], dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(shape, dtype=dtype), np.ones(shape, dtype=dtype))


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    axes: Sequence[int],
    training: bool,
) -> Tensor:
    """Batch normalization with statistics over ``axes`` (kept as size-1 dims).

    ``gamma``, ``beta`` and the running statistics share the reduced shape.
    In training mode the running statistics are updated in place.
    """
    axes = tuple(a % x.ndim for a in axes)
    xd = x.data
    if training:
        mu = xd.mean(axis=axes, keepdims=True)
        var = xd.var(axis=axes, keepdims=True)
        n = int(np.prod([xd.shape[a] for a in axes]))
        m = state.momentum
        unbiased = var * (n / max(n - 1, 1))
        state.mean = ((1 - m) * state.mean + m * mu).astype(state.mean.dtype)
        state.var = ((1 - m) * state.var + m * unbiased).astype(state.var.dtype)
        state.updates += 1
    else:
        if state.updates == 0:
            raise RuntimeError("uninitialized running stats: run at least one training batch first")
        mu, var = state.mean.astype(xd.dtype), state.var.astype(xd.dtype)
        n = None
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (xd - mu) * inv_std
    out = gamma.data * xhat + beta.data

    def backward(g):
        ggamma = unbroadcast((g * xhat).sum(axis=axes, keepdims=True), gamma.shape)
        gbeta = unbroadcast(g.sum(axis=axes, keepdims=True), beta.shape)
        gxhat = g * gamma.data
        if training:
            gx = inv_std / n * (
                n * gxhat
                - gxhat.sum(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = gxhat * inv_std
        return unbroadcast(gx, xd.shape), ggamma, gbeta

    return make(out, (x, gamma, beta), backward)


def global_average_pool(E: Tensor) -> Tensor:
    """Per-channel mean over the last axis: ``[..., N, L] -> [..., N]``."""
    if E.shape[-1] < 1:
        raise ValueError("global_average_pool needs L >= 1")
    return mean(E, axis=-1)


# ---------------------------------------------------------------------------
# recurrent


def gru(
    x: Tensor,
    W: Tensor,
    U: Tensor,
    b: Tensor,
    h0: Optional[Tensor] = None,
) -> Tensor:
    """Gated recurrent unit over ``x [..., T, N, in]`` (time-major, N rows per step).

    Gate blocks are stacked in the last axis of ``W [..., in, 3H]``,
    ``U [..., H, 3H]`` and ``b [..., 3H]`` in the order update, reset,
    candidate. The reset gate multiplies the previous state before the
    candidate projection. Returns every hidden state, ``[..., T, N, H]``.
    A 2-D ``x [T, in]`` is treated as a single row per step.
    """
    squeeze = x.ndim == 2
    xd = x.data[:, None, :] if squeeze else x.data
    Wd, Ud, bd = W.data, U.data, b.data
    H = Ud.shape[-2]
    if Wd.shape[-1] != 3 * H or Ud.shape[-1] != 3 * H or bd.shape[-1] != 3 * H:
        raise ValueError(f"gru: inconsistent gate shapes W{Wd.shape} U{Ud.shape} b{bd.shape}")
    if xd.shape[-1] != Wd.shape[-2]:
        raise ValueError(f"gru: input shape {x.shape} incompatible with W {Wd.shape}")
    T, N = xd.shape[-3], xd.shape[-2]
    if T < 1:
        raise ValueError("gru needs at least one time step")
    lead = np.broadcast_shapes(xd.shape[:-3], Wd.shape[:-2], Ud.shape[:-2], bd.shape[:-1])

    # input projections for all steps at once: [..., T*N, 3H]
    xflat = xd.reshape(xd.shape[:-3] + (T * N, xd.shape[-1]))
    xw = (xflat @ Wd + bd[..., None, :]).reshape(lead + (T, N, 3 * H))
    U_zr, U_n = Ud[..., : 2 * H], Ud[..., 2 * H :]

    if h0 is None:
        h = np.zeros(lead + (N, H), dtype=xd.dtype)
    else:
        h = np.broadcast_to(h0.data, lead + (N, H)).astype(xd.dtype)
    hs = np.empty(lead + (T, N, H), dtype=xd.dtype)
    cache = []
    for t in range(T):
        a = xw[..., t, :, :]
        zr = _sigmoid(a[..., : 2 * H] + h @ U_zr)
        z, r = zr[..., :H], zr[..., H:]
        rh = r * h
        n = np.tanh(a[..., 2 * H :] + rh @ U_n)
        h_new = (1.0 - z) * h + z * n
        if not np.all(np.isfinite(h_new)):
            raise NonFiniteError(f"gru: non-finite hidden state at step {t}")
        cache.append((h, z, r, rh, n))
        h = h_new
        hs[..., t, :, :] = h
    out = hs[..., 0, :] if squeeze else hs

    def backward(g):
        if squeeze:
            g = g[:, None, :]
        g = np.broadcast_to(g, hs.shape)
        dxw = np.empty(lead + (T, N, 3 * H), dtype=g.dtype)
        dU_zr = np.zeros(lead + (H, 2 * H), dtype=g.dtype)
        dU_n = np.zeros(lead + (H, H), dtype=g.dtype)
        dh = np.zeros(lead + (N, H), dtype=g.dtype)
        U_zr_T, U_n_T = np.swapaxes(U_zr, -1, -2), np.swapaxes(U_n, -1, -2)
        for t in range(T - 1, -1, -1):
            h_prev, z, r, rh, n = cache[t]
            gh = g[..., t, :, :] + dh
            da_n = gh * z * (1.0 - n * n)
            da_z = gh * (n - h_prev) * z * (1.0 - z)
            drh = da_n @ U_n_T
            da_r = drh * h_prev * r * (1.0 - r)
            da_zr = np.concatenate([da_z, da_r], axis=-1)
            dU_n += np.swapaxes(rh, -1, -2) @ da_n
            dU_zr += np.swapaxes(h_prev, -1, -2) @ da_zr
            dh = gh * (1.0 - z) + drh * r + da_zr @ U_zr_T
            dxw[..., t, :, :] = np.concatenate([da_zr, da_n], axis=-1)
        dflat = dxw.reshape(lead + (T * N, 3 * H))
        gx = (dflat @ np.swapaxes(Wd, -1, -2)).reshape(lead + (T, N, xd.shape[-1]))
        gx = unbroadcast(gx, xd.shape)
        if squeeze:
            gx = gx[:, 0, :]
        xflat_b = np.broadcast_to(xflat, lead + xflat.shape[-2:])
        gW = unbroadcast(np.swapaxes(xflat_b, -1, -2) @ dflat, Wd.shape)
        gU = unbroadcast(np.concatenate([dU_zr, dU_n], axis=-1), Ud.shape)
        gb = unbroadcast(dflat.sum(axis=-2), bd.shape)
        grads = [gx, gW, gU, gb]
        if h0 is not None:
            grads.append(unbroadcast(dh, h0.shape))
        return tuple(grads)

    parents = (x, W, U, b) if h0 is None else (x, W, U, b, h0)
    return make(out, parents, backward)


# ---------------------------------------------------------------------------
# attention


@dataclass
class AttentionOutput:
    latent: Tensor
    weights: Optional[np.ndarray] = field(default=None)


def self_attention_residual(
    R: Tensor,
    Wq: Tensor,
    Wk: Tensor,
    Wv: Tensor,
    WD: Tensor,
    bD: Tensor,
    use_attention: bool = True,
) -> AttentionOutput:
    """``(softmax(Q K^T / sqrt(d_k)) V + R)``, averaged over time, then ``@ WD + bD``.

    ``R`` is ``[..., T, d_model]``. Returns the latent ``[..., d_out]`` and the
    ``[..., T, T]`` attention matrix. With ``use_attention=False`` the
    attention term is dropped and only the time-mean of ``R`` is projected.
    """
    if not use_attention:
        return AttentionOutput(dense(mean(R, axis=-2), WD, bD), None)
    d_k = Wq.shape[-1]
    if Wk.shape[-1] != d_k or Wq.shape[-2] != Wk.shape[-2]:
        raise ValueError(f"d_k mismatch between query {Wq.shape} and key {Wk.shape} projections")
    if Wv.shape[-1] != R.shape[-1]:
        raise ValueError(f"value projection {Wv.shape} must map back to d_model={R.shape[-1]}")
    Q, K, V = matmul(R, Wq), matmul(R, Wk), matmul(R, Wv)
    scores = mul(matmul(Q, swapaxes(K, -1, -2)), 1.0 / math.sqrt(d_k))
    A = softmax(scores, axis=-1)
    mixed = add(matmul(A, V), R)
    return AttentionOutput(dense(mean(mixed, axis=-2), WD, bD), A.data)


# ---------------------------------------------------------------------------
# loss

PROB_FLOOR = 1e-12


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of ``softmax(logits)`` against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ValueError(f"softmax_cross_entropy: logits {z.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= z.shape[1]):
        raise ValueError("label out of range")
    shifted = z - z.max(axis=1, keepdims=True)
    log_p = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = np.maximum(log_p, math.log(PROB_FLOOR))
    rows = np.arange(z.shape[0])
    loss = -log_p[rows, labels].mean()
    probs = np.exp(log_p)

    def backward(g):
        grad = probs.copy()
        grad[rows, labels] -= 1.0
        return (grad * (g / z.shape[0]),)

    return make(np.asarray(loss, dtype=z.dtype), (logits,), backward)
