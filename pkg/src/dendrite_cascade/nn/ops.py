"""Differentiable layer operations on NCHW float64 tensors.

Every op computes its forward with numpy and, when a tape is active and an
input requires grad, records a closure that maps the output gradient to
input gradients.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigurationError
from .tensor import Tensor, as_tensor, record

L2_ZERO_GUARD = 1e-12


def _check_rank4(x, what):
    if x.ndim != 4:
        raise ConfigurationError(f"{what} must be N x C x H x W, got shape {x.shape}")


def conv2d(x, weight, bias=None, stride=1, padding="same"):
    """2-D cross-correlation, ``weight`` shaped (c_out, c_in, k, k) with k odd."""
    x, weight = as_tensor(x), as_tensor(weight)
    _check_rank4(x, "conv2d input")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3] or weight.shape[2] % 2 == 0:
        raise ConfigurationError(f"conv2d weight must be (c_out, c_in, k, k) with odd k, got {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ConfigurationError(
            f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    if stride not in (1, 2):
        raise ConfigurationError(f"stride must be 1 or 2, got {stride}")
    if padding not in ("same", "valid"):
        raise ConfigurationError(f"padding must be 'same' or 'valid', got {padding!r}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ConfigurationError(f"conv2d bias shape {bias.shape} does not match weight {weight.shape}")

    n, c, h, w = x.shape
    c_out, _, k, _ = weight.shape
    p = k // 2 if padding == "same" else 0
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    ho = (h + 2 * p - k) // stride + 1
    wo = (w + 2 * p - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ConfigurationError(f"conv2d input {x.shape} too small for kernel {weight.shape}")
    wm = weight.data.reshape(c_out, -1)

    if k == 1:
        cols = xp[:, :, ::stride, ::stride].transpose(0, 2, 3, 1).reshape(-1, c)
    else:
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    out = (cols @ wm.T).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        dw = (gm.T @ cols).reshape(weight.shape)
        db = g.sum(axis=(0, 2, 3)) if bias is not None else None
        dx = None
        if x.requires_grad:
            dcols = gm @ wm
            if k == 1:
                dxp = np.zeros_like(xp)
                dxp[:, :, ::stride, ::stride] = dcols.reshape(n, ho, wo, c).transpose(0, 3, 1, 2)
            else:
                dcols = dcols.reshape(n, ho, wo, c, k, k)
                dxp = np.zeros_like(xp)
                for a in range(k):
                    for b in range(k):
                        dxp[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride] += \
                            dcols[..., a, b].transpose(0, 3, 1, 2)
            dx = dxp[:, :, p:p + h, p:p + w] if p else dxp
        return dx, dw, db

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv2d", inputs, out, backward)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return record("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def max_pool_2x2(x):
    """Disjoint 2x2 max pooling; ties route the gradient to the first row-major index."""
    x = as_tensor(x)
    _check_rank4(x, "max_pool_2x2 input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigurationError(f"max_pool_2x2 needs even spatial dims, got {x.shape}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        onehot = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(onehot, idx[..., None], g[..., None], axis=-1)
        dx = onehot.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (dx,)

    return record("max_pool_2x2", (x,), out, backward)


def upsample_2x_nearest(x):
    x = as_tensor(x)
    _check_rank4(x, "upsample input")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return record("upsample_2x_nearest", (x,), out, backward)


def group_norm(x, groups, gamma, beta, eps=1e-5):
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _check_rank4(x, "group_norm input")
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ConfigurationError(f"group_norm: {c} channels not divisible by {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ConfigurationError(f"group_norm: gamma/beta must have shape ({c},)")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    centered = xg - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    xhat4 = xhat.reshape(n, c, h, w)
    out = xhat4 * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        dgamma = (g * xhat4).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = (g * gamma.data[None, :, None, None]).reshape(n, groups, -1)
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx.reshape(n, c, h, w), dgamma, dbeta

    return record("group_norm", (x, gamma, beta), out, backward)


def concat_channels(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_rank4(a, "concat input")
    _check_rank4(b, "concat input")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ConfigurationError(f"concat_channels: mismatched shapes {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return record("concat_channels", (a, b), out, lambda g: (g[:, :ca], g[:, ca:]))


def residual_add(x, fx):
    """Return ``fx + x``: the block output when the layers fit the residual."""
    x, fx = as_tensor(x), as_tensor(fx)
    if x.shape != fx.shape:
        raise ConfigurationError(f"residual_add: shape mismatch {x.shape} vs {fx.shape}")
    return record("residual_add", (x, fx), x.data + fx.data, lambda g: (g, g))


def dense(x, weight, bias=None):
    """Affine map of the flattened per-sample input: (N, F) -> (N, out)."""
    x, weight = as_tensor(x), as_tensor(weight)
    n = x.shape[0] if x.ndim > 1 else 1
    xf = x.data.reshape(n, -1)
    if weight.ndim != 2 or weight.shape[1] != xf.shape[1]:
        raise ConfigurationError(
            f"dense: weight {weight.shape} incompatible with flattened input of length {xf.shape[1]}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ConfigurationError(f"dense: bias shape {bias.shape} does not match weight {weight.shape}")
    out = xf @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        dx = (g @ weight.data).reshape(x.shape)
        dw = g.T @ xf
        db = g.sum(axis=0) if bias is not None else None
        return dx, dw, db

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("dense", inputs, out, backward)


def l2_loss(pred, target, lam=1.0):
    """``lam * ||pred - target||_2`` (the norm, not its square)."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ConfigurationError(f"l2_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    norm = float(np.sqrt(np.sum(diff * diff)))

    def backward(g):
        if norm < L2_ZERO_GUARD:
            zero = np.zeros_like(diff)
            return zero, zero
        d = g * lam * diff / norm
        return d, -d

    return record("l2_loss", (pred, target), np.array(lam * norm), backward)


def bce_loss(logit, label):
    """Mean sigmoid cross-entropy of ``logit`` against 0/1 ``label``.

    Uses ``max(z, 0) - z*y + log1p(exp(-|z|))`` so large logits cannot
    overflow.
    """
    logit = as_tensor(logit)
    y = np.broadcast_to(np.asarray(label, dtype=np.float64), logit.shape)
    z = logit.data
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    count = max(z.size, 1)

    def backward(g):
        return (g * (sigmoid(z) - y) / count,)

    return record("bce_loss", (logit,), np.array(per.sum() / count), backward)


def weighted_sum(x, weights=None):
    """Scalar ``sum(x * weights)``; used to reduce tensors for gradient checks."""
    x = as_tensor(x)
    w = np.ones_like(x.data) if weights is None else np.broadcast_to(np.asarray(weights, dtype=np.float64), x.shape)
    return record("weighted_sum", (x,), np.array(np.sum(x.data * w)), lambda g: (g * w,))


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out
