"""Differentiable kernels built on :mod:`tadformer.tensor`.

Each kernel computes its forward in numpy and registers a hand-written
backward. Shapes follow the (batch, tokens, channels) convention for token
tensors and (batch, channels, height, width) for grids.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import ConfigError, DataError, DimensionError
from .tensor import Tensor, result, unbroadcast

_SQRT1_2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching rules.

    The common ``(..., m, k) @ (k, n)`` case (tokens times a weight) is
    flattened so the weight gradient is a single GEMM.
    """
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    if bd.ndim == 2:

        def bw(g):
            ga = g @ bd.T if a.requires_grad else None
            gb = None
            if b.requires_grad:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

    else:

        def bw(g):
            ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
            gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
            return ga, gb

    return result(out, (a, b), "matmul", bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight stored as (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else y + bias


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return result(out, (x,), "softmax", bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive", key="eps")
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm affine shape {gamma.shape}/{beta.shape} vs input {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, g.shape[-1])
        ggamma = (flat_g * xhat.reshape(flat_g.shape)).sum(axis=0) if gamma.requires_grad else None
        gbeta = flat_g.sum(axis=0) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return result(out, (x, gamma, beta), "layer_norm", bw)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU; the erf is evaluated in float64."""
    x64 = x.data.astype(np.float64)
    cdf = 0.5 * (1.0 + erf(x64 * _SQRT1_2))
    out = (x64 * cdf).astype(x.dtype)
    deriv = (cdf + x64 * _INV_SQRT_2PI * np.exp(-0.5 * x64 * x64)).astype(x.dtype)
    return result(out, (x,), "gelu", lambda g: (g * deriv,))


def depthwise_conv2d(x: Tensor, filters: Tensor) -> Tensor:
    """Per-sample channel-wise 2-D correlation, stride 1, same padding.

    ``x`` is (B, C, h, w) and ``filters`` is (B, C, k, k): every sample and
    channel is correlated with its own kernel.
    """
    if x.ndim != 4 or filters.ndim != 4:
        raise DimensionError(f"depthwise_conv2d expects 4-d operands, got {x.shape} and {filters.shape}")
    B, C, h, w = x.shape
    k = filters.shape[-1]
    if filters.shape != (B, C, k, k):
        raise DimensionError(f"filters {filters.shape} do not match input {x.shape}")
    if k % 2 == 0:
        raise ConfigError(f"kernel size must be odd, got {k}", key="kernel")
    pad = (k - 1) // 2
    xp = np.zeros((B, C, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    xp[:, :, pad : pad + h, pad : pad + w] = x.data
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))  # (B, C, h, w, k, k)
    fd = filters.data
    out = np.einsum("bchwij,bcij->bchw", windows, fd)

    def bw(g):
        gx = gf = None
        if x.requires_grad:
            # correlation with the flipped kernel scatters g back onto the input
            gp = np.zeros_like(xp)
            gp[:, :, pad : pad + h, pad : pad + w] = g
            gwin = sliding_window_view(gp, (k, k), axis=(2, 3))
            gx = np.einsum("bchwij,bcij->bchw", gwin, fd[:, :, ::-1, ::-1])
        if filters.requires_grad:
            gf = np.einsum("bchwij,bchw->bcij", windows, g)
        return gx, gf

    return result(out, (x, filters), "depthwise_conv2d", bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """(B, C, h, w) -> (B, C) spatial mean."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects (B, C, h, w), got {x.shape}")
    B, C, h, w = x.shape
    n = h * w
    out = x.data.mean(axis=(2, 3))
    return result(out, (x,), "global_avg_pool", lambda g: (np.broadcast_to(g[:, :, None, None] / n, x.shape).copy(),))


# ---------------------------------------------------------------------------
# losses (all return a 0-d tensor)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy over every position; ``logits`` is (..., K)."""
    labels = np.asarray(labels)
    K = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise DimensionError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise DataError(f"label out of range [0, {K})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    flat = logp.reshape(-1, K)
    lab = labels.reshape(-1).astype(np.intp)
    n = lab.size
    loss = -flat[np.arange(n), lab].sum() / n

    def bw(g):
        p = np.exp(flat)
        p[np.arange(n), lab] -= 1.0
        return ((g / n) * p.reshape(logits.shape),)

    return result(np.asarray(loss, dtype=logits.dtype), (logits,), "cross_entropy", bw)


def l1_loss(pred: Tensor, target) -> Tensor:
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise DimensionError(f"target {target.shape} does not match prediction {pred.shape}")
    diff = pred.data - target
    n = diff.size
    loss = np.abs(diff).sum() / n
    return result(np.asarray(loss, dtype=pred.dtype), (pred,), "l1_loss", lambda g: (g * np.sign(diff) / n,))


def balanced_bce(logits: Tensor, target) -> Tensor:
    """Binary cross-entropy with class-balancing weights.

    Positives are weighted by the fraction of negatives in the batch and
    negatives by the fraction of positives.
    """
    target = np.asarray(target)
    if target.shape != logits.shape:
        raise DimensionError(f"target {target.shape} does not match logits {logits.shape}")
    if target.size and not np.all((target == 0) | (target == 1)):
        raise DataError("saliency targets must be 0/1")
    t = target.astype(logits.dtype)
    n = t.size
    beta = 1.0 - t.sum() / n
    x = logits.data
    # log(sigmoid(x)) = -softplus(-x); log(1 - sigmoid(x)) = -softplus(x)
    sp_pos = np.logaddexp(0.0, -x)
    sp_neg = np.logaddexp(0.0, x)
    loss = (beta * t * sp_pos + (1.0 - beta) * (1.0 - t) * sp_neg).sum() / n
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))

    def bw(g):
        return ((g / n) * (-beta * t * (1.0 - sig) + (1.0 - beta) * (1.0 - t) * sig),)

    return result(np.asarray(loss, dtype=logits.dtype), (logits,), "balanced_bce", bw)

