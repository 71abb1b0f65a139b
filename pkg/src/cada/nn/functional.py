"""Differentiable layers and loss primitives over :class:`Tensor`.

Image tensors are NCHW.  Convolution uses an im2col layout so each forward
and backward pass is one BLAS matmul plus a scatter over kernel offsets.
"""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, default_dtype, make

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LEAKY_SLOPE = 0.2


def _check_4d(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{what} expects a 4-D NCHW tensor, got shape {x.shape}")


# convolution ----------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    _check_4d(x, "conv2d")
    if weight.ndim != 4:
        raise ValueError(f"conv2d kernel must be [Cout,Cin,kh,kw], got {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ValueError(f"conv2d channel mismatch: input has {cin}, kernel expects {wcin}")
    if stride < 1:
        raise ValueError("conv2d stride must be >= 1")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ValueError(f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d bias must have shape ({cout},), got {bias.shape}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    hp, wp = xp.shape[2], xp.shape[3]
    # cols: [kh*kw*Cin, N*Ho*Wo]; each kernel offset is one strided slice
    cols = np.empty((kh, kw, cin, n, ho, wo), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[i, j] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(kh * kw * cin, n * ho * wo)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(cout, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)

    x_needs, w_needs = x.requires_grad, weight.requires_grad

    def backward(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gw = None
        if w_needs:
            gw = (gmat @ cols.T).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
        gb = gmat.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x_needs:
            gcols = (wmat.T @ gmat).reshape(kh, kw, cin, n, ho, wo)
            gxt = np.zeros((cin, n, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[i, j]
            gx = gxt.transpose(1, 0, 2, 3)
            if pad:
                gx = gx[:, :, pad:pad + h, pad:pad + w]
            gx = np.ascontiguousarray(gx)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make(np.ascontiguousarray(out), parents, backward)


# pooling / resampling ----------------------------------------------------------

def pool2d(x: Tensor, k: int, mode: str = "max") -> Tensor:
    _check_4d(x, "pool2d")
    n, c, h, w = x.shape
    if k < 1 or h % k or w % k:
        raise ValueError(f"pool2d: extents {h}x{w} not divisible by k={k}")
    if mode not in ("max", "avg"):
        raise ValueError(f"unknown pool mode {mode!r}")
    ho, wo = h // k, w // k
    blocks = x.data.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)

    if mode == "avg":
        def backward(g):
            gb = np.repeat(np.repeat(g, k, axis=2), k, axis=3)
            return (gb / (k * k),)
        return make(blocks.mean(axis=-1), (x,), backward)

    idx = blocks.argmax(axis=-1)

    def backward(g):
        gblocks = np.zeros((n, c, ho, wo, k * k), dtype=g.dtype)
        np.put_along_axis(gblocks, idx[..., None], g[..., None], axis=-1)
        gx = gblocks.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return make(np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0], (x,), backward)


def upsample2d(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsampling by an integer factor."""
    _check_4d(x, "upsample2d")
    if factor < 1:
        raise ValueError("upsample factor must be >= 1")
    if factor == 1:
        return x
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return make(out, (x,), backward)


def concat(xs: list[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), backward)


# normalisation -----------------------------------------------------------------

def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                 running_var: np.ndarray, mode: str = "train",
                 momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel batch normalisation.

    In ``train`` mode the batch statistics normalise the input and the running
    buffers are updated in place (unbiased variance, PyTorch convention).  In
    ``eval`` mode the running buffers are used and left untouched.
    """
    _check_4d(x, "batch_norm2d")
    n, c, h, w = x.shape
    m = n * h * w
    shape = (1, c, 1, 1)
    if mode == "train":
        if m < 2:
            raise ValueError("batch_norm2d in train mode needs N*H*W >= 2")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * m / (m - 1)
    elif mode == "eval":
        mean, var = running_mean, running_var
    else:
        raise ValueError(f"unknown batch-norm mode {mode!r}")

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(shape)) * inv_std.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)
    train = mode == "train"

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma.data.reshape(shape)
        if train:
            gx = (inv_std.reshape(shape) / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = gxhat * inv_std.reshape(shape)
        return gx, ggamma, gbeta

    return make(out, (x, gamma, beta), backward)


# pointwise -----------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make(x.data * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope).astype(x.data.dtype)
    return make(x.data * scale, (x,), lambda g: (g * scale,))


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return make(s, (x,), lambda g: (g * s * (1.0 - s),))


def pointwise(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown pointwise kind {kind!r}")


def _log_softmax(a: np.ndarray, axis: int) -> np.ndarray:
    shifted = a - a.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    p = np.exp(_log_softmax(x.data, axis))

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return make(p, (x,), backward)


# losses ---------------------------------------------------------------------------

def softmax_ce_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean pixel-wise cross-entropy of ``logits[N,K,H,W]`` against int labels ``[N,H,W]``."""
    _check_4d(logits, "softmax_ce_loss")
    labels = np.asarray(labels)
    n, k, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    logp = _log_softmax(logits.data, axis=1)
    lab = labels.astype(np.intp)[:, None]
    picked = np.take_along_axis(logp, lab, axis=1)
    count = n * h * w
    loss = -picked.sum() / count

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, lab, np.take_along_axis(grad, lab, axis=1) - 1.0, axis=1)
        return (grad * (g / count),)

    return make(np.asarray(loss), (logits,), backward)


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    """(1/M) * sum((a - b)^2) over all M elements."""
    if a.shape != b.shape:
        raise ValueError(f"mse_loss shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    m = diff.size

    def backward(g):
        ga = diff * (2.0 * g / m)
        return ga, -ga

    return make(np.asarray((diff * diff).sum() / m), (a, b), backward)


def bce_logits_loss(logits: Tensor, target: int) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against a constant 0/1 label."""
    if target not in (0, 1):
        raise ValueError("bce target label must be 0 or 1")
    x = logits.data
    # max(x,0) - x*y + log(1 + exp(-|x|))
    per = np.maximum(x, 0) - x * target + np.log1p(np.exp(-np.abs(x)))
    m = x.size

    def backward(g):
        return ((_sigmoid(x) - target) * (g / m),)

    return make(np.asarray(per.sum() / m), (logits,), backward)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=default_dtype()))
