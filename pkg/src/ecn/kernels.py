"""Forward and backward kernels for the layer types of the patch network.

All spatial kernels work on batches laid out as (batch, channels, height,
width); a single C×H×W map is promoted to a batch of one and squeezed back.
Backward kernels are pure: they return gradients and never touch buffers.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import ConfigurationError, InputError


def _promote(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise InputError(f"expected a C×H×W map or a batch of them, got shape {x.shape}")
    return x, False


# -- convolution ------------------------------------------------------------

def _im2col(xb: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Columns laid out as (C*kh*kw, B*H'*W')."""
    bsz, c, h, w = xb.shape
    ho, wo = h - kh + 1, w - kw + 1
    cols = np.empty((c, kh, kw, bsz, ho, wo), dtype=xb.dtype)
    xt = xb.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + ho, j:j + wo]
    return cols.reshape(c * kh * kw, bsz * ho * wo)


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, return_cols: bool = False):
    """Valid (pad 0, stride 1) cross-correlation plus per-filter bias.

    With ``return_cols`` the unrolled input is returned too, for reuse by
    :func:`conv2d_backward`.
    """
    xb, squeeze = _promote(x)
    bsz, c, h, wd = xb.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise ConfigurationError(f"input has {c} channels but weights expect {cw}")
    if b.shape != (f,):
        raise ConfigurationError(f"bias shape {b.shape} does not match {f} filters")
    if h < kh or wd < kw:
        raise InputError(f"input {h}×{wd} smaller than kernel {kh}×{kw}")
    ho, wo = h - kh + 1, wd - kw + 1
    cols = _im2col(xb, kh, kw)
    out = (w.reshape(f, -1) @ cols).reshape(f, bsz, ho, wo) + b[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3), dtype=xb.dtype)
    if squeeze:
        out = out[0]
    return (out, cols) if return_cols else out


def conv2d_backward(dout: np.ndarray, x: np.ndarray, w: np.ndarray, cols: np.ndarray | None = None):
    """Return (dx, dw, db) for ``conv2d_forward(x, w, b)``."""
    xb, squeeze = _promote(x)
    db_, _ = _promote(dout)
    bsz, c, h, wd = xb.shape
    f, _, kh, kw = w.shape
    ho, wo = h - kh + 1, wd - kw + 1
    if cols is None:
        cols = _im2col(xb, kh, kw)
    dmat = db_.transpose(1, 0, 2, 3).reshape(f, -1)
    dw = (dmat @ cols.T).reshape(w.shape).astype(w.dtype, copy=False)
    db = dmat.sum(axis=1)
    dcols = (w.reshape(f, -1).T @ dmat).reshape(c, kh, kw, bsz, ho, wo)
    dxt = np.zeros((c, bsz, h, wd), dtype=db_.dtype)
    for i in range(kh):
        for j in range(kw):
            dxt[:, :, i:i + ho, j:j + wo] += dcols[:, i, j]
    dx = np.ascontiguousarray(dxt.transpose(1, 0, 2, 3))
    return (dx[0] if squeeze else dx), dw, db


# -- max pooling ------------------------------------------------------------

def pool_output_size(n: int, kernel: int = 3, stride: int = 2, pad: int = 1) -> int:
    """Ceil-mode output extent; the last window must start inside the image."""
    out = int(math.ceil((n + 2 * pad - kernel) / stride)) + 1
    if pad > 0 and (out - 1) * stride >= n + pad:
        out -= 1
    return out


def maxpool_forward(x: np.ndarray, kernel: int = 3, stride: int = 2, pad: int = 1):
    """Return (out, cache); the cache routes gradients back to the winning cells.

    Padding cells hold -inf so they never win the max. Ties go to the first
    cell in row-major window order.
    """
    xb, squeeze = _promote(x)
    bsz, c, h, wd = xb.shape
    ho = pool_output_size(h, kernel, stride, pad)
    wo = pool_output_size(wd, kernel, stride, pad)
    hp = max((ho - 1) * stride + kernel, h + pad)
    wp = max((wo - 1) * stride + kernel, wd + pad)
    padded = np.full((bsz, c, hp, wp), -np.inf, dtype=xb.dtype)
    padded[:, :, pad:pad + h, pad:pad + wd] = xb
    hs, ws = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    best = padded[:, :, 0:hs:stride, 0:ws:stride].copy()
    arg = np.zeros(best.shape, dtype=np.intp)
    for i in range(kernel):
        for j in range(kernel):
            if i == 0 and j == 0:
                continue
            cand = padded[:, :, i:i + hs:stride, j:j + ws:stride]
            better = cand > best
            np.copyto(best, cand, where=better)
            np.copyto(arg, i * kernel + j, where=better)
    rows = np.arange(ho)[:, None] * stride + arg // kernel
    cols = np.arange(wo)[None, :] * stride + arg % kernel
    plane = np.arange(bsz * c).reshape(bsz, c, 1, 1)
    flat = (plane * hp + rows) * wp + cols
    cache = (flat, xb.shape, hp, wp, pad)
    return (best[0] if squeeze else best), cache


def maxpool_backward(dout: np.ndarray, cache) -> np.ndarray:
    flat, shape, hp, wp, pad = cache
    db_, squeeze = _promote(dout)
    bsz, c, h, wd = shape
    acc = np.bincount(flat.ravel(), weights=db_.ravel(), minlength=bsz * c * hp * wp)
    dx = acc.reshape(bsz, c, hp, wp)[:, :, pad:pad + h, pad:pad + wd]
    dx = np.ascontiguousarray(dx, dtype=db_.dtype)
    return dx[0] if squeeze else dx


# -- local response normalization ------------------------------------------

def _check_lrn(window: int, alpha: float, beta: float, k: float) -> None:
    if window < 1 or window % 2 == 0:
        raise ConfigurationError(f"LRN window must be odd and positive, got {window}")
    if alpha <= 0 or beta <= 0 or k <= 0:
        raise ConfigurationError("LRN alpha, beta and k must be positive")


def _channel_window_sum(a: np.ndarray, window: int) -> np.ndarray:
    half = window // 2
    c = a.shape[1]
    padded = np.pad(a, ((0, 0), (half, half), (0, 0), (0, 0)))
    total = padded[:, 0:c].copy()
    for d in range(1, window):
        total += padded[:, d:d + c]
    return total


def lrn_forward(x: np.ndarray, window: int = 5, alpha: float = 1e-4,
                beta: float = 0.75, k: float = 1.0):
    """Across-channel LRN; returns (out, scale) with scale the per-element denominator base."""
    _check_lrn(window, alpha, beta, k)
    xb, squeeze = _promote(x)
    scale = k + (alpha / window) * _channel_window_sum(xb * xb, window)
    out = xb * scale ** -beta
    return (out[0] if squeeze else out), scale


def lrn_backward(dout: np.ndarray, x: np.ndarray, out: np.ndarray, scale: np.ndarray,
                 window: int = 5, alpha: float = 1e-4, beta: float = 0.75) -> np.ndarray:
    db_, squeeze = _promote(dout)
    xb, _ = _promote(x)
    ob, _ = _promote(out)
    inner = _channel_window_sum(db_ * ob / scale, window)
    dx = db_ * scale ** -beta - (2.0 * alpha * beta / window) * xb * inner
    return dx[0] if squeeze else dx


# -- fully connected, relu, dropout ----------------------------------------

def fc_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``w @ x + b`` for a flat input, or row-wise for a (batch, n) input."""
    n = x.shape[-1]
    if w.shape[1] != n:
        raise ConfigurationError(f"fc expects {w.shape[1]} inputs, got {n}")
    if b.shape != (w.shape[0],):
        raise ConfigurationError(f"bias shape {b.shape} does not match {w.shape[0]} outputs")
    return x @ w.T + b


def fc_backward(dout: np.ndarray, x: np.ndarray, w: np.ndarray):
    """Return (dx, dw, db)."""
    if x.ndim == 1:
        return w.T @ dout, np.outer(dout, x), dout.copy()
    return dout @ w, dout.T @ x, dout.sum(axis=0)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dout * (x > 0)


def dropout_mask(shape, ratio: float, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """Inverted-dropout mask: kept entries hold 1/(1-ratio), dropped ones 0."""
    keep = rng.random(shape) >= ratio
    return keep.astype(dtype) / (1.0 - ratio)


def dropout_forward(x: np.ndarray, ratio: float = 0.5, mode: str = "test",
                    rng: np.random.Generator | None = None, mask: np.ndarray | None = None):
    """Return (out, scaled_mask). Test mode is the identity and returns mask None.

    ``mask`` may be a 0/1 keep pattern supplied by the caller instead of a draw.
    """
    if not 0.0 < ratio < 1.0:
        raise ConfigurationError(f"dropout ratio must lie in (0, 1), got {ratio}")
    if mode == "test":
        return x, None
    if mode != "train":
        raise ConfigurationError(f"unknown mode {mode!r}")
    if mask is None:
        if rng is None:
            raise ConfigurationError("train-mode dropout needs a random generator")
        scaled = dropout_mask(x.shape, ratio, rng, x.dtype)
    else:
        scaled = np.asarray(mask, dtype=x.dtype) / (1.0 - ratio)
    return x * scaled, scaled


def dropout_backward(dout: np.ndarray, scaled_mask: np.ndarray | None) -> np.ndarray:
    return dout if scaled_mask is None else dout * scaled_mask


# -- softmax cross-entropy --------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_xent(logits: np.ndarray, label):
    """Mean cross-entropy and probabilities.

    ``logits`` is (K,) with an int label, or (B, K) with a label array.
    """
    logits = np.asarray(logits)
    k = logits.shape[-1]
    labels = np.atleast_1d(np.asarray(label))
    if labels.size and (labels.max() >= k or labels.min() < 0):
        raise InputError(f"label out of range for {k} classes")
    logp = log_softmax(logits)
    if logits.ndim == 1:
        return float(-logp[int(label)]), np.exp(logp)
    loss = -logp[np.arange(len(labels)), labels].mean()
    return float(loss), np.exp(logp)


def softmax_xent_backward(probs: np.ndarray, label) -> np.ndarray:
    """Gradient of the mean loss wrt logits."""
    grad = probs.copy()
    if probs.ndim == 1:
        grad[int(label)] -= 1.0
        return grad
    labels = np.asarray(label)
    grad[np.arange(len(labels)), labels] -= 1.0
    return grad / len(labels)
