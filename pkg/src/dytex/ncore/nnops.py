"""Neural-network primitives on top of the tensor engine.

Layout conventions: images are NCHW, conv weights are
(C_out, C_in, k, k), transposed-conv weights are (C_in, C_out, k, k),
sequences are (N, T, d).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Array, Tensor, _check_finite, _record, _unbroadcast
from .tensor import add, matmul, mul, reshape, tensor_sum, transpose

_MASK_FILL = -1e9  # additive causal-mask value; exp underflows to exactly 0


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))
    return _record(out, (a,), lambda g: (g * (a.data > 0),))


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit (tanh approximation)."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_A * x2 * x))
    out = Tensor(0.5 * x * (1.0 + t))
    _check_finite(out.data, "gelu")

    def bwd(g):
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
        return (g * d,)

    return _record(out, (a,), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    y = np.exp(x - x.max(axis=axis, keepdims=True))
    y /= y.sum(axis=axis, keepdims=True)
    out = Tensor(y)
    _check_finite(out.data, "softmax")

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (a,), bwd)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - logz
    out = Tensor(y)
    _check_finite(out.data, "log_softmax")

    def bwd(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), bwd)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data)
    _check_finite(out.data, "layer_norm")

    def bwd(g):
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        ga = inv * (dxhat - m1 - xhat * m2)
        reduce_axes = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=reduce_axes)
        gbeta = g.sum(axis=reduce_axes)
        return ga, ggamma, gbeta

    return _record(out, (a, gamma, beta), bwd)


def embedding(table: Tensor, indices: Array) -> Tensor:
    """Row lookup ``table[indices]``; gradient scatter-adds into the table."""
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range [0, {table.shape[0]})")
    out = Tensor(table.data[idx])

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.ravel(), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record(out, (table,), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map on the last axis: ``x @ w + b``."""
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1]))
    out = matmul(flat, w)
    if b is not None:
        out = add(out, b)
    return reshape(out, lead + (w.shape[-1],))


# ------------------------------------------------------------------
# convolution
# ------------------------------------------------------------------

def _conv_out_size(n: int, k: int, stride: int, padding: int) -> int:
    span = n + 2 * padding - k
    if span < 0:
        raise ValueError(f"kernel {k} larger than padded input {n + 2 * padding}")
    return span // stride + 1


def _im2col(x: Array, k: int, stride: int, padding: int) -> tuple[Array, int, int]:
    """Return (N*H'*W', C*k*k) patch matrix plus the output spatial dims."""
    n, c, h, w = x.shape
    ho = _conv_out_size(h, k, stride, padding)
    wo = _conv_out_size(w, k, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return np.ascontiguousarray(cols), ho, wo


def _col2im(gcols: Array, x_shape: tuple[int, ...], k: int, stride: int,
            padding: int, ho: int, wo: int) -> Array:
    """Scatter column gradients back onto the (padded) input."""
    n, c, h, w = x_shape
    gx = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=gcols.dtype)
    g6 = gcols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    for a in range(k):
        for b in range(k):
            gx[:, :, a:a + ho * stride:stride, b:b + wo * stride:stride] += g6[:, :, :, :, a, b]
    if padding:
        gx = gx[:, :, padding:padding + h, padding:padding + w]
    return gx


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with (C_out, C_in, k, k) kernels."""
    if stride < 1:
        raise ValueError("stride must be positive")
    n, c_in, _, _ = x.shape
    c_out, c_in_w, k, k2 = w.shape
    if c_in != c_in_w or k != k2:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, kernel {w.shape}")
    cols, ho, wo = _im2col(x.data, k, stride, padding)
    wmat = w.data.reshape(c_out, c_in * k * k)
    y = (cols @ wmat.T).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    if b is not None:
        y = y + b.data.reshape(1, c_out, 1, 1)
    out = Tensor(np.ascontiguousarray(y))
    _check_finite(out.data, "conv2d")

    def bwd(g):
        gflat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, c_out)
        gw = (gflat.T @ cols).reshape(w.shape)
        gcols = gflat @ wmat
        gx = _col2im(gcols, x.shape, k, stride, padding, ho, wo)
        if b is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _record(out, inputs, bwd)


def conv2d_transpose(x: Tensor, w: Tensor, b: Tensor | None = None,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution (fractionally-strided upsampling).

    Input NCHW, weights (C_in, C_out, k, k);
    H_out = (H - 1) * stride - 2 * padding + k.
    """
    if stride < 1:
        raise ValueError("stride must be positive")
    n, c_in, h, wd = x.shape
    c_in_w, c_out, k, _ = w.shape
    if c_in != c_in_w:
        raise ValueError(f"conv2d_transpose shape mismatch: input {x.shape}, kernel {w.shape}")
    hp = (h - 1) * stride + k
    wp = (wd - 1) * stride + k
    xflat = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(n * h * wd, c_in)
    wmat = w.data.reshape(c_in, c_out * k * k)
    contrib = (xflat @ wmat).reshape(n, h, wd, c_out, k, k).transpose(0, 3, 1, 2, 4, 5)
    ypad = np.zeros((n, c_out, hp, wp), dtype=x.dtype)
    for a in range(k):
        for bb in range(k):
            ypad[:, :, a:a + h * stride:stride, bb:bb + wd * stride:stride] += contrib[..., a, bb]
    y = ypad[:, :, padding:hp - padding, padding:wp - padding]
    if b is not None:
        y = y + b.data.reshape(1, c_out, 1, 1)
    out = Tensor(np.ascontiguousarray(y))
    _check_finite(out.data, "conv2d_transpose")

    def bwd(g):
        gpad = np.zeros((n, c_out, hp, wp), dtype=g.dtype)
        gpad[:, :, padding:hp - padding, padding:wp - padding] = g
        win = sliding_window_view(gpad, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        winflat = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
            n * h * wd, c_out * k * k)
        gx = (winflat @ wmat.T).reshape(n, h, wd, c_in).transpose(0, 3, 1, 2)
        gw = (xflat.T @ winflat).reshape(w.shape)
        if b is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _record(out, inputs, bwd)


# ------------------------------------------------------------------
# attention
# ------------------------------------------------------------------

@dataclass
class AttentionParams:
    """Projection weights for one multi-head self-attention layer."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [(name, getattr(self, name)) for name in
                ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]


def causal_mask(t: int, dtype=np.float32) -> Tensor:
    """Additive (T, T) mask: 0 on/below the diagonal, large negative above."""
    m = np.triu(np.full((t, t), _MASK_FILL, dtype=dtype), k=1)
    return Tensor(m)


def multi_head_attention(x: Tensor, params: AttentionParams, heads: int,
                         causal: bool = False) -> Tensor:
    """Scaled dot-product self-attention over (N, T, d) sequences."""
    n, t, d = x.shape
    if d % heads != 0:
        raise ValueError(f"model width {d} not divisible by {heads} heads")
    hd = d // heads

    def split(h: Tensor) -> Tensor:
        return transpose(reshape(h, (n, t, heads, hd)), (0, 2, 1, 3))

    q = split(linear(x, params.wq, params.bq))
    k = split(linear(x, params.wk, params.bk))
    v = split(linear(x, params.wv, params.bv))

    scores = matmul(q, transpose(k, (0, 1, 3, 2)))
    scores = mul(scores, Tensor(np.asarray(1.0 / np.sqrt(hd), dtype=x.dtype)))
    if causal:
        scores = add(scores, causal_mask(t, dtype=x.dtype))
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, v)
    merged = reshape(transpose(ctx, (0, 2, 1, 3)), (n, t, d))
    return linear(merged, params.wo, params.bo)


def cross_entropy(logits: Tensor, targets: Array, weights: Array | None = None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits``.

    ``logits`` is (N, V); ``weights`` (N,) selects/weights positions
    (zero drops a position). The mean is over total weight.
    """
    n, v = logits.shape
    tgt = np.asarray(targets).ravel()
    if tgt.shape[0] != n:
        raise ValueError("targets length must match logits rows")
    w = np.ones(n, dtype=logits.dtype) if weights is None else np.asarray(weights, dtype=logits.dtype)
    total = float(w.sum())
    if total <= 0:
        raise ValueError("cross_entropy needs positive total weight")
    picked = np.zeros((n, v), dtype=logits.dtype)
    picked[np.arange(n), tgt] = -w / total
    logp = log_softmax(logits, axis=-1)
    return tensor_sum(mul(logp, Tensor(picked)))
