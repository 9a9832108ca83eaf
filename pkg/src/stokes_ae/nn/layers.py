"""1D layer kernels.

Public functions take channels-first ``(N, C, L)`` float64 arrays. The
``*_cnl`` variants work on channel-major ``(C, N, L)`` arrays, the layout
the model keeps internally: padding every sample and flattening ``(N, L)``
turns a whole convolution into one GEMM against ``K`` stacked shifted
copies of the input.

Convolutions are stride-1 cross-correlations with symmetric zero padding
(odd kernels only), so output length equals input length. A transposed
convolution with kernel ``w`` of shape ``(C_in, C_out, K)`` is the
input-gradient map of a convolution whose kernel is that same ``w``
(read as ``(out, in, K)``).
"""
from __future__ import annotations

import numpy as np

from ..errors import IndivisibleLength, ShapeMismatch


def _check_kernel(c_in: int, w: np.ndarray) -> None:
    if w.ndim != 3:
        raise ShapeMismatch(f"kernel must be 3-D, got shape {w.shape}")
    if c_in != w.shape[1]:
        raise ShapeMismatch(f"input has {c_in} channels, kernel expects {w.shape[1]}")
    if w.shape[2] % 2 != 1:
        raise ShapeMismatch(f"kernel width must be odd, got {w.shape[2]}")


def _check3(x, name="input"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeMismatch(f"{name} must be 3-D, got shape {x.shape}")
    return x


def adjoint_kernel(w: np.ndarray) -> np.ndarray:
    """Kernel whose convolution is the adjoint of convolving with ``w``."""
    return np.ascontiguousarray(w[:, :, ::-1].transpose(1, 0, 2))


# -- channel-major core ------------------------------------------------------

def pad_flat(x: np.ndarray, p: int) -> np.ndarray:
    """``(C, N, L)`` -> ``(C, N*(L+2p))`` with ``p`` zeros on both sides of every sample."""
    c, n, length = x.shape
    xp = np.zeros((c, n, length + 2 * p))
    xp[:, :, p:p + length] = x
    return xp.reshape(c, -1)


def stack_taps(flat: np.ndarray, k: int, t: int) -> np.ndarray:
    """Rows ``j*C:(j+1)*C`` hold the padded input shifted by tap ``j``."""
    c = flat.shape[0]
    cols = np.empty((k * c, t))
    for j in range(k):
        cols[j * c:(j + 1) * c] = flat[:, j:j + t]
    return cols


def conv_cnl(x, w, b=None):
    """Same-padded conv on ``(C, N, L)``; returns ``(out, cols)``.

    Column ``n*(L+K-1) + i`` of ``cols`` is the receptive field of output
    position ``i`` of sample ``n``; the ``K-1`` columns after each sample
    straddle two samples and are discarded.
    """
    c, n, length = x.shape
    _check_kernel(c, w)
    o, _, k = w.shape
    p = k // 2
    lp = length + 2 * p
    t = n * lp - 2 * p
    cols = stack_taps(pad_flat(x, p), k, t)
    acc = np.empty((o, n * lp))
    acc[:, :t] = w.transpose(0, 2, 1).reshape(o, k * c) @ cols
    out = acc.reshape(o, n, lp)[:, :, :length]
    if b is not None:
        out = out + b[:, None, None]
    else:
        out = np.ascontiguousarray(out)
    return out, cols


def conv_cnl_backward(cols, w, grad_out, need_input_grad: bool = True):
    """Gradients ``(grad_x, grad_w, grad_b)`` of :func:`conv_cnl` from its cached columns.

    ``grad_x`` is ``None`` when ``need_input_grad`` is false.
    """
    o, n, length = grad_out.shape
    _, c, k = w.shape
    p = k // 2
    lp = length + 2 * p
    t = n * lp - 2 * p
    if cols.shape != (k * c, t):
        raise ShapeMismatch(f"cached columns {cols.shape} inconsistent with grad_out {grad_out.shape}")
    gp = np.zeros((o, n, lp))
    gp[:, :, :length] = grad_out
    gflat = gp.reshape(o, -1)[:, :t]
    gw = (gflat @ cols.T).reshape(o, k, c).transpose(0, 2, 1)
    gb = grad_out.sum(axis=(1, 2))
    gx = conv_cnl(grad_out, adjoint_kernel(w))[0] if need_input_grad else None
    return gx, np.ascontiguousarray(gw), gb


def transconv_cnl(x, w, b=None):
    c, _, _ = x.shape
    if w.ndim != 3 or c != w.shape[0]:
        raise ShapeMismatch(f"input with {c} channels incompatible with transposed kernel {w.shape}")
    return conv_cnl(x, adjoint_kernel(w), b)


def transconv_cnl_backward(cols, w, grad_out, need_input_grad: bool = True):
    gx, gwa, gb = conv_cnl_backward(cols, adjoint_kernel(w), grad_out, need_input_grad)
    return gx, adjoint_kernel(gwa), gb


def maxpool_cnl(x, window: int = 2):
    """Per-window max along the last axis; first occurrence wins ties."""
    if window < 2:
        raise ValueError("pool window must be >= 2")
    length = x.shape[-1]
    if length % window:
        raise IndivisibleLength(f"length {length} not divisible by pool window {window}")
    if window == 2:
        a = x[..., 0::2]
        b = x[..., 1::2]
        idx = b > a
        return np.where(idx, b, a), idx.astype(np.int64)
    xr = x.reshape(*x.shape[:-1], length // window, window)
    idx = xr.argmax(axis=-1)
    return np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0], idx


def maxpool_cnl_backward(idx, grad_out, window: int = 2):
    shape = grad_out.shape
    g = np.zeros((*shape, window))
    np.put_along_axis(g, idx[..., None], grad_out[..., None], axis=-1)
    return g.reshape(*shape[:-1], shape[-1] * window)


def upsample_cnl(x, factor: int = 2):
    if factor < 2:
        raise ValueError("upsample factor must be >= 2")
    return np.repeat(x, factor, axis=-1)


def upsample_cnl_backward(grad_out, factor: int = 2):
    length = grad_out.shape[-1]
    if length % factor:
        raise IndivisibleLength(f"gradient length {length} not divisible by {factor}")
    return grad_out.reshape(*grad_out.shape[:-1], length // factor, factor).sum(axis=-1)


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(x, grad_out):
    return grad_out * (x > 0)


# -- (N, C, L) public API ------------------------------------------------------

def _to_cnl(x):
    return np.ascontiguousarray(x.transpose(1, 0, 2))


def _to_ncl(x):
    return np.ascontiguousarray(x.transpose(1, 0, 2))


def conv1d_forward(x, w, b=None):
    x = _check3(x)
    _check_kernel(x.shape[1], w)
    out, _ = conv_cnl(_to_cnl(x), w, b)
    return _to_ncl(out)


def conv1d_backward(x, w, grad_out):
    """Return ``(grad_x, grad_w, grad_b)`` for :func:`conv1d_forward`."""
    x = _check3(x)
    grad_out = _check3(grad_out, "grad_out")
    _check_kernel(x.shape[1], w)
    expected = (x.shape[0], w.shape[0], x.shape[2])
    if grad_out.shape != expected:
        raise ShapeMismatch(f"grad_out shape {grad_out.shape} != {expected}")
    _, cols = conv_cnl(_to_cnl(x), w)
    gx, gw, gb = conv_cnl_backward(cols, w, _to_cnl(grad_out))
    return _to_ncl(gx), gw, gb


def transconv1d_forward(x, w, b=None):
    """Transposed convolution; ``w`` has shape ``(C_in, C_out, K)``."""
    x = _check3(x)
    out, _ = transconv_cnl(_to_cnl(x), w, b)
    return _to_ncl(out)


def transconv1d_backward(x, w, grad_out):
    x = _check3(x)
    grad_out = _check3(grad_out, "grad_out")
    if x.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"input {x.shape} incompatible with transposed kernel {w.shape}")
    expected = (x.shape[0], w.shape[1], x.shape[2])
    if grad_out.shape != expected:
        raise ShapeMismatch(f"grad_out shape {grad_out.shape} != {expected}")
    _, cols = transconv_cnl(_to_cnl(x), w)
    gx, gw, gb = transconv_cnl_backward(cols, w, _to_cnl(grad_out))
    return _to_ncl(gx), gw, gb


def maxpool_forward(x, window: int = 2):
    """Return ``(pooled, argmax_within_window)``."""
    return maxpool_cnl(_check3(x), window)


def maxpool_backward(idx, grad_out, window: int = 2):
    return maxpool_cnl_backward(idx, _check3(grad_out, "grad_out"), window)


def upsample_forward(x, factor: int = 2):
    return upsample_cnl(_check3(x), factor)


def upsample_backward(grad_out, factor: int = 2):
    return upsample_cnl_backward(_check3(grad_out, "grad_out"), factor)
