"""Convolution, pooling and resampling ops on (C, H, W) feature maps."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ConfigurationError, DimensionError, Tensor, _tensor, make


def _out_extent(n: int, k: int, stride: int, padding: int) -> int:
    span = n + 2 * padding - k
    if span < 0 or span % stride:
        raise ConfigurationError(
            f"conv extent ({n} + 2*{padding} - {k})/{stride} + 1 is not a positive integer"
        )
    return span // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    # (C, ho, wo, k, k) -> (C*k*k, ho*wo)
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(-1, ho * wo)


def _col2im(cols: np.ndarray, c: int, k: int, stride: int, ho: int, wo: int, h: int, w: int) -> np.ndarray:
    cols = cols.reshape(c, k, k, ho, wo)
    out = np.zeros((c, h, w), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += cols[:, i, j]
    return out


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a (C_in, H, W) map with a (C_out, C_in, k, k) kernel."""
    x = _tensor(x)
    c_in, h, w = x.shape
    c_out, kc, k, k2 = kernel.shape
    if kc != c_in or k != k2:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    if stride < 1:
        raise ConfigurationError("stride must be >= 1")
    ho = _out_extent(h, k, stride, padding)
    wo = _out_extent(w, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = kernel.data.reshape(c_out, -1)
    y = (wmat @ cols).reshape(c_out, ho, wo)
    if bias is not None:
        y = y + bias.data[:, None, None]

    def back(g):
        gm = g.reshape(c_out, -1)
        dk = (gm @ cols.T).reshape(kernel.shape)
        dxp = _col2im(wmat.T @ gm, c_in, k, stride, ho, wo, h + 2 * padding, w + 2 * padding)
        dx = dxp[:, padding:padding + h, padding:padding + w] if padding else dxp
        db = gm.sum(axis=1) if bias is not None else None
        return dx, dk, db

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return make(y, inputs, back, "conv2d")


def conv_transpose2d(x, kernel, bias=None, stride: int = 1) -> Tensor:
    """Adjoint of :func:`conv2d` (no padding).

    ``kernel`` has shape (C_a, C_b, k, k) and maps a (C_a, H, W) input to
    (C_b, (H-1)*stride + k, (W-1)*stride + k).
    """
    x = _tensor(x)
    c_a, h, w = x.shape
    ka, c_b, k, k2 = kernel.shape
    if ka != c_a or k != k2:
        raise DimensionError(f"conv_transpose2d: input {x.shape} incompatible with kernel {kernel.shape}")
    if stride < 1:
        raise ConfigurationError("stride must be >= 1")
    ho, wo = (h - 1) * stride + k, (w - 1) * stride + k
    wmat = kernel.data.reshape(c_a, -1)
    xm = x.data.reshape(c_a, -1)
    y = _col2im(wmat.T @ xm, c_b, k, stride, h, w, ho, wo)
    if bias is not None:
        y = y + bias.data[:, None, None]

    def back(g):
        gcols = _im2col(g, k, stride, h, w)
        dx = (wmat @ gcols).reshape(x.shape)
        dk = (xm @ gcols.T).reshape(kernel.shape)
        db = g.reshape(c_b, -1).sum(axis=1) if bias is not None else None
        return dx, dk, db

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return make(y, inputs, back, "conv_transpose2d")


def pool_spatial(x, mode: str) -> Tensor:
    """Reduce each channel of a (C, H, W) map to a single value."""
    x = _tensor(x)
    c, h, w = x.shape
    flat = x.data.reshape(c, -1)
    if mode == "avg":
        return make(flat.mean(axis=1), (x,), lambda g: (np.broadcast_to((g / (h * w))[:, None, None], x.shape).copy(),), "avgpool")
    if mode == "max":
        idx = np.argmax(flat, axis=1)  # first occurrence on ties

        def back(g):
            out = np.zeros_like(flat)
            out[np.arange(c), idx] = g
            return (out.reshape(x.shape),)

        return make(flat[np.arange(c), idx], (x,), back, "maxpool")
    raise ConfigurationError(f"unknown pooling mode {mode!r}")


def sandwich(x, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Apply fixed linear maps along both spatial axes: ``rows @ x[c] @ cols.T``."""
    x = _tensor(x)
    rows = rows.astype(x.dtype, copy=False)
    cols = cols.astype(x.dtype, copy=False)
    y = np.einsum("ih,chw,jw->cij", rows, x.data, cols, optimize=True)
    return make(y, (x,), lambda g: (np.einsum("ih,cij,jw->chw", rows, g, cols, optimize=True),), "sandwich")


def reflect_matrix(n: int, pad: int) -> np.ndarray:
    idx = np.pad(np.arange(n), (0, pad), mode="reflect") if pad else np.arange(n)
    m = np.zeros((n + pad, n))
    m[np.arange(n + pad), idx] = 1.0
    return m


def pad_reflect(x, pad_h: int, pad_w: int) -> Tensor:
    """Reflect-pad a (C, H, W) map at the bottom and right edges."""
    x = _tensor(x)
    _, h, w = x.shape
    if not pad_h and not pad_w:
        return x
    return sandwich(x, reflect_matrix(h, pad_h), reflect_matrix(w, pad_w))


def bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Interpolation weights with corner alignment (endpoints map to endpoints)."""
    m = np.zeros((n_out, n_in))
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 2)
    frac = src - i0
    m[np.arange(n_out), i0] = 1.0 - frac
    m[np.arange(n_out), i0 + 1] += frac
    return m


def resize_bilinear(x, h: int, w: int) -> Tensor:
    x = _tensor(x)
    _, h0, w0 = x.shape
    if h < h0 or w < w0:
        raise ConfigurationError(f"resize target {(h, w)} smaller than source {(h0, w0)}")
    return sandwich(x, bilinear_matrix(h, h0), bilinear_matrix(w, w0))
