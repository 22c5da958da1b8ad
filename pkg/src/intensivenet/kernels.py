"""Depthwise convolution kernels for NHWC input.

The numba path reads the unpadded input with bounds checks and folds the
optional leading ReLU into the load, so neither a padded nor a rectified copy
of the input is materialised. Kernels write at a channel offset into a shared
buffer, so a layer whose input is a concatenation can be fed band by band. Without numba the same contract is met by
strided numpy slices over an explicitly padded array.
"""
from __future__ import annotations

import numpy as np

from .tensor_core import conv_output_size, pad_amounts, pad_input, window

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba installed
    numba = None


def _geometry(x_shape, ksize, stride, padding):
    _, h, w, _ = x_shape
    (kh, kw), (sh, sw) = ksize, stride
    ho, wo = conv_output_size(h, kh, sh, padding), conv_output_size(w, kw, sw, padding)
    return ho, wo, pad_amounts(h, kh, sh, padding)[0], pad_amounts(w, kw, sw, padding)[0]


if numba is not None:

    @numba.njit(cache=True, fastmath=True)
    def _dw_forward(x, cin, k, out, coff, sh, sw, pt, pl, relu):
        # adds the response of x[..., :cin] into out[..., coff:coff + cin]
        n, h, w, _ = x.shape
        kh, kw = k.shape[0], k.shape[1]
        _, ho, wo, _ = out.shape
        kl = np.ascontiguousarray(k[:, :, coff:coff + cin])
        acc = np.empty(cin)  # local accumulator keeps the inner loop vectorisable
        for b in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    acc[:] = 0.0
                    for i in range(kh):
                        iy = oy * sh + i - pt
                        if iy < 0 or iy >= h:
                            continue
                        for j in range(kw):
                            ix = ox * sw + j - pl
                            if ix < 0 or ix >= w:
                                continue
                            xv = x[b, iy, ix]
                            kv = kl[i, j]
                            if relu:
                                for ch in range(cin):
                                    acc[ch] += max(xv[ch], 0.0) * kv[ch]
                            else:
                                for ch in range(cin):
                                    acc[ch] += xv[ch] * kv[ch]
                    o = out[b, oy, ox]
                    for ch in range(cin):
                        o[coff + ch] += acc[ch]

    @numba.njit(cache=True, fastmath=True)
    def _dw_backward(x, cin, k, g, coff, sh, sw, pt, pl, relu, need_dx, dx, dk):
        # adds into dx[..., :cin] and dk[..., coff:coff + cin]
        n, h, w, _ = x.shape
        kh, kw = k.shape[0], k.shape[1]
        _, ho, wo, _ = g.shape
        kl = np.ascontiguousarray(k[:, :, coff:coff + cin])
        dkl = np.zeros((kh, kw, cin))
        gl = np.empty(cin)
        for b in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    gv = g[b, oy, ox]
                    for ch in range(cin):
                        gl[ch] = gv[coff + ch]
                    for i in range(kh):
                        iy = oy * sh + i - pt
                        if iy < 0 or iy >= h:
                            continue
                        for j in range(kw):
                            ix = ox * sw + j - pl
                            if ix < 0 or ix >= w:
                                continue
                            xv = x[b, iy, ix]
                            dkv = dkl[i, j]
                            if relu:
                                for ch in range(cin):
                                    dkv[ch] += max(xv[ch], 0.0) * gl[ch]
                            else:
                                for ch in range(cin):
                                    dkv[ch] += xv[ch] * gl[ch]
                            if need_dx:
                                kv = kl[i, j]
                                dxv = dx[b, iy, ix]
                                if relu:
                                    for ch in range(cin):
                                        dxv[ch] += kv[ch] * gl[ch] if xv[ch] > 0.0 else 0.0
                                else:
                                    for ch in range(cin):
                                        dxv[ch] += kv[ch] * gl[ch]
        for i in range(kh):
            for j in range(kw):
                for ch in range(cin):
                    dk[i, j, coff + ch] += dkl[i, j, ch]


def output_hw(x_shape, ksize, stride=(1, 1), padding="same") -> tuple[int, int]:
    ho, wo, _, _ = _geometry(x_shape, ksize, stride, padding)
    return ho, wo


def depthwise_into(x: np.ndarray, k: np.ndarray, out: np.ndarray, coff: int = 0, stride=(1, 1),
                   padding="same", relu=False, cin: int | None = None) -> None:
    """Add the depthwise response of ``x[..., :cin]`` into ``out[..., coff:coff + cin]``.

    ``k`` holds taps for every channel of ``out``; input channel ``ch`` uses
    ``k[..., coff + ch]``. ``cin`` defaults to all channels of ``x``. This
    lets channel bands share one output, or a layer read a leading slice of a
    wider feature buffer without copying it.
    """
    cin = x.shape[3] if cin is None else cin
    ho, wo, pt, pl = _geometry(x.shape, k.shape[:2], stride, padding)
    if out.shape[1:3] != (ho, wo) or coff + cin > out.shape[3] or cin > x.shape[3]:
        raise ValueError(f"output buffer {out.shape} cannot hold {cin} channels of {x.shape} at {coff}")
    if numba is not None:
        _dw_forward(np.ascontiguousarray(x), cin, np.ascontiguousarray(k), out, coff,
                    stride[0], stride[1], pt, pl, relu)
        return
    xs = x[..., :cin]
    r = np.maximum(xs, 0.0) if relu else xs
    xp, _, out_hw = pad_input(r, k.shape[:2], stride, padding)
    band = out[..., coff:coff + cin]
    for i in range(k.shape[0]):
        for j in range(k.shape[1]):
            band += window(xp, i, j, stride, out_hw) * k[i, j, coff:coff + cin]


def depthwise_grad_into(x: np.ndarray, k: np.ndarray, g: np.ndarray, dk: np.ndarray, coff: int = 0,
                        stride=(1, 1), padding="same", relu=False, dx: np.ndarray | None = None,
                        cin: int | None = None) -> None:
    """Backward of :func:`depthwise_into`.

    Adds into ``dk`` and, when ``dx`` (shaped like ``x``) is given, into
    ``dx[..., :cin]``; with ``relu`` only positions where ``x > 0`` receive
    gradient, so ``dx`` may already hold contributions from other consumers.
    """
    cin = x.shape[3] if cin is None else cin
    _, _, pt, pl = _geometry(x.shape, k.shape[:2], stride, padding)
    if dx is not None and (dx.shape != x.shape or not dx.flags.c_contiguous):
        raise ValueError("dx must be a C-contiguous array shaped like x")
    if numba is not None:
        _dw_backward(np.ascontiguousarray(x), cin, np.ascontiguousarray(k), np.ascontiguousarray(g),
                     coff, stride[0], stride[1], pt, pl, relu, dx is not None,
                     np.zeros((1, 1, 1, 1)) if dx is None else dx, dk)
        return
    h, w = x.shape[1:3]
    xs = x[..., :cin]
    r = np.maximum(xs, 0.0) if relu else xs
    xp, (ph, pw), out_hw = pad_input(r, k.shape[:2], stride, padding)
    gb = g[..., coff:coff + cin]
    dxp = np.zeros_like(xp) if dx is not None else None
    for i in range(k.shape[0]):
        for j in range(k.shape[1]):
            dk[i, j, coff:coff + cin] += (window(xp, i, j, stride, out_hw) * gb).reshape(-1, cin).sum(axis=0)
            if dx is not None:
                window(dxp, i, j, stride, out_hw)[...] += gb * k[i, j, coff:coff + cin]
    if dx is not None:
        d = dxp[:, ph[0]:ph[0] + h, pw[0]:pw[0] + w, :]
        dx[..., :cin] += d * (xs > 0) if relu else d


def depthwise(x: np.ndarray, k: np.ndarray, stride=(1, 1), padding="same", relu=False) -> np.ndarray:
    """``out[n,y,x,c] = sum_ij r[n, y*sh+i-pt, x*sw+j-pl, c] * k[i,j,c]`` with ``r = relu(x)`` if asked.

    ``k`` has shape (kh, kw, c); out-of-range taps read zero.
    """
    ho, wo = output_hw(x.shape, k.shape[:2], stride, padding)
    out = np.zeros((x.shape[0], ho, wo, x.shape[3]))
    depthwise_into(x, k, out, 0, stride, padding, relu)
    return out


def depthwise_grad(x: np.ndarray, k: np.ndarray, g: np.ndarray, stride=(1, 1), padding="same",
                   relu=False, need_dx=True):
    """Gradients of :func:`depthwise` w.r.t. ``x`` (``None`` unless ``need_dx``) and ``k``."""
    dk = np.zeros(k.shape)
    dx = np.zeros(x.shape) if need_dx else None
    depthwise_grad_into(x, k, g, dk, 0, stride, padding, relu, dx)
    return dx, dk
