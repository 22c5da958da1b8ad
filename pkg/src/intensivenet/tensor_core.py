"""Dense NHWC arrays and the shape-level primitives the network is built from.

A tensor here is a plain ``numpy.ndarray`` of rank 4 in ``(n, h, w, c)``
order with ``float64`` entries. Kernels use ``(kh, kw, c_in, c_out)``.
"""
from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64
AXES = "nhwc"


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible for an operation."""


class Shape(NamedTuple):
    n: int
    h: int
    w: int
    c: int


def as_tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Copy ``data`` into a fresh contiguous float64 NHWC array."""
    arr = np.array(data, dtype=DTYPE, copy=True, order="C")
    if shape is not None:
        arr = arr.reshape(tuple(shape))
    if arr.ndim != 4:
        raise DimensionError(f"expected a rank-4 (n, h, w, c) array, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise DimensionError(f"all dimensions must be >= 1, got {arr.shape}")
    return arr


def shape_of(x: np.ndarray) -> Shape:
    return Shape(*x.shape)


def concat_channels(inputs: Sequence[np.ndarray]) -> np.ndarray:
    """Stack tensors along the channel axis, preserving list order."""
    if len(inputs) == 0:
        raise DimensionError("concat_channels needs at least one input")
    lead = inputs[0].shape[:3]
    for i, t in enumerate(inputs):
        if t.ndim != 4 or t.shape[:3] != lead:
            raise DimensionError(
                f"input {i} has shape {t.shape}; expected (n, h, w) = {lead}"
            )
    return np.concatenate(inputs, axis=3)


def split_channels(x: np.ndarray, sizes: Sequence[int]) -> list[np.ndarray]:
    """Inverse of :func:`concat_channels` for the given band widths."""
    if sum(sizes) != x.shape[3]:
        raise DimensionError(f"band sizes {list(sizes)} do not sum to {x.shape[3]} channels")
    bounds = np.cumsum([0, *sizes])
    return [x[..., bounds[i]:bounds[i + 1]].copy() for i in range(len(sizes))]


def elementwise_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a + b`` for equal shapes, or ``b`` broadcast as a per-channel vector."""
    b = np.asarray(b, dtype=DTYPE)
    if b.shape == a.shape:
        return a + b
    if b.ndim == 1 and b.shape[0] == a.shape[-1]:
        return a + b
    if b.ndim == 4 and b.shape[:3] == (1, 1, 1) and b.shape[3] == a.shape[3]:
        return a + b
    raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}")


def reduce_mean(x: np.ndarray, axes: str | Sequence[int | str] = AXES) -> np.ndarray:
    """Mean over the named axes (any subset of ``"nhwc"``); reduced axes keep size 1."""
    idx = tuple(sorted({AXES.index(a) if isinstance(a, str) else int(a) for a in axes}))
    return np.mean(x, axis=idx, keepdims=True)


# -- convolution geometry ---------------------------------------------------

def conv_output_size(size: int, k: int, s: int, padding: str) -> int:
    if padding == "same":
        return -(-size // s)
    if padding == "valid":
        if k > size:
            raise DimensionError(f"kernel {k} larger than input {size} under valid padding")
        return (size - k) // s + 1
    raise ValueError(f"unknown padding {padding!r}")


def pad_amounts(size: int, k: int, s: int, padding: str) -> tuple[int, int]:
    """Leading/trailing zero padding along one axis (leading gets the floor half)."""
    if padding == "valid":
        return 0, 0
    out = conv_output_size(size, k, s, padding)
    total = max((out - 1) * s + k - size, 0)
    return total // 2, total - total // 2


def pad_input(x: np.ndarray, kernel, stride, padding: str):
    """Zero-pad ``x`` for a conv; returns the padded array, pads and output size."""
    (kh, kw), (sh, sw) = kernel, stride
    n, h, w, c = x.shape
    ho = conv_output_size(h, kh, sh, padding)
    wo = conv_output_size(w, kw, sw, padding)
    ph, pw = pad_amounts(h, kh, sh, padding), pad_amounts(w, kw, sw, padding)
    if ph == (0, 0) and pw == (0, 0):
        xp = x
    else:
        xp = np.zeros((n, h + ph[0] + ph[1], w + pw[0] + pw[1], c), dtype=x.dtype)
        xp[:, ph[0]:ph[0] + h, pw[0]:pw[0] + w, :] = x
    return xp, (ph, pw), (ho, wo)


def window(xp: np.ndarray, i: int, j: int, stride, out_hw) -> np.ndarray:
    """View of the padded input read by kernel tap ``(i, j)`` for every output pixel."""
    (sh, sw), (ho, wo) = stride, out_hw
    return xp[:, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw, :]


def im2col(x: np.ndarray, kernel, stride=(1, 1), padding: str = "same") -> np.ndarray:
    """Lower a convolution to a matrix of patches.

    Rows enumerate output pixels in ``(n, h_out, w_out)`` order; columns are
    ordered ``(kh, kw, c)`` so that ``im2col(x) @ K.reshape(-1, c_out)`` is the
    convolution with kernel ``K`` of shape ``(kh, kw, c, c_out)``.
    """
    kh, kw = kernel
    n, _, _, c = x.shape
    xp, _, (ho, wo) = pad_input(x, kernel, stride, padding)
    sh, sw = stride
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # n, H, W, c, kh, kw
    win = win[:, : sh * (ho - 1) + 1 : sh, : sw * (wo - 1) + 1 : sw]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)


def col2im(cols: np.ndarray, x_shape, kernel, stride=(1, 1), padding: str = "same") -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch rows back onto the input grid."""
    kh, kw = kernel
    n, h, w, c = x_shape
    ho = conv_output_size(h, kh, stride[0], padding)
    wo = conv_output_size(w, kw, stride[1], padding)
    (pt, pb), (pl, pr) = pad_amounts(h, kh, stride[0], padding), pad_amounts(w, kw, stride[1], padding)
    dxp = np.zeros((n, h + pt + pb, w + pl + pr, c), dtype=cols.dtype)
    cols6 = cols.reshape(n, ho, wo, kh, kw, c)
    for i in range(kh):
        for j in range(kw):
            window(dxp, i, j, stride, (ho, wo))[...] += cols6[:, :, :, i, j, :]
    return dxp[:, pt:pt + h, pl:pl + w, :]


def same_output_size(size: int, stride: int) -> int:
    return math.ceil(size / stride)
