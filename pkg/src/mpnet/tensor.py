"""Dense float32 arrays and the primitive numeric operations built on them.

Tensors are plain ``numpy.ndarray`` objects of dtype float32, rank 1 to 4,
laid out row-major with the batch x height x width x channels convention.
Every function here is pure: inputs are never written to.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32
MAX_RANK = 4


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_tensor(x, *, check_finite: bool = True) -> np.ndarray:
    arr = np.array(x, dtype=DTYPE)
    if arr.ndim < 1 or arr.ndim > MAX_RANK:
        raise ShapeError(f"tensor rank must be in [1, {MAX_RANK}], got shape {arr.shape}")
    if any(d < 1 for d in arr.shape):
        raise ShapeError(f"tensor extents must be positive, got shape {arr.shape}")
    if check_finite and not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


def zeros(shape) -> np.ndarray:
    return np.zeros(shape, dtype=DTYPE)


def strides_of(shape) -> tuple[int, ...]:
    """Element strides for a row-major layout of ``shape``."""
    out = []
    acc = 1
    for d in reversed(tuple(shape)):
        out.append(acc)
        acc *= d
    return tuple(reversed(out))


def offset_of(shape, index) -> int:
    if len(index) != len(shape):
        raise ShapeError(f"index {tuple(index)} does not match rank of shape {tuple(shape)}")
    for i, d in zip(index, shape):
        if not 0 <= i < d:
            raise IndexError(f"index {tuple(index)} out of bounds for shape {tuple(shape)}")
    return sum(i * s for i, s in zip(index, strides_of(shape)))


def index_of(shape, offset: int) -> tuple[int, ...]:
    size = int(np.prod(shape))
    if not 0 <= offset < size:
        raise IndexError(f"offset {offset} out of bounds for shape {tuple(shape)}")
    out = []
    for s in strides_of(shape):
        out.append(offset // s)
        offset %= s
    return tuple(out)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def _out_extent(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def pad2d(x: np.ndarray, p: int) -> np.ndarray:
    """Zero border of width ``p`` around the two spatial axes.

    Accepts ``h x w x c`` or batched ``n x h x w x c`` input.
    """
    if p < 0:
        raise ValueError(f"padding must be non-negative, got {p}")
    if x.ndim == 3:
        widths = ((p, p), (p, p), (0, 0))
    elif x.ndim == 4:
        widths = ((0, 0), (p, p), (p, p), (0, 0))
    else:
        raise ShapeError(f"pad2d expects rank 3 or 4, got shape {x.shape}")
    if p == 0:
        return x.copy()
    return np.pad(x, widths)


def im2col(x: np.ndarray, kernel: tuple[int, int], stride: int = 1, pad: int = 0) -> np.ndarray:
    """Lower receptive fields to rows.

    For ``h x w x c`` input the result is ``(oh*ow) x (kh*kw*c)``; batched
    ``n x h x w x c`` input gives ``(n*oh*ow) x (kh*kw*c)``. Columns are ordered
    (kh, kw, c) row-major.
    """
    kh, kw = kernel
    if kh < 1 or kw < 1 or stride < 1:
        raise ValueError(f"invalid kernel {kernel} or stride {stride}")
    batched = x.ndim == 4
    if not batched:
        if x.ndim != 3:
            raise ShapeError(f"im2col expects rank 3 or 4, got shape {x.shape}")
        x = x[None]
    n, h, w, c = x.shape
    oh = _out_extent(h, kh, stride, pad)
    ow = _out_extent(w, kw, stride, pad)
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"im2col output extent < 1 for input {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad}"
        )
    xp = pad2d(x, pad) if pad else x
    # windows: n, oh', ow', c, kh, kw
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :oh, :ow]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, kh * kw * c)
    return np.ascontiguousarray(cols)


def col2im(cols: np.ndarray, x_shape, kernel: tuple[int, int], stride: int = 1, pad: int = 0) -> np.ndarray:
    """Adjoint of :func:`im2col` for batched input: scatter-add rows back."""
    n, h, w, c = x_shape
    kh, kw = kernel
    oh = _out_extent(h, kh, stride, pad)
    ow = _out_extent(w, kw, stride, pad)
    cols = cols.reshape(n, oh, ow, kh, kw, c)
    out = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += cols[:, :, :, i, j, :]
    return out[:, pad:pad + h, pad:pad + w, :]


def reduce_mean(x: np.ndarray, axes) -> np.ndarray:
    axes = tuple(sorted(set(int(a) for a in axes)))
    for a in axes:
        if not 0 <= a < x.ndim:
            raise ShapeError(f"invalid axis {a} for shape {x.shape}")
    return np.mean(x, axis=axes, dtype=np.result_type(x.dtype, DTYPE))
