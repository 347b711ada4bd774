"""Dense float64 tensor kernels.

Tensors are plain ``numpy.ndarray`` values of dtype float64. Feature maps are
laid out ``h x w x c`` (channel fastest); most kernels additionally accept a
leading batch axis so a whole minibatch goes through one call. Nothing here
broadcasts: mismatched shapes raise :class:`ShapeError`.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


def tensor(data, shape=None) -> np.ndarray:
    """Build a float64 tensor from nested sequences or a flat buffer."""
    arr = np.array(data, dtype=DTYPE)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ShapeError(f"extents must be positive, got {shape}")
        if arr.size != int(np.prod(shape)):
            raise ShapeError(f"{arr.size} values cannot fill shape {shape}")
        arr = arr.reshape(shape)
    return arr


def _same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def project(x: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Apply ``a.T`` to every descriptor along the last axis of ``x``.

    ``x`` is ``[..., c]`` and ``a`` is ``c x d``; the result is ``[..., d]``.
    """
    if a.ndim != 2 or x.ndim < 1 or x.shape[-1] != a.shape[0]:
        raise ShapeError(f"project: descriptors {x.shape} do not match matrix {a.shape}")
    lead = x.shape[:-1]
    return (x.reshape(-1, a.shape[0]) @ a).reshape(lead + (a.shape[1],))


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b, "hadamard")
    return a * b


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b, "add")
    return a + b


def sub(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b, "sub")
    return a - b


def scale(a: np.ndarray, alpha: float) -> np.ndarray:
    return a * float(alpha)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def sum_over_spatial(x: np.ndarray) -> np.ndarray:
    """Sum-pool ``h x w x d`` to ``d`` (or ``n x h x w x d`` to ``n x d``)."""
    if x.ndim not in (3, 4):
        raise ShapeError(f"sum_over_spatial: expected rank 3 (or batched rank 4), got {x.shape}")
    return x.sum(axis=(-3, -2))


def concat(parts: list[np.ndarray]) -> np.ndarray:
    """Join blocks along the last axis; leading extents must agree."""
    if not parts:
        raise ShapeError("concat: nothing to join")
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ShapeError(f"concat: leading shapes differ {parts[0].shape} vs {p.shape}")
    return np.concatenate(parts, axis=-1)


def _batched(x: np.ndarray, rank: int, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == rank:
        return x[None], True
    if x.ndim == rank + 1:
        return x, False
    raise ShapeError(f"{op}: expected rank {rank} (or batched {rank + 1}), got {x.shape}")


def conv_output_extent(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"conv2d: extent {size} with kernel {k}, stride {stride}, pad {pad} "
            "does not give an integral output size"
        )
    return span // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Patches of a batched map as rows ``(n, h', w', kh*kw*cin)``."""
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    # win: (n, h', w', cin, kh, kw) -> (n, h', w', kh, kw, cin)
    win = win.transpose(0, 1, 2, 4, 5, 3)
    n, ho, wo = win.shape[:3]
    return np.ascontiguousarray(win).reshape(n, ho, wo, kh * kw * x.shape[3])


def col2im(cols: np.ndarray, in_shape: tuple, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch rows back onto the map."""
    n, h, w, cin = in_shape
    ho, wo = cols.shape[1], cols.shape[2]
    cols = cols.reshape(n, ho, wo, kh, kw, cin)
    out = np.zeros((n, h + 2 * pad, w + 2 * pad, cin), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += cols[:, :, :, i, j, :]
    if pad:
        out = out[:, pad:-pad, pad:-pad, :]
    return out


def conv2d(x: np.ndarray, kernels: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Zero-padded cross-correlation of ``h x w x cin`` with ``kh x kw x cin x cout``."""
    return conv2d_with_patches(x, kernels, stride, pad)[0]


def conv2d_with_patches(x: np.ndarray, kernels: np.ndarray, stride: int = 1, pad: int = 0):
    """:func:`conv2d` that also returns the batched im2col patch matrix."""
    xb, single = _batched(x, 3, "conv2d")
    if kernels.ndim != 4:
        raise ShapeError(f"conv2d: kernels must be kh x kw x cin x cout, got {kernels.shape}")
    kh, kw, cin, cout = kernels.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if xb.shape[3] != cin:
        raise ShapeError(f"conv2d: input channels {xb.shape[3]} vs kernel channels {cin}")
    conv_output_extent(xb.shape[1], kh, stride, pad)
    conv_output_extent(xb.shape[2], kw, stride, pad)
    cols = im2col(xb, kh, kw, stride, pad)
    out = cols @ kernels.reshape(kh * kw * cin, cout)
    return (out[0] if single else out), cols


def maxpool2(x: np.ndarray, return_argmax: bool = False):
    """2x2 max pooling with stride 2.

    With ``return_argmax`` also returns, for each output cell, the flat index
    (0..3, row-major inside the window) of the winning input. Ties go to the
    lowest index.
    """
    xb, single = _batched(x, 3, "maxpool2")
    n, h, w, c = xb.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: spatial extents must be even, got {h}x{w}")
    win = xb.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    if single:
        out, idx = out[0], idx[0]
    return (out, idx) if return_argmax else out


def maxpool2_backward(grad: np.ndarray, argmax: np.ndarray) -> np.ndarray:
    """Route pooled gradients back to the argmax positions."""
    gb, single = _batched(grad, 3, "maxpool2_backward")
    ab = argmax[None] if single else argmax
    n, ho, wo, c = gb.shape
    win = np.zeros((n, ho, wo, c, 4), dtype=DTYPE)
    np.put_along_axis(win, ab[..., None], gb[..., None], axis=-1)
    out = win.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * ho, 2 * wo, c)
    return out[0] if single else out


def signed_sqrt(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.sqrt(np.abs(v))


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale each vector along the last axis to unit length; zeros stay zero."""
    norm = np.sqrt((v * v).sum(axis=-1, keepdims=True))
    safe = np.where(norm > 0.0, norm, 1.0)
    return v / safe
