"""Deterministic tensor kernels on an integer (fixed-point) or float path.

Integer inputs take the exact int64 path; ``FixedTensor`` inputs are
multiplied on codes and requantized to an output format with integer-only
round-half-to-even; anything else runs in float64.  The inner loops come
from a compiled extension when it is built, otherwise from pure Python.
"""

from __future__ import annotations

import numpy as np

from ..errors import ChannelCountMismatch, KernelLongerThanInput, ShapeMismatch
from . import _backend
from .fixed import (
    BIT_WIDTHS,
    FixedTensor,
    QFormat,
    check_accumulator,
    dequantize,
    fake_quantize,
    output_multiplier,
    product_format,
    quantize,
    requant_multiplier,
    require_2d,
)

BACKEND = _backend.NAME

__all__ = [
    "BACKEND",
    "BIT_WIDTHS",
    "FixedTensor",
    "QFormat",
    "conv1d",
    "conv2d",
    "conv2d_direct",
    "conv2d_via_conv1d",
    "dequantize",
    "dwsconv2d",
    "fake_quantize",
    "gemm",
    "product_format",
    "quantize",
    "requant_multiplier",
]


def _is_int(a: np.ndarray) -> bool:
    return np.issubdtype(a.dtype, np.integer)


def _operands(*arrays):
    arrs = [np.asarray(a) for a in arrays]
    if all(_is_int(a) for a in arrs):
        return [np.ascontiguousarray(a, dtype=np.int64) for a in arrs], True
    return [np.ascontiguousarray(a, dtype=np.float64) for a in arrs], False


def gemm(A, B, out_format: QFormat | None = None, *, backend=None):
    """``A @ B`` with exact integer or sequential float64 accumulation.

    With two ``FixedTensor`` operands the result is a ``FixedTensor`` in
    ``out_format`` (default: a format wide enough to never clamp).
    """
    impl = backend or _backend.impl
    if isinstance(A, FixedTensor) or isinstance(B, FixedTensor):
        if not (isinstance(A, FixedTensor) and isinstance(B, FixedTensor)):
            raise TypeError("mix of FixedTensor and plain operands")
        require_2d("A", A.codes)
        require_2d("B", B.codes)
        if A.shape[1] != B.shape[0]:
            raise ShapeMismatch(f"inner dimensions differ: {A.shape} x {B.shape}")
        fmt = out_format or product_format(A.qformat, B.qformat, A.shape[1])
        check_accumulator(A.shape[1], A.codes, B.codes)
        m0, shift = output_multiplier(A.qformat, B.qformat, fmt)
        out = np.zeros((A.shape[0], B.shape[1]), dtype=np.int64)
        impl.gemm_range_i(A.codes, B.codes, out, 0, out.size, m0, shift, -fmt.qmax, fmt.qmax)
        return FixedTensor(out.shape, out, fmt)
    (a, b), integer = _operands(A, B)
    require_2d("A", a)
    require_2d("B", b)
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"inner dimensions differ: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=a.dtype)
    if integer:
        check_accumulator(a.shape[1], a, b)
        impl.gemm_range_i(a, b, out, 0, out.size)
    else:
        impl.gemm_range_f(a, b, out, 0, out.size)
    return out


def conv1d(x, k, *, backend=None) -> np.ndarray:
    """Valid-mode cross-correlation ``y[t] = sum_j x[t+j] * k[j]``."""
    impl = backend or _backend.impl
    (xs, ks), integer = _operands(x, k)
    if xs.ndim != 1 or ks.ndim != 1:
        raise ShapeMismatch("conv1d takes 1-D input and kernel")
    if ks.size < 1:
        raise ShapeMismatch("empty kernel")
    if ks.size > xs.size:
        raise KernelLongerThanInput(f"kernel length {ks.size} > input length {xs.size}")
    out = np.zeros(xs.size - ks.size + 1, dtype=xs.dtype)
    if integer:
        check_accumulator(ks.size, xs, ks)
        impl.conv1d_i(xs, ks, out)
    else:
        impl.conv1d_f(xs, ks, out)
    return out


def conv2d_direct(x, k) -> np.ndarray:
    """Textbook valid-mode 2-D cross-correlation (reference implementation)."""
    (xs, ks), _ = _operands(x, k)
    if xs.ndim != 2 or ks.ndim != 2:
        raise ShapeMismatch("conv2d_direct takes 2-D input and kernel")
    kh, kw = ks.shape
    h, w = xs.shape
    if kh < 1 or kw < 1 or kh > h or kw > w:
        raise ShapeMismatch(f"kernel {ks.shape} does not fit input {xs.shape}")
    ho, wo = h - kh + 1, w - kw + 1
    out = np.zeros((ho, wo), dtype=xs.dtype)
    for i in range(ho):
        for j in range(wo):
            out[i, j] = (xs[i : i + kh, j : j + kw] * ks).sum()
    return out


def conv2d_via_conv1d(x, u, v, *, backend=None) -> np.ndarray:
    """2-D cross-correlation with the rank-1 kernel ``outer(u, v)``.

    Every row is filtered with ``v``, then every column of that result with ``u``.
    """
    (xs, us, vs), _ = _operands(x, u, v)
    if xs.ndim != 2 or us.ndim != 1 or vs.ndim != 1:
        raise ShapeMismatch("expected a 2-D input and 1-D factors u, v")
    if us.size < 1 or vs.size < 1 or us.size > xs.shape[0] or vs.size > xs.shape[1]:
        raise ShapeMismatch(f"factors ({us.size}, {vs.size}) do not fit input {xs.shape}")
    rows = np.stack([conv1d(row, vs, backend=backend) for row in xs])
    cols = [conv1d(np.ascontiguousarray(rows[:, j]), us, backend=backend) for j in range(rows.shape[1])]
    return np.stack(cols, axis=1)


def dwsconv2d(x, dw_kernels, pw_kernel, *, backend=None) -> np.ndarray:
    """Depthwise-separable convolution from 1-D primitives.

    ``x`` is ``C x H x W``; ``dw_kernels`` holds one ``(u, v)`` factor pair per
    channel; ``pw_kernel`` is ``C x K``.  Returns ``K x H' x W'``.
    """
    xs = np.asarray(x)
    pw = np.asarray(pw_kernel)
    if xs.ndim != 3:
        raise ShapeMismatch(f"input must be C x H x W, got {xs.shape}")
    c = xs.shape[0]
    if len(dw_kernels) != c:
        raise ChannelCountMismatch(f"{len(dw_kernels)} depthwise kernels for {c} channels")
    if pw.ndim != 2 or pw.shape[0] != c:
        raise ChannelCountMismatch(f"pointwise kernel must have {c} rows, got shape {pw.shape}")
    sizes = {(len(u), len(v)) for u, v in dw_kernels}
    if len(sizes) != 1:
        raise ShapeMismatch(f"depthwise kernels differ in size: {sorted(sizes)}")
    dw = [conv2d_via_conv1d(xs[ch], u, v, backend=backend) for ch, (u, v) in enumerate(dw_kernels)]
    integer = all(_is_int(d) for d in dw) and _is_int(pw)
    dtype = np.int64 if integer else np.float64
    pw = pw.astype(dtype)
    out = np.zeros((pw.shape[1],) + dw[0].shape, dtype=dtype)
    for k in range(pw.shape[1]):
        acc = np.zeros(dw[0].shape, dtype=dtype)
        for ch in range(c):
            acc = acc + dw[ch].astype(dtype) * pw[ch, k]
        out[k] = acc
    return out


def conv2d(x, w, *, backend=None) -> np.ndarray:
    """Multi-channel valid cross-correlation: ``C x H x W`` with ``F x C x kh x kw``."""
    impl = backend or _backend.impl
    (xs, ws), integer = _operands(x, w)
    if xs.ndim != 3 or ws.ndim != 4:
        raise ShapeMismatch("conv2d takes C x H x W input and F x C x kh x kw weights")
    if ws.shape[1] != xs.shape[0]:
        raise ChannelCountMismatch(f"weights expect {ws.shape[1]} channels, input has {xs.shape[0]}")
    ho, wo = xs.shape[1] - ws.shape[2] + 1, xs.shape[2] - ws.shape[3] + 1
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"kernel {ws.shape[2:]} does not fit input {xs.shape[1:]}")
    out = np.zeros((ws.shape[0], ho, wo), dtype=xs.dtype)
    if integer:
        check_accumulator(ws.shape[1] * ws.shape[2] * ws.shape[3], xs, ws)
        impl.conv_range_i(xs, ws, out, 0, out.size)
    else:
        impl.conv_range_f(xs, ws, out, 0, out.size)
    return out
