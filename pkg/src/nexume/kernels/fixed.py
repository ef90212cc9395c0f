"""Symmetric fixed-point formats and integer requantization."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import InvalidBitWidth, NonPositiveScale, ShapeMismatch

BIT_WIDTHS = (16, 12, 8, 4)


@dataclass(frozen=True)
class QFormat:
    """``bits``-wide symmetric codes mapping ``+-qmax`` onto ``+-scale``."""

    bits: int
    scale: float

    def __post_init__(self):
        if self.bits not in BIT_WIDTHS:
            raise InvalidBitWidth(f"bit width {self.bits} not in {BIT_WIDTHS}")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise NonPositiveScale(f"scale must be positive and finite, got {self.scale}")

    @property
    def qmax(self) -> int:
        return (1 << (self.bits - 1)) - 1

    @property
    def step(self) -> float:
        return self.scale / self.qmax


@dataclass(frozen=True, eq=False)
class FixedTensor:
    shape: tuple[int, ...]
    codes: np.ndarray  # int64, row-major, reshaped to ``shape``
    qformat: QFormat

    def __post_init__(self):
        codes = np.ascontiguousarray(self.codes, dtype=np.int64).reshape(self.shape)
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if codes.size and int(np.abs(codes).max()) > self.qformat.qmax:
            raise ValueError(f"code outside +-{self.qformat.qmax}")

    def __eq__(self, other):
        if not isinstance(other, FixedTensor):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.qformat == other.qformat
            and np.array_equal(self.codes, other.codes)
        )

    __hash__ = None

    def dequantize(self) -> np.ndarray:
        return dequantize(self)


def quantize(values, bits: int, scale: float) -> FixedTensor:
    """Round-half-to-even onto the symmetric grid, clamping out-of-range values."""
    fmt = QFormat(bits, scale)
    v = np.asarray(values, dtype=np.float64)
    codes = np.clip(np.rint(v / scale * fmt.qmax), -fmt.qmax, fmt.qmax).astype(np.int64)
    return FixedTensor(v.shape, codes, fmt)


def dequantize(t: FixedTensor) -> np.ndarray:
    return t.codes * t.qformat.scale / t.qformat.qmax


def fake_quantize(values, bits: int, scale: float | None = None) -> np.ndarray:
    """``dequantize(quantize(values))`` with ``scale`` defaulting to max |value|."""
    v = np.asarray(values, dtype=np.float64)
    if scale is None:
        scale = float(np.abs(v).max()) if v.size else 0.0
    if scale == 0.0:
        return v.copy()
    return dequantize(quantize(v, bits, scale))


def requant_multiplier(real: float) -> tuple[int, int]:
    """Express ``real`` as ``m0 * 2**-shift`` with a 31-bit mantissa ``m0``."""
    if not (real > 0 and math.isfinite(real)):
        raise NonPositiveScale(f"requantization multiplier must be positive, got {real}")
    frac, exp = math.frexp(real)
    m0 = int(round(frac * (1 << 31)))
    if m0 == 1 << 31:
        m0 //= 2
        exp += 1
    return m0, 31 - exp


def product_format(a: QFormat, b: QFormat, depth: int) -> QFormat:
    """Output format that can hold any ``depth``-term dot product without clamping."""
    return QFormat(max(a.bits, b.bits), a.scale * b.scale * max(depth, 1))


def output_multiplier(a: QFormat, b: QFormat, out: QFormat) -> tuple[int, int]:
    return requant_multiplier(a.step * b.step / out.step)


def check_accumulator(depth: int, *operands: np.ndarray) -> None:
    """Raise if a ``depth``-term sum of products could leave int64."""
    from ..errors import AccumulatorOverflow

    bound = depth
    for op in operands:
        bound *= int(np.abs(op).max()) if op.size else 0
    if bound > (1 << 63) - 1:
        raise AccumulatorOverflow(
            f"worst-case accumulator {bound} exceeds int64; rescale the operands"
        )


def require_2d(name: str, m: np.ndarray) -> None:
    if m.ndim != 2:
        raise ShapeMismatch(f"{name} must be 2-D, got shape {m.shape}")
