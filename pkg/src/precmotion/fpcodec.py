"""Minifloat formats and the quantize-dequantize codec.

A format ``EeMm`` has one sign bit, ``e`` exponent bits and ``m`` mantissa
bits. The exponent bias is ``2**(e-1) - 1`` and subnormals are supported.
Every exponent code encodes finite values (no inf/NaN codes), so magnitudes
beyond the largest finite value saturate instead of overflowing.

Rounding is round-to-nearest with ties to the even mantissa.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numba import njit

MIN_EXPONENT_BITS = 2
MAX_EXPONENT_BITS = 8
MAX_TOTAL_BITS = 32
ORACLE_MAX_BITS = 12

# Bitwidths the combinatorial search space is built from, with the splits
# allowed at 16 and 32 bits pinned to the hardware-supported ones.
SPACE_BITWIDTHS = (4, 5, 6, 8, 10, 16, 32)
_PINNED_SPLITS = {16: ((5, 10), (8, 7)), 32: ((8, 23),)}

_FORMAT_RE = re.compile(r"^\s*E(\d+)M(\d+)\s*$", re.IGNORECASE)


class InvalidFormat(ValueError):
    pass


class FormatTooWide(ValueError):
    pass


@dataclass(frozen=True, order=True)
class FpFormat:
    exponent_bits: int
    mantissa_bits: int

    def __post_init__(self):
        e, m = self.exponent_bits, self.mantissa_bits
        if not (MIN_EXPONENT_BITS <= e <= MAX_EXPONENT_BITS):
            raise InvalidFormat(f"exponent_bits must be in [2, 8], got {e}")
        if m < 1:
            raise InvalidFormat(f"mantissa_bits must be >= 1, got {m}")
        if 1 + e + m > MAX_TOTAL_BITS:
            raise InvalidFormat(f"E{e}M{m} is wider than 32 bits")

    @property
    def total_bits(self) -> int:
        return 1 + self.exponent_bits + self.mantissa_bits

    @property
    def bias(self) -> int:
        return 2 ** (self.exponent_bits - 1) - 1

    @property
    def min_exponent(self) -> int:
        """Unbiased exponent of the smallest normal (shared by subnormals)."""
        return 1 - self.bias

    @property
    def max_exponent(self) -> int:
        return (2**self.exponent_bits - 1) - self.bias

    @cached_property
    def max_finite(self) -> float:
        return math.ldexp(2.0 - math.ldexp(1.0, -self.mantissa_bits), self.max_exponent)

    @property
    def min_subnormal(self) -> float:
        return math.ldexp(1.0, self.min_exponent - self.mantissa_bits)

    @property
    def packing_factor(self) -> int:
        return 32 // self.total_bits

    @property
    def is_identity(self) -> bool:
        """True for E8M23, which reproduces every finite float32 exactly."""
        return self.exponent_bits == 8 and self.mantissa_bits == 23

    @property
    def name(self) -> str:
        return f"E{self.exponent_bits}M{self.mantissa_bits}"

    @property
    def label(self) -> str:
        return f"FP{self.total_bits} ({self.name})"

    def __str__(self) -> str:
        return self.name


FP32 = FpFormat(8, 23)


def make_format(exponent_bits: int, mantissa_bits: int) -> FpFormat:
    return FpFormat(int(exponent_bits), int(mantissa_bits))


def parse_format(text: str | FpFormat) -> FpFormat:
    """Parse ``"E<e>M<m>"`` (case-insensitive)."""
    if isinstance(text, FpFormat):
        return text
    match = _FORMAT_RE.match(str(text))
    if match is None:
        raise InvalidFormat(f"cannot parse format {text!r}; expected E<e>M<m>")
    return make_format(int(match.group(1)), int(match.group(2)))


def splits_at(bitwidth: int) -> list[FpFormat]:
    """Every valid (E, M) split with ``1 + E + M == bitwidth``, by exponent."""
    out = []
    for e in range(MIN_EXPONENT_BITS, MAX_EXPONENT_BITS + 1):
        m = bitwidth - 1 - e
        if m >= 1 and bitwidth <= MAX_TOTAL_BITS:
            out.append(FpFormat(e, m))
    return out


def enumerate_formats() -> list[FpFormat]:
    """The 21-format search space, ordered by total bits then exponent bits."""
    formats = []
    for bits in SPACE_BITWIDTHS:
        if bits in _PINNED_SPLITS:
            formats.extend(FpFormat(e, m) for e, m in _PINNED_SPLITS[bits])
        else:
            formats.extend(splits_at(bits))
    return sorted(formats, key=lambda f: (f.total_bits, f.exponent_bits))


def formats_at_or_above(space: list[FpFormat], min_bits: int) -> list[FpFormat]:
    if not 4 <= min_bits <= 32:
        raise ValueError(f"min_bits must be in [4, 32], got {min_bits}")
    return [f for f in space if f.total_bits >= min_bits]


@njit(cache=True)
def _quantize_scalar(x, mantissa_bits, min_exponent, max_finite):
    if x != x:
        return x
    a = abs(x)
    if a == 0.0:
        return x
    if a >= max_finite:
        return math.copysign(max_finite, x)
    _, e = math.frexp(a)
    exponent = e - 1
    if exponent < min_exponent:
        exponent = min_exponent
    scale = math.ldexp(1.0, mantissa_bits - exponent)
    q = np.rint(a * scale) / scale
    if q > max_finite:
        q = max_finite
    return math.copysign(q, x)


@njit(cache=True)
def _quantize_flat(flat, mantissa_bits, min_exponent, max_finite):
    for i in range(flat.size):
        flat[i] = _quantize_scalar(np.float64(flat[i]), mantissa_bits, min_exponent, max_finite)


def quantize(value: float, fmt: FpFormat) -> float:
    """Round ``value`` to the nearest value representable in ``fmt``."""
    return float(
        _quantize_scalar(float(value), fmt.mantissa_bits, fmt.min_exponent, fmt.max_finite)
    )


def quantize_tensor(values: np.ndarray, fmt: FpFormat) -> np.ndarray:
    """Quantize-dequantize ``values`` in place and return it.

    E8M23 is a no-op on float32 arrays. Arrays must be C-contiguous float32
    or float64.
    """
    if values.size == 0 or (fmt.is_identity and values.dtype == np.float32):
        return values
    flat = values.reshape(-1)
    if not np.shares_memory(flat, values):
        raise ValueError("quantize_tensor needs a contiguous array")
    _quantize_flat(flat, fmt.mantissa_bits, fmt.min_exponent, fmt.max_finite)
    return values


def representable_values(fmt: FpFormat) -> list[float]:
    """All nonnegative finite values of ``fmt``, ascending (index == code)."""
    if fmt.total_bits > ORACLE_MAX_BITS:
        raise FormatTooWide(f"{fmt.name} has {fmt.total_bits} bits; oracle limit is 12")
    values = []
    mant_scale = 2**fmt.mantissa_bits
    for exp_code in range(2**fmt.exponent_bits):
        for mant in range(mant_scale):
            if exp_code == 0:
                values.append(math.ldexp(mant / mant_scale, fmt.min_exponent))
            else:
                values.append(math.ldexp(1.0 + mant / mant_scale, exp_code - fmt.bias))
    return values


def data_movement_model(element_count: int, fmt: FpFormat) -> float:
    """Bytes moved when ``element_count`` values are packed into 32-bit words."""
    if element_count < 0:
        raise ValueError("element_count must be nonnegative")
    return element_count * 4 / fmt.packing_factor
