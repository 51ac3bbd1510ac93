"""Float-free requantization arithmetic.

Every rescaling constant in the toolchain (the per-layer requantization
multiplier and the two scaled-integration factors) is frozen once as a
``FixedMult``: a signed 32-bit mantissa plus a right shift. Applying it to an
integer is then pure integer arithmetic, so results are bit-identical across
platforms and independent of the host FPU.

Rounding convention, used here and everywhere downstream: round half away
from zero. ``apply(m, 7)`` with value(m) == 0.5 gives 4, ``apply(m, -7)``
gives -4.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

NORM_LOW = 1 << 30   # normalized mantissa magnitude range: [2^30, 2^31)
NORM_HIGH = 1 << 31
MAX_SHIFT = 62

# Largest |x| for which x * mantissa stays safely inside int64 even after the
# rounding-half offset is added. Above this the array path falls back to
# Python big ints.
_VEC_LIMIT = 1 << 31


class FixedPointError(ValueError):
    """Raised for unrepresentable constants or malformed (mantissa, shift)."""


@dataclass(frozen=True)
class FixedMult:
    """A real multiplier frozen as ``mantissa * 2**-shift``.

    Invariant: mantissa == 0, or 2^30 <= |mantissa| < 2^31 whenever the shift
    headroom allows (tiny constants near 2^-62 may be stored denormalized).
    """

    mantissa: int
    shift: int

    def __post_init__(self) -> None:
        if not isinstance(self.mantissa, int) or not isinstance(self.shift, int):
            raise FixedPointError("mantissa and shift must be Python ints")
        if not 0 <= self.shift <= MAX_SHIFT:
            raise FixedPointError(f"shift {self.shift} outside [0, {MAX_SHIFT}]")
        if abs(self.mantissa) >= NORM_HIGH:
            raise FixedPointError("mantissa does not fit in a signed 32-bit word")

    def value(self) -> Fraction:
        """Exact rational value of the constant."""
        return Fraction(self.mantissa, 1 << self.shift)

    def real(self) -> float:
        return self.mantissa / (1 << self.shift)

    def is_normalized(self) -> bool:
        return self.mantissa == 0 or NORM_LOW <= abs(self.mantissa) < NORM_HIGH


def from_real(r: float) -> FixedMult:
    """Freeze a real constant, |r| < 2^31, with relative error < 2^-30.

    The mantissa is maximized (normalized) so the stated accuracy holds for
    any |r| >= 2^-31; smaller magnitudes degrade gracefully down to a flat
    zero below ~2^-63.
    """
    r = float(r)
    if not math.isfinite(r):
        raise FixedPointError(f"constant must be finite, got {r!r}")
    if r == 0.0:
        return FixedMult(0, 0)
    if abs(r) >= float(NORM_HIGH):
        raise FixedPointError(f"constant {r!r} out of range (|r| < 2^31)")
    _, exp = math.frexp(r)          # |r| = m * 2^exp, 0.5 <= m < 1
    shift = 31 - exp
    if shift > MAX_SHIFT:
        shift = MAX_SHIFT           # denormal tail for very small constants
    if shift < 0:
        raise FixedPointError(f"constant {r!r} out of range after normalization")
    mantissa = round(r * (1 << shift))  # r * 2^shift is exact in binary64
    if abs(mantissa) >= NORM_HIGH:
        # Rounding crossed the power-of-two boundary; renormalize.
        if shift == 0:
            raise FixedPointError(f"constant {r!r} rounds out of range")
        mantissa //= 2
        shift -= 1
    return FixedMult(mantissa, shift)


def apply(m: FixedMult, x: int | np.ndarray) -> int | np.ndarray:
    """Exact round-half-away-from-zero of ``x * mantissa / 2**shift``.

    Accepts a Python int (arbitrary width) or an integer ndarray. The array
    path runs vectorized in int64 when magnitudes allow and falls back to
    exact big-int arithmetic otherwise.
    """
    if isinstance(x, np.ndarray):
        return _apply_array(m, x)
    p = int(x) * m.mantissa
    half = (1 << m.shift) >> 1
    if p >= 0:
        return (p + half) >> m.shift
    return -((-p + half) >> m.shift)


def _apply_array(m: FixedMult, x: np.ndarray) -> np.ndarray:
    xi = np.asarray(x)
    if xi.dtype != np.int64:
        xi = xi.astype(np.int64)
    if xi.size and int(np.abs(xi).max()) >= _VEC_LIMIT:
        flat = [apply(m, int(v)) for v in xi.reshape(-1)]
        return np.array(flat, dtype=object if _needs_object(flat) else np.int64).reshape(xi.shape)
    prod = xi * np.int64(m.mantissa)            # |prod| <= 2^62, exact
    half = np.int64((1 << m.shift) >> 1)
    mag = (np.abs(prod) + half) >> np.int64(m.shift)
    return np.sign(prod) * mag


def _needs_object(values: list) -> bool:
    bound = 1 << 62
    return any(abs(v) > bound for v in values)


def saturate(x: int, width: int) -> tuple[int, bool]:
    """Clamp x to the signed `width`-bit range; flag whether clamping fired."""
    lo = -(1 << (width - 1))
    hi = (1 << (width - 1)) - 1
    if x < lo:
        return lo, True
    if x > hi:
        return hi, True
    return int(x), False


def saturate_array(x: np.ndarray, width: int) -> tuple[np.ndarray, int]:
    """Vectorized saturate; returns (clamped array, number of clamp events)."""
    lo = -(1 << (width - 1))
    hi = (1 << (width - 1)) - 1
    out = np.clip(x, lo, hi)
    events = int(np.count_nonzero(x != out))
    return out, events
