"""Dyadic-rational approximation of rescale ratios and integer requantization.

A :class:`DyadicScale` ``(b, c)`` stands for the rational ``b / 2**c``.
Multiplying an INT32 accumulator by it needs one 64-bit integer multiply and
one rounded right shift, so every rescale in the inference path stays inside
integer arithmetic: no division, no floating point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import DomainError

MANTISSA_BITS = 31
MAX_EXPONENT = 62

_INT32_MAX = (1 << 31) - 1


@dataclass(frozen=True)
class DyadicScale:
    b: int
    c: int

    def __post_init__(self):
        if not 0 < self.b < (1 << 31):
            raise DomainError(f"mantissa {self.b} outside (0, 2^31)")
        if not 0 <= self.c <= MAX_EXPONENT:
            raise DomainError(f"exponent {self.c} outside [0, {MAX_EXPONENT}]")
        object.__setattr__(self, "b", int(self.b))
        object.__setattr__(self, "c", int(self.c))

    @property
    def value(self) -> float:
        """Float view of b / 2^c; for reporting only, never the compute path."""
        return self.b / float(1 << self.c)


def dn(x) -> DyadicScale:
    """Best 31-bit-mantissa dyadic approximation of a positive ratio.

    Exactly-dyadic inputs (``k / 2**m`` with ``k < 2**31``) come back exact
    and reduced; everything else lands within a relative error of ``2**-31``.
    """
    x = float(x)
    if not math.isfinite(x) or x <= 0.0:
        raise DomainError(f"dyadic ratio must be finite and positive, got {x}")
    if x >= (1 << 31) - 0.5:
        raise DomainError(f"ratio {x} too large for a 31-bit mantissa")
    m, e = math.frexp(x)  # x = m * 2**e with m in [0.5, 1)
    c = MANTISSA_BITS - e
    if c > MAX_EXPONENT:
        # Tiny ratio: pin the exponent and keep whatever mantissa bits remain.
        c = MAX_EXPONENT
        b = int(math.floor(x * float(1 << c) + 0.5))
        if b == 0:
            raise DomainError(f"ratio {x} underflows a {MAX_EXPONENT}-bit exponent")
    else:
        b = int(math.floor(m * float(1 << MANTISSA_BITS) + 0.5))
        if b == (1 << MANTISSA_BITS):  # mantissa rounded up to 2^31
            b >>= 1
            c -= 1
    while (b & 1) == 0 and c > 0:
        b >>= 1
        c -= 1
    return DyadicScale(b, c)


def requantize(acc, s: DyadicScale, counter=None) -> int:
    """round(acc * b / 2^c) using only integer multiply, add, and shift.

    The 64-bit product plus a sign-adjusted rounding offset keeps the shift
    exact; ties round away from zero to match the quantizer.
    """
    t = int(acc) * s.b
    if s.c == 0:
        out = t
    else:
        offset = 1 << (s.c - 1)
        if t >= 0:
            out = (t + offset) >> s.c
        else:
            out = -((-t + offset) >> s.c)
    if counter is not None:
        counter.count_requant(1)
    return out


def requantize_clamped(acc, s: DyadicScale, bits, relu_zero=None, counter=None) -> int:
    """Requantize then saturate to the signed range of ``bits``.

    ``relu_zero`` raises the lower clamp to the code of real zero, which is
    how a fused ReLU behaves at an asymmetric activation site.
    """
    q = requantize(acc, s, counter)
    lo = -(1 << (bits - 1))
    hi = (1 << (bits - 1)) - 1
    if relu_zero is not None:
        lo = max(lo, int(relu_zero))
    if counter is not None:
        counter.count_cmp(2)
    if q < lo:
        return lo
    if q > hi:
        return hi
    return q
