"""Millisecond time base and exact chunk-grid arithmetic."""

from __future__ import annotations

import math
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction

_MS = Decimal("0.001")


def round_ms(seconds: float | int | str) -> float:
    """Round a time in seconds to millisecond resolution, half-up."""
    return float(Decimal(str(seconds)).quantize(_MS, rounding=ROUND_HALF_UP))


def to_ms(seconds: float) -> int:
    return int(Decimal(str(seconds)).quantize(_MS, rounding=ROUND_HALF_UP) * 1000)


def as_fraction(value: float | int | str | Fraction) -> Fraction:
    if isinstance(value, Fraction):
        return value
    return Fraction(str(value))


def chunk_duration(fps: float, stride_k: int) -> Fraction:
    """Seconds covered by one chunk of ``stride_k`` frames."""
    return Fraction(stride_k) / as_fraction(fps)


def chunk_index(t: float, fps: float, stride_k: int) -> int:
    """Index ``i`` of the half-open chunk ``[i*k/fps, (i+1)*k/fps)`` containing ``t``.

    Computed on exact rationals from the millisecond value so grid
    boundaries never suffer float drift.
    """
    return math.floor(Fraction(to_ms(t), 1000) / chunk_duration(fps, stride_k))


def chunk_bounds(index: int, fps: float, stride_k: int) -> tuple[Fraction, Fraction]:
    delta = chunk_duration(fps, stride_k)
    return index * delta, (index + 1) * delta
