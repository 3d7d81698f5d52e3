"""Exact-rational reference for the quantization algebra.

Everything here works on ``fractions.Fraction`` so there is no floating-point
rounding anywhere; the library under test must agree with these results.
Deliberately independent of quantnet internals.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np


def round_half_even(x: Fraction) -> int:
    floor = x.numerator // x.denominator
    frac = x - floor
    half = Fraction(1, 2)
    if frac > half:
        return floor + 1
    if frac < half:
        return floor
    return floor if floor % 2 == 0 else floor + 1


def quantize_exact(values, factor, precision: int) -> np.ndarray:
    """Elementwise clamp(round_half_even(r / q)) in exact rational arithmetic."""
    q = Fraction(float(factor))
    lo, hi = -(1 << precision), (1 << precision) - 1
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    out = np.empty(flat.shape, dtype=np.int64)
    for i, v in enumerate(flat):
        z = round_half_even(Fraction(float(v)) / q)
        out[i] = min(max(z, lo), hi)
    return out.reshape(np.asarray(values).shape)


def dequantize_exact(z, factor) -> list[Fraction]:
    q = Fraction(float(factor))
    return [q * int(v) for v in np.asarray(z).reshape(-1)]


def add_exact(z1, q1, z2, q2, precision: int) -> tuple[np.ndarray, Fraction]:
    """Quantized addition: requantize the exact real sum at max(q1, q2)."""
    f1, f2 = Fraction(float(q1)), Fraction(float(q2))
    fm = max(f1, f2)
    lo, hi = -(1 << precision), (1 << precision) - 1
    a = np.asarray(z1).reshape(-1)
    b = np.asarray(z2).reshape(-1)
    out = np.empty(a.shape, dtype=np.int64)
    for i in range(a.size):
        total = f1 * int(a[i]) + f2 * int(b[i])
        out[i] = min(max(round_half_even(total / fm), lo), hi)
    return out.reshape(np.asarray(z1).shape), fm


def matmul_exact(z1, q1, z2, q2) -> tuple[np.ndarray, Fraction]:
    """Quantized multiplication: exact integer product, factors multiply."""
    acc = np.asarray(z1, dtype=object) @ np.asarray(z2, dtype=object)
    return np.asarray(acc, dtype=object), Fraction(float(q1)) * Fraction(float(q2))


def affine_int8_exact(weight, x, bias, qw, qx, qy=None, relu=True):
    """Whole quantized affine layer (y = W @ x + b) in exact rationals.

    Returns a dict with the quantized operands, the integer accumulator, the
    exact real output before requantization, and the requantized output when
    ``qy`` is given.
    """
    zw = quantize_exact(weight, qw, 7)
    zx = quantize_exact(x, qx, 8)
    acc = np.asarray(zw, dtype=object) @ np.asarray(zx, dtype=object)
    qacc = Fraction(float(qw)) * Fraction(float(qx))
    if bias is not None:
        zb = np.array(
            [min(max(round_half_even(Fraction(float(b)) / qacc), -(1 << 31)), (1 << 31) - 1)
             for b in np.asarray(bias, dtype=np.float64).reshape(-1)],
            dtype=object,
        )
        acc = acc + zb[:, None]
    else:
        zb = None
    y = [[qacc * int(v) for v in row] for row in acc]
    if relu:
        y = [[max(v, Fraction(0)) for v in row] for row in y]
    result = {"zw": zw, "zx": zx, "zb": zb, "acc": acc, "y_exact": y}
    if qy is not None:
        fy = Fraction(float(qy))
        zy = np.array(
            [[min(max(round_half_even(v / fy), -(1 << 8)), (1 << 8) - 1) for v in row]
             for row in y],
            dtype=np.int64,
        )
        result["zy"] = zy
    return result
