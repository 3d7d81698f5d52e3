"""Symmetric per-tensor quantization algebra.

An integer tensor ``z`` together with a positive factor ``q`` represents the
real tensor ``q * z``.  ``quantize`` maps real values onto that integer grid
with round-half-to-even and saturation, ``dequantize`` maps back, and
``qadd`` / ``qmul_accumulate`` operate directly on quantized operands while
propagating the factor.  Everything here is a pure function over immutable
values; quantized data buffers must never be mutated in place.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ACCUMULATOR_BITS",
    "AccumulatorOverflow",
    "QuantParams",
    "QuantTensor",
    "compute_qfactor",
    "dequantize",
    "qadd",
    "qmul_accumulate",
    "quantize",
    "round_half_to_even",
]

# Bias and raw product-sums live in a signed 32-bit style accumulator.
ACCUMULATOR_BITS = 31


class AccumulatorOverflow(ArithmeticError):
    """A product or accumulated sum left the signed accumulator range."""


@dataclass(frozen=True)
class QuantParams:
    """Quantization factor (real units per integer step) and magnitude bits.

    ``precision`` p gives the representable integer range [-2^p, 2^p - 1].
    The pipeline uses p=8 for activations, p=7 for weights and p=31 for the
    accumulator/bias, but the math accepts any positive p.
    """

    factor: float
    precision: int

    def __post_init__(self) -> None:
        if not self.factor > 0:
            raise ValueError(f"quantization factor must be positive, got {self.factor!r}")
        if self.precision < 1:
            raise ValueError(f"precision must be a positive integer, got {self.precision!r}")

    @property
    def min_int(self) -> int:
        return -(1 << self.precision)

    @property
    def max_int(self) -> int:
        return (1 << self.precision) - 1


@dataclass(frozen=True)
class QuantTensor:
    """Integer tensor plus the parameters that map it back to real values."""

    data: np.ndarray
    params: QuantParams

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        if not np.issubdtype(data.dtype, np.integer):
            raise ValueError(f"quantized data must be integer, got dtype {data.dtype}")
        data = data.astype(np.int64, copy=False)
        if data.size and (data.min() < self.params.min_int or data.max() > self.params.max_int):
            raise ValueError(
                f"quantized values outside [{self.params.min_int}, {self.params.max_int}] "
                f"for precision {self.params.precision}"
            )
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def factor(self) -> float:
        return self.params.factor

    @property
    def precision(self) -> int:
        return self.params.precision


def round_half_to_even(x: float) -> int:
    """Nearest integer, with exact ties going to the even neighbour."""
    return int(np.rint(x))


def compute_qfactor(max_abs: float, precision: int) -> float:
    """Factor that maps [-max_abs, max_abs] onto the signed integer grid.

    An all-zero tensor has no scale of its own; every element quantizes to 0
    under any positive factor, so 1.0 is returned for max_abs == 0.
    """
    if max_abs < 0:
        raise ValueError(f"max_abs must be non-negative, got {max_abs!r}")
    if max_abs == 0:
        return 1.0
    return max_abs / float((1 << precision) - 1)


def quantize(values: np.ndarray, factor: float, precision: int) -> QuantTensor:
    """Map a real tensor onto the integer grid ``round(r / factor)``.

    Rounding is half-to-even; results saturate at [-2^p, 2^p - 1].
    """
    if not factor > 0:
        raise ValueError(f"quantization factor must be positive, got {factor!r}")
    params = QuantParams(float(factor), int(precision))
    real = np.asarray(values, dtype=np.float64)
    z = np.clip(np.rint(real / params.factor), params.min_int, params.max_int)
    return QuantTensor(z.astype(np.int64), params)


def dequantize(qt: QuantTensor) -> np.ndarray:
    """Recover the real tensor ``factor * z`` as float64."""
    return qt.factor * qt.data.astype(np.float64)


def qadd(a: QuantTensor, b: QuantTensor, out_precision: int) -> QuantTensor:
    """Add two quantized tensors: dequantize both, add, requantize.

    The sum keeps the coarser of the two factors, so neither operand's
    resolution is overstated; the caller picks the output precision.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    total = dequantize(a) + dequantize(b)
    return quantize(total, max(a.factor, b.factor), out_precision)


def qmul_accumulate(w: QuantTensor, x: QuantTensor) -> QuantTensor:
    """Integer tensor product with exact factor product.

    The raw integer contraction is kept unrounded in a wide accumulator and
    the factors multiply.  Operands are expected to hold 8-bit-ranged values;
    results that exceed the signed 32-bit accumulator raise instead of
    wrapping, since saturating hardware semantics are out of scope.
    """
    acc = w.data @ x.data
    params = QuantParams(w.factor * x.factor, ACCUMULATOR_BITS)
    _check_accumulator(acc)
    return QuantTensor(acc, params)


def _check_accumulator(acc: np.ndarray) -> None:
    lo = -(1 << ACCUMULATOR_BITS)
    hi = (1 << ACCUMULATOR_BITS) - 1
    if acc.size and (acc.min() < lo or acc.max() > hi):
        raise AccumulatorOverflow(
            f"integer accumulation outside [{lo}, {hi}]; operands too large for the accumulator"
        )
