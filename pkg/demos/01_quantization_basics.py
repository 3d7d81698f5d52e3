#!/usr/bin/env python3
"""Walk through the quantization algebra on small tensors.

An integer tensor z with factor q stands for the real tensor q*z.  This
script quantizes a tensor, inspects the rounding behaviour, and shows how
addition and multiplication track the factor.
"""

import numpy as np

from quantnet import (
    QuantParams,
    QuantTensor,
    compute_qfactor,
    dequantize,
    qadd,
    qmul_accumulate,
    quantize,
    round_half_to_even,
)

print("=== rounding: half-to-even ===")
for v in (0.5, 1.5, 2.5, -2.5, 1.4999):
    print(f"  round({v:7}) -> {round_half_to_even(v)}")

print("\n=== quantize / dequantize ===")
r = np.array([0.0, 0.31, -0.87, 1.0, -1.0])
q = compute_qfactor(np.max(np.abs(r)), 8)   # max-abs calibration for p=8
z = quantize(r, q, 8)
print("  real      :", r)
print(f"  factor q  : {q:.6f}  (max-abs / (2^8 - 1))")
print("  integers  :", z.data)
print("  recovered :", np.round(dequantize(z), 6))
print("  max error :", np.max(np.abs(dequantize(z) - r)), "<= q/2 =", q / 2)

print("\n=== saturation at the precision range ===")
wild = np.array([5.0, -5.0, 500.0, -500.0])
z7 = quantize(wild, 1.0, 7)
print("  inputs    :", wild)
print("  p=7 range : [-128, 127]  ->", z7.data)

print("\n=== addition keeps the coarser factor ===")
a = QuantTensor(np.array([4, 100, -30]), QuantParams(0.5, 8))
b = QuantTensor(np.array([2, -50, 10]), QuantParams(1.0, 8))
s = qadd(a, b, 8)
print("  a = 0.5 *", a.data, "  b = 1.0 *", b.data)
print("  a + b =", s.factor, "*", s.data, "=", dequantize(s))

print("\n=== multiplication multiplies factors, accumulates wide ===")
w = QuantTensor(np.array([[127, -64], [3, 8]]), QuantParams(0.02, 7))
x = QuantTensor(np.array([[255], [-12]]), QuantParams(0.01, 8))
prod = qmul_accumulate(w, x)
print("  integer product:\n", prod.data)
print("  factor:", prod.factor, " precision:", prod.precision, "bits")
print("  real value:\n", dequantize(prod))
check = (0.02 * w.data) @ (0.01 * x.data)
print("  against real matmul:\n", check)
