#!/usr/bin/env python3
"""Drive the command-line workflow: optimize, calibrate, benchmark, compare.

Everything runs in a temporary directory; this is the scripted equivalent of
calling the 'quantnet' executable by hand.
"""

import json
import subprocess
import sys
import tempfile
from pathlib import Path

import numpy as np

import quantnet as qn
from quantnet.data import make_synthetic, write_batch_dir, write_labeled_dataset

root = Path(__file__).parent.parent
work = Path(tempfile.mkdtemp(prefix="quantnet-demo-"))
print("working in", work)

fp32_model = root / "tests" / "fixtures" / "tinynet.model"

calib_x, _ = make_synthetic("calib", 96)
write_batch_dir(work / "calib", [calib_x[i:i + 32] for i in range(0, 96, 32)])
test_x, test_y = make_synthetic("test", 256)
write_labeled_dataset(work / "labeled", test_x, test_y)


def run(*args):
    cmd = [sys.executable, "-m", "quantnet.cli", *map(str, args)]
    print("\n$ quantnet " + " ".join(map(str, args)))
    result = subprocess.run(cmd, capture_output=True, text=True)
    print(result.stdout.rstrip())
    if result.returncode != 0:
        print(result.stderr.rstrip())
        raise SystemExit(result.returncode)


run("optimize", "--model", fp32_model, "-o", work / "opt.model",
    "--report", work / "passes.json")
run("calibrate", "--model", work / "opt.model", "--calib-dir", work / "calib",
    "-o", work / "quant.model")
run("benchmark", "--model", work / "opt.model", "--batch", "32", "--iters", "5",
    "--report", work / "bench_fp32.json")
run("benchmark", "--model", work / "quant.model", "--precision", "int8",
    "--batch", "32", "--iters", "5", "--report", work / "bench_int8.json")
run("compare", "--model", work / "opt.model", "--quant-model", work / "quant.model",
    "--labels", work / "labeled" / "index.txt", "--metric", "top1",
    "--report", work / "compare.json")

passes = json.loads((work / "passes.json").read_text())
print("\nnode/mac trend across the pipeline:")
for entry in passes:
    print(f"  {entry['pass']:26s} nodes {entry['nodes_before']:>3d} -> {entry['nodes_after']:>3d}"
          f"   macs {entry['macs_before']:>8d} -> {entry['macs_after']:>8d}")

fp = json.loads((work / "bench_fp32.json").read_text())
i8 = json.loads((work / "bench_int8.json").read_text())
print(f"\nmedian latency fp32: {fp['median_latency_ms']:.2f} ms "
      f"({fp['throughput_ips']:.0f} images/s)")
print(f"median latency int8: {i8['median_latency_ms']:.2f} ms "
      f"({i8['throughput_ips']:.0f} images/s)")
print("(integer kernels here are plain numpy; the op-count reduction is the "
      "portable signal, absolute speed is not)")

cmp_report = json.loads((work / "compare.json").read_text())
print(f"\ntop-1 fp32 {cmp_report['accuracy_a'] * 100:.2f}% vs "
      f"int8 {cmp_report['accuracy_b'] * 100:.2f}% "
      f"(delta {cmp_report['delta_pp']:+.2f} pp)")
