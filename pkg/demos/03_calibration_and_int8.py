#!/usr/bin/env python3
"""End-to-end low-precision flow on the checked-in trained classifier.

Loads the FP32 model, optimizes the graph, calibrates per-tensor factors on
sample data, then compares FP32 and INT8 accuracy on a 1000-sample synthetic
test set.
"""

from pathlib import Path

import numpy as np

import quantnet as qn
from quantnet.data import make_synthetic

model_path = Path(__file__).parent.parent / "tests" / "fixtures" / "tinynet.model"
g = qn.load_model(model_path)
print(f"loaded {g.name}: {len(g.nodes)} layers, {len(g.weights)} weight tensors")

optimized, reports = qn.optimize_pipeline(g)
print("after optimization:", len(optimized.nodes), "layers "
      f"({', '.join(r.name for r in reports if r.nodes_after < r.nodes_before)})")

calib_x, _ = make_synthetic("calib", 128)
stats = qn.collect_stats(optimized, [calib_x[i:i + 32] for i in range(0, 128, 32)])
table = qn.build_table(optimized, stats)
print(f"\ncalibration table ({len(table.entries)} entries, "
      f"{len(table.fallback_edges)} fallback edges):")
for entry in table.entries.values():
    print(f"  {entry.name:12s} role={entry.role:10s} p={entry.precision:<2d} q={entry.factor:.6g}")

execution = qn.plan(optimized, table)
tags = {s.node: s.precision for s in execution.steps if s.op == "layer"}
print("\nlayer precisions:", tags)

test_x, test_y = make_synthetic("test", 1000)


def evaluate(runner):
    logits = np.concatenate([
        runner(test_x[i:i + 250]).outputs["logits"].reshape(-1, 10)
        for i in range(0, len(test_x), 250)
    ])
    return logits, float(np.mean(logits.argmax(1) == test_y)) * 100


fp_logits, fp_acc = evaluate(lambda b: qn.run_fp32(optimized, b))
i8_logits, i8_acc = evaluate(lambda b: qn.run_int8(execution, optimized, b))

print(f"\nfp32 top-1: {fp_acc:.2f}%")
print(f"int8 top-1: {i8_acc:.2f}%")
print(f"delta     : {fp_acc - i8_acc:+.3f} percentage points")
print(f"max logit difference: {np.abs(fp_logits - i8_logits).max():.4f}")

# the same comparison through the report API
rep_fp = qn.run_fp32(optimized, test_x[:250])
rep_i8 = qn.run_int8(execution, optimized, test_x[:250])
summary = qn.compare_runs(rep_fp, rep_i8, "top1", labels=test_y[:250])
print("\ncompare_runs:", summary)
