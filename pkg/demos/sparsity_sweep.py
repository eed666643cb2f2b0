"""
Rank, bit-width and sparsity trade-offs
=======================================

Sweep a small grid on a synthetic layer and keep the configurations that
no other configuration beats on both compression ratio and error.
"""
import sys

from qspca.factorizer import CalibrationSet, FixedIterations, SolverConfig
from qspca.pipeline import synthetic_layer
from qspca.sweep import run_sweep, write_csv

W, X, Y, spec = synthetic_layer(seed=1)
cal = CalibrationSet.from_arrays(X, Y, spec)

rows = run_sweep(W, cal, d=16, ks=[4, 8, 12], b_zs=[3, 4, 6], es=[0.0, 0.2, 0.4],
                 solver=SolverConfig(thresholding="iterative", stopping=FixedIterations(10)))

print(f"{len(rows)} configurations, {sum(r.pareto for r in rows)} on the front\n")
front = sorted((r for r in rows if r.pareto), key=lambda r: r.compression_ratio)
for r in front:
    print(f"k={r.k:2d} b_z={r.b_z} e={r.e:.1f}   C_r {r.compression_ratio:6.2f}   held-out MSE {r.mse:8.3f}")

# the same rows as CSV
print()
write_csv(front, sys.stdout)
