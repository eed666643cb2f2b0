"""
Hard thresholding as a projection
=================================

Numerical checks behind projected iterations onto s-sparse vectors:
the projection factor of 2, the (2L)^t envelope, and sparse recovery
from linear and one-bit measurements.
"""
import numpy as np

from qspca import lab

# H_s moves z at most twice as far from any s-sparse x as z itself is
worst, ratios = lab.projection_factor_check(trials=10_000, dim=32, s=4, return_all=True)
print(f"projection ratio: max {worst:.4f}, median {np.median(ratios):.4f} (bound 2)")

# an L-Lipschitz update followed by H_s contracts like (2L)^t
rng = np.random.default_rng(0)
x_star = lab.random_sparse(rng, 32, 4)
D = lab.SparseSetSpec(32, 4)
errs = lab.contraction_run(lab.scaling_law(x_star, 0.25), D, lab.hs(rng.standard_normal(32), 4), 10)
print("scaling law, L=0.25:", " ".join(f"{e:.1e}" for e in errs[::2]))

# the gradient step of a least-squares problem, L from power iteration
A = rng.standard_normal((32, 1024)) / 32
ev = np.linalg.eigvalsh(A @ A.T)
law = lab.linear_law(A, 2 / (ev.max() + ev.min()), x_star)
errs = lab.contraction_run(law, D, lab.hs(rng.standard_normal(32), 4), 20)
print(f"linear law, L={law.L:.3f}: error {errs[0]:.2e} -> {errs[-1]:.2e} after 20 steps")

# IHT: 5-sparse vectors in R^256 from 100 Gaussian measurements
hits = 0
for t in range(50):
    A, x = lab.gaussian_sparse_instance(lab.trial_rng(0, t), 256, 100, 5)
    hits += lab.iht_recover(A, A @ x, 5, x_true=x).final_error <= 1e-6
print(f"IHT exact recovery: {hits}/50")

# BIHT: only signs are measured, so the direction is all that is recovered
angles = []
for t in range(20):
    A, x = lab.gaussian_sparse_instance(lab.trial_rng(0, t), 128, 512, 4, normalize_rows=False)
    x /= np.linalg.norm(x)
    angles.append(lab.biht_recover(A, lab.one_bit_measure(A, x), 4, x_true=x).errors)
angles = np.median(np.array(angles), axis=0)
print(f"BIHT median angle: {angles[0]:.3f} rad at start, {angles[50]:.3f} after 50, {angles[-1]:.4f} after 200")
