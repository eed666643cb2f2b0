"""Iterative projection onto sparse sets.

Hard thresholding ``hs`` is the Euclidean projection onto the set of
``s``-sparse vectors.  Because it is a projection, for every sparse ``x``
and any ``z``::

    ||hs(z) - x|| <= ||z - x|| + ||hs(z) - z|| <= 2 ||z - x||

so an iteration ``x <- hs(x - delta(x))`` whose update map
``x - delta(x)`` is ``L``-Lipschitz stays inside the envelope
``||x_t - x*|| <= (2L)^t ||x_0 - x*||`` and converges when ``L < 1/2``.
The helpers below check this numerically and run the classic IHT and
binary IHT recovery algorithms.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "SparseSetSpec",
    "IterationLaw",
    "LawViolation",
    "hs",
    "projection_ratio",
    "projection_factor_check",
    "scaling_law",
    "linear_law",
    "power_iteration_norm",
    "contraction_run",
    "RecoveryResult",
    "iht_recover",
    "one_bit_measure",
    "angular_error",
    "biht_recover",
    "gaussian_sparse_instance",
    "trial_rng",
]


class LawViolation(ValueError):
    """An iteration law fails its stationarity or Lipschitz check."""


@dataclass(frozen=True)
class SparseSetSpec:
    n: int
    s: int

    def __post_init__(self):
        if not 1 <= self.s <= self.n:
            raise ValueError(f"need 1 <= s <= n, got s={self.s}, n={self.n}")

    def project(self, x):
        return hs(x, self.s)


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    """Independent stream per (seed, trial)."""
    return np.random.default_rng([seed, trial])


def hs(x, s: int) -> np.ndarray:
    """Keep the ``s`` largest-magnitude entries (ties: lowest index)."""
    x = np.asarray(x, dtype=np.float64)
    if not 0 <= s <= x.size:
        raise ValueError(f"sparsity s={s} outside [0, {x.size}]")
    out = np.zeros_like(x)
    if s:
        keep = np.argsort(-np.abs(x), kind="stable")[:s]
        out[keep] = x[keep]
    return out


def random_sparse(rng, n, s):
    x = np.zeros(n)
    support = rng.choice(n, size=s, replace=False)
    x[support] = rng.standard_normal(s)
    return x


# -- projection inequality ------------------------------------------------------


def projection_ratio(x, z, s) -> float:
    """``||hs(z) - x|| / ||z - x||``; 0 when ``z == x``."""
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    denom = np.linalg.norm(z - x)
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(hs(z, s) - x) / denom)


def projection_factor_check(trials=10_000, dim=32, s=4, seed=0, return_all=False, check=True):
    """Largest projection ratio over random sparse ``x`` and perturbed ``z``.

    ``z`` mixes a perturbation of ``x`` at a random scale with, in a third of
    trials, a fresh dense vector, so both near and far points are covered.
    """
    ratios = np.empty(trials)
    for t in range(trials):
        rng = trial_rng(seed, t)
        x = random_sparse(rng, dim, s)
        noise = rng.standard_normal(dim) * 10 ** rng.uniform(-3, 1)
        z = rng.standard_normal(dim) if t % 3 == 2 else x + noise
        ratios[t] = projection_ratio(x, z, s)
    worst = float(ratios.max()) if trials else 0.0
    if check and worst > 2 + 1e-12:
        raise AssertionError(f"projection ratio {worst} exceeds 2")
    return (worst, ratios) if return_all else worst


# -- contraction envelope -------------------------------------------------------


@dataclass
class IterationLaw:
    """Update ``x <- x - delta(x)`` with stationary point ``x_star``.

    ``L`` is the Lipschitz constant of ``psi(x) = x - delta(x)``.
    """

    delta: Callable[[np.ndarray], np.ndarray]
    x_star: np.ndarray
    L: float
    name: str = ""
    meta: dict = field(default_factory=dict)

    def psi(self, x):
        return x - self.delta(x)

    def verify(self, rng=None, samples=200, tol=1e-9):
        """Check ``delta(x*) = 0`` and sample the Lipschitz ratio of ``psi``."""
        rng = rng or np.random.default_rng(0)
        station = np.linalg.norm(self.delta(self.x_star))
        if station > 1e-12 * max(1.0, np.linalg.norm(self.x_star)):
            raise LawViolation(f"delta(x*) has norm {station:.3e}, expected 0")
        n = self.x_star.size
        worst = 0.0
        for _ in range(samples):
            a, b = rng.standard_normal(n), rng.standard_normal(n)
            gap = np.linalg.norm(a - b)
            worst = max(worst, np.linalg.norm(self.psi(a) - self.psi(b)) / gap)
        if worst > self.L * (1 + tol) + tol:
            raise LawViolation(f"sampled Lipschitz ratio {worst:.6g} exceeds L={self.L:.6g}")
        return worst


def scaling_law(x_star, L) -> IterationLaw:
    """``psi(x) = x* + L (x - x*)``: a contraction by exactly ``L``."""
    x_star = np.asarray(x_star, dtype=np.float64)
    return IterationLaw(lambda x: (1 - L) * (x - x_star), x_star, float(L), "scaling")


def power_iteration_norm(B, iterations=500, seed=0, tol=1e-13) -> float:
    """Spectral norm of ``B`` from power iteration on ``B^T B``."""
    B = np.asarray(B, dtype=np.float64)
    v = np.random.default_rng(seed).standard_normal(B.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iterations):
        w = B.T @ (B @ v)
        nrm = np.linalg.norm(w)
        if nrm == 0:
            return 0.0
        v = w / nrm
        new = np.sqrt(nrm)
        if abs(new - sigma) <= tol * new:
            sigma = new
            break
        sigma = new
    return float(np.linalg.norm(B @ v))


def linear_law(A, alpha, x_star, seed=0) -> IterationLaw:
    """Gradient step of ``||y - A^T x||^2`` with ``y`` chosen so ``x*`` is stationary.

    ``delta(x) = alpha A A^T (x - x*)``; ``L`` is the spectral norm of
    ``I - alpha A A^T``, estimated by power iteration.
    """
    A = np.asarray(A, dtype=np.float64)
    x_star = np.asarray(x_star, dtype=np.float64)
    G = alpha * (A @ A.T)
    forcing = G @ x_star
    L = power_iteration_norm(np.eye(len(G)) - G, seed=seed)
    return IterationLaw(lambda x: G @ x - forcing, x_star, L, "linear", {"alpha": alpha})


def contraction_run(law: IterationLaw, D: SparseSetSpec, x0, T: int, slack=1e-9, check=True):
    """Iterate ``x <- hs(psi(x))`` and return ``||x_t - x*||`` for ``t = 0..T``.

    Raises when the ``(2L)^t`` envelope is violated (beyond ``slack``).
    """
    if np.count_nonzero(law.x_star) > D.s:
        raise LawViolation(f"x* has {np.count_nonzero(law.x_star)} nonzeros, set allows {D.s}")
    x = np.asarray(x0, dtype=np.float64)
    errors = [float(np.linalg.norm(x - law.x_star))]
    for _ in range(T):
        x = D.project(law.psi(x))
        errors.append(float(np.linalg.norm(x - law.x_star)))
    errors = np.array(errors)
    if check:
        bound = (2 * law.L) ** np.arange(T + 1) * errors[0]
        bad = np.nonzero(errors > bound + slack)[0]
        if bad.size:
            t = int(bad[0])
            raise AssertionError(f"envelope violated at t={t}: {errors[t]:.6g} > {bound[t]:.6g}")
    return errors


# -- recovery -----------------------------------------------------------------------


@dataclass
class RecoveryResult:
    x: np.ndarray
    errors: np.ndarray = None  # per iterate, index 0 is the starting point

    @property
    def final_error(self) -> float:
        return float(self.errors[-1]) if self.errors is not None and len(self.errors) else float("nan")


def iht_recover(A, y, s, iterations=300, step=1.0, x0=None, x_true=None) -> RecoveryResult:
    """Iterative hard thresholding: ``x <- hs(x + step A^T (y - A x))``.

    With ``x_true`` the relative error ``||x - x_true|| / ||x_true||`` is
    traced.
    """
    A = np.asarray(A, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = A.shape[1]
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    track = x_true is not None
    if track:
        x_true = np.asarray(x_true, dtype=np.float64)
        ref = np.linalg.norm(x_true) or 1.0
        errors = [np.linalg.norm(x - x_true) / ref]
    if A.shape[0] == 0:
        return RecoveryResult(x, np.array(errors) if track else None)
    for _ in range(iterations):
        x = hs(x + step * (A.T @ (y - A @ x)), s)
        if track:
            errors.append(np.linalg.norm(x - x_true) / ref)
    return RecoveryResult(x, np.array(errors) if track else None)


def one_bit_measure(A, x) -> np.ndarray:
    """``sign(A x)`` with zero mapped to +1."""
    return np.where(np.asarray(A) @ np.asarray(x) >= 0, 1.0, -1.0)


def angular_error(x, x_true) -> float:
    """Angle in radians between ``x`` and ``x_true``; pi/2 for a zero ``x``."""
    nx, nt = np.linalg.norm(x), np.linalg.norm(x_true)
    if nx == 0 or nt == 0:
        return float(np.pi / 2)
    return float(np.arccos(np.clip(np.dot(x, x_true) / (nx * nt), -1.0, 1.0)))


def biht_recover(A, y_signs, s, iterations=200, step=1.0, x0=None, x_true=None) -> RecoveryResult:
    """Binary IHT: ``x <- hs(x + (step/m) A^T (y - sign(A x)))``, renormalized.

    One-bit measurements carry no scale, so the iterate is kept on the unit
    sphere and errors are angular.
    """
    A = np.asarray(A, dtype=np.float64)
    y = np.asarray(y_signs, dtype=np.float64)
    if not np.all(np.abs(y) == 1):
        raise ValueError("one-bit measurements must be +1 or -1")
    m, n = A.shape
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    track = x_true is not None
    errors = [angular_error(x, x_true)] if track else None
    for _ in range(iterations):
        x = hs(x + (step / m) * (A.T @ (y - np.sign(A @ x))), s)
        nrm = np.linalg.norm(x)
        if nrm > 0:
            x = x / nrm
        if track:
            errors.append(angular_error(x, x_true))
    return RecoveryResult(x, np.array(errors) if track else None)


def gaussian_sparse_instance(rng, n, m, s, normalize_rows=True):
    """Gaussian ``A`` (entries scaled by ``1/sqrt(m)``) and an ``s``-sparse ``x``."""
    A = rng.standard_normal((m, n))
    if normalize_rows and m:
        A /= np.sqrt(m)
    return A, random_sparse(rng, n, s)
