"""Quantized sparse PCA of a tile matrix by projected gradient descent.

The solver starts from the truncated SVD of the (centered) tile matrix,
runs Adam on the data-aware reconstruction loss

    (1/m) * sum_i || Y_i - conv([Cq Zq], X_i) ||_F^2

with straight-through gradients for the quantizers, and projects the
quantized latent onto the set of ``S``-sparse matrices with a hard
threshold, either after every step (``iterative``) or once at the end
(``one_shot``).
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .quantizer import (
    SIGNED,
    QuantConfig,
    QuantizedMatrix,
    fit_minmax_scales,
    quantize,
    ste_gradient_mask,
    to_fp16_scales,
)
from .tensor_core import (
    ConvSpec,
    ShapeError,
    TileMatrix,
    WeightTensor,
    lower_conv_batch,
    untile_reshape,
)

__all__ = [
    "SVDError",
    "FactorPair",
    "CalibrationSet",
    "FixedIterations",
    "ValidationPatience",
    "SolverConfig",
    "IterationRecord",
    "SolveTrace",
    "AdamState",
    "svd_init",
    "objective",
    "gradient",
    "adaptive_step",
    "hard_threshold_mask",
    "sparsity_target",
    "solve",
    "reconstruct",
]

log = logging.getLogger(__name__)

ONE_SHOT = "one_shot"
ITERATIVE = "iterative"


class SVDError(RuntimeError):
    pass


def default_c_config(bits=4, mode=SIGNED):
    return QuantConfig(bits, mode, "per_column")


def default_z_config(bits=4, mode=SIGNED):
    return QuantConfig(bits, mode, "per_row")


@dataclass(frozen=True)
class FactorPair:
    """Codebook ``C`` (d x k), latent ``Z`` (k x n) and the sparsity mask.

    ``C`` and ``Z`` are the raw (pre-quantization) parameters; the deployed
    factors are ``Cq`` and ``Zq * mask``.
    """

    C: np.ndarray
    Z: np.ndarray
    c_scales: np.ndarray
    z_scales: np.ndarray
    c_config: QuantConfig = field(default_factory=default_c_config)
    z_config: QuantConfig = field(default_factory=default_z_config)
    mask: np.ndarray = None

    def __post_init__(self):
        C = np.asarray(self.C, dtype=np.float64)
        Z = np.asarray(self.Z, dtype=np.float64)
        if C.ndim != 2 or Z.ndim != 2 or C.shape[1] != Z.shape[0]:
            raise ShapeError(f"incompatible factor shapes C{C.shape} Z{Z.shape}")
        if self.c_config.axis != "per_column" or self.z_config.axis != "per_row":
            raise ValueError("C is quantized per column and Z per row")
        mask = np.ones(Z.shape, dtype=bool) if self.mask is None else np.asarray(self.mask, dtype=bool)
        if mask.shape != Z.shape:
            raise ShapeError(f"mask shape {mask.shape} does not match Z{Z.shape}")
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "c_scales", np.asarray(self.c_scales, dtype=np.float64))
        object.__setattr__(self, "z_scales", np.asarray(self.z_scales, dtype=np.float64))
        d, k = C.shape
        n = Z.shape[1]
        if not k < d < n:
            warnings.warn(f"factor shapes outside the k < d < n regime (d={d}, k={k}, n={n})", stacklevel=3)

    @property
    def d(self) -> int:
        return self.C.shape[0]

    @property
    def k(self) -> int:
        return self.C.shape[1]

    @property
    def n(self) -> int:
        return self.Z.shape[1]

    @cached_property
    def Cq(self) -> QuantizedMatrix:
        return quantize(self.C, self.c_scales, self.c_config)

    @cached_property
    def Zq(self) -> QuantizedMatrix:
        return quantize(self.Z, self.z_scales, self.z_config)

    def masked_latent(self) -> np.ndarray:
        return self.Zq.dequant * self.mask

    def effective(self) -> np.ndarray:
        """Deployed tile matrix ``Cq @ (Zq * M)`` (without the mean)."""
        return self.Cq.dequant @ self.masked_latent()

    def nnz(self) -> int:
        """Nonzeros of ``Zq * M``."""
        return int(np.count_nonzero(self.masked_latent()))

    def sparsity(self) -> float:
        return 1.0 - self.nnz() / self.Z.size

    def replace(self, **changes) -> "FactorPair":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return replace(self, **changes)


@dataclass
class CalibrationSet:
    """Paired layer inputs ``X`` (m, f_in, H, W) and outputs ``Y`` (m, f_out, oh, ow)."""

    X: np.ndarray
    Y: np.ndarray
    conv: ConvSpec
    train_idx: np.ndarray = None
    val_idx: np.ndarray = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.float64)
        if self.X.ndim != 4 or self.Y.ndim != 4 or len(self.X) != len(self.Y):
            raise ShapeError(f"expected paired 4-D batches, got X{self.X.shape} Y{self.Y.shape}")
        if self.X.shape[2:] != self.conv.in_hw:
            raise ShapeError(f"X spatial dims {self.X.shape[2:]} do not match {self.conv.in_hw}")
        if self.Y.shape[2:] != self.conv.out_hw:
            raise ShapeError(f"Y spatial dims {self.Y.shape[2:]} do not match {self.conv.out_hw}")
        if self.train_idx is None:
            self.train_idx = np.arange(self.m)
        if self.val_idx is None:
            self.val_idx = np.arange(0)
        self.train_idx = np.asarray(self.train_idx, dtype=np.int64)
        self.val_idx = np.asarray(self.val_idx, dtype=np.int64)

    @classmethod
    def from_arrays(cls, X, Y, conv: ConvSpec = None, stride=1, kernel_hw=None, seed=0,
                    val_fraction=1 / 8):
        """Build a calibration set and hold out ``val_fraction`` of samples.

        ``conv`` is inferred from the array shapes when not given (needs
        ``kernel_hw``).
        """
        X = np.asarray(X, dtype=np.float64)
        Y = np.asarray(Y, dtype=np.float64)
        if conv is None:
            if kernel_hw is None:
                raise ValueError("kernel_hw is required to infer the convolution geometry")
            conv = ConvSpec.infer(X.shape[2:], Y.shape[2:], kernel_hw, stride)
        m = len(X)
        if m < 2:
            raise ValueError(f"need at least 2 calibration samples to hold one out, got {m}")
        n_val = max(1, int(round(m * val_fraction)))
        perm = np.random.default_rng(seed).permutation(m)
        return cls(X, Y, conv, np.sort(perm[n_val:]), np.sort(perm[:n_val]))

    @property
    def m(self) -> int:
        return len(self.X)

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.Y.shape[1], self.X.shape[1], *self.conv.kernel_hw)

    @cached_property
    def columns(self) -> np.ndarray:
        """Lowered inputs, ``(m, f_in*h*w, p)``."""
        return lower_conv_batch(self.X, self.conv)

    @cached_property
    def targets(self) -> np.ndarray:
        return self.Y.reshape(self.m, self.Y.shape[1], -1)

    def resolve(self, subset) -> np.ndarray:
        if subset is None or (isinstance(subset, str) and subset == "all"):
            return np.arange(self.m)
        if isinstance(subset, str):
            return {"train": self.train_idx, "val": self.val_idx}[subset]
        return np.asarray(subset, dtype=np.int64)


@dataclass(frozen=True)
class FixedIterations:
    iterations: int = 30

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError(f"iteration count must be >= 0, got {self.iterations}")


@dataclass(frozen=True)
class ValidationPatience:
    """Stop once validation MSE has failed to improve more than ``patience`` times in a row."""

    patience: int = 2
    max_iterations: int = 1000


@dataclass(frozen=True)
class SolverConfig:
    """Solver hyperparameters.

    The sparsity target is either an absolute nonzero count ``sparsity`` or
    an ``extra_sparsity`` fraction pruned from the accidental nonzeros; with
    neither set no thresholding happens.
    """

    sparsity: int = None
    extra_sparsity: float = None
    thresholding: str = ONE_SHOT
    stopping: object = field(default_factory=ValidationPatience)
    lr: float = 1e-4
    weight_decay: float = 1e-5
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    respect_accidental: bool = True

    def __post_init__(self):
        if self.thresholding not in (ONE_SHOT, ITERATIVE):
            raise ValueError(f"thresholding must be {ONE_SHOT!r} or {ITERATIVE!r}, got {self.thresholding!r}")
        if self.sparsity is not None and self.extra_sparsity is not None:
            raise ValueError("give either an absolute sparsity target or an extra-sparsity fraction, not both")
        if self.extra_sparsity is not None and not 0.0 <= self.extra_sparsity <= 1.0:
            raise ValueError(f"extra sparsity must lie in [0, 1], got {self.extra_sparsity}")
        if not isinstance(self.stopping, (FixedIterations, ValidationPatience)):
            raise TypeError(f"unsupported stopping criterion {self.stopping!r}")


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    train_mse: float
    val_mse: float
    sparsity: float


@dataclass
class SolveTrace:
    records: list = field(default_factory=list)
    initial_train_mse: float = float("nan")
    initial_val_mse: float = float("nan")
    final_train_mse: float = float("nan")
    final_val_mse: float = float("nan")
    termination: str = ""

    @property
    def iterations(self) -> int:
        return len(self.records)


# -- initialization ---------------------------------------------------------


def _fix_signs(U):
    # make the largest-magnitude entry of each column positive
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs


def svd_init(T: TileMatrix, k: int, c_config: QuantConfig = None, z_config: QuantConfig = None,
             fp16_scales=True) -> FactorPair:
    """``C = U_k``, ``Z = U_k^T W``, with min-max scales for both factors."""
    c_config = c_config or default_c_config()
    z_config = z_config or default_z_config()
    W = T.entries
    if not 1 <= k <= min(W.shape):
        raise ValueError(f"rank k={k} must lie in [1, {min(W.shape)}] for a {W.shape[0]}x{W.shape[1]} tile matrix")
    try:
        U, _, _ = np.linalg.svd(W, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        residual = float(np.linalg.norm(W))
        raise SVDError(f"SVD did not converge (||W||_F = {residual:.6g})") from exc
    C = _fix_signs(U[:, :k])
    Z = C.T @ W
    c_scales = fit_minmax_scales(C, c_config)
    z_scales = fit_minmax_scales(Z, z_config)
    if fp16_scales:
        c_scales, z_scales = to_fp16_scales(c_scales), to_fp16_scales(z_scales)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return FactorPair(C, Z, c_scales, z_scales, c_config, z_config)


# -- data-aware objective ---------------------------------------------------


def _weight_matrix(F: FactorPair, mean, cal: CalibrationSet) -> np.ndarray:
    tiles = F.effective()
    if mean is not None:
        tiles = tiles + np.asarray(mean)[:, None]
    f_out = cal.weight_shape[0]
    if tiles.size != int(np.prod(cal.weight_shape)):
        raise ShapeError(
            f"factors give {tiles.size} weights but the calibration layer has shape {cal.weight_shape}"
        )
    return tiles.T.reshape(f_out, -1)


def _residuals(F, cal, subset, mean):
    idx = cal.resolve(subset)
    if len(idx) == 0:
        raise ValueError("empty calibration subset")
    R = _weight_matrix(F, mean, cal)
    E = np.matmul(R, cal.columns[idx]) - cal.targets[idx]
    return idx, E


def objective(F: FactorPair, cal: CalibrationSet, subset=None, mean=None) -> float:
    """Mean squared Frobenius output error over the chosen samples."""
    idx, E = _residuals(F, cal, subset, mean)
    return float(np.sum(E * E) / len(idx))


def gradient(F: FactorPair, cal: CalibrationSet, subset=None, mean=None):
    """STE gradients ``(dC, dZ)`` of :func:`objective`.

    The weight-space gradient is tiled like the weights, then pushed through
    the product ``Cq @ Zq``.  Rounding passes gradients unchanged; saturated
    entries get zero.  ``dZ`` ignores the mask, so pruned entries can regrow.
    """
    idx, E = _residuals(F, cal, subset, mean)
    G = (2.0 / len(idx)) * np.einsum("mop,mqp->oq", E, cal.columns[idx])
    G_tiles = G.reshape(-1).reshape(F.n, F.d).T
    dC = G_tiles @ F.masked_latent().T
    dZ = F.Cq.dequant.T @ G_tiles
    dC *= ste_gradient_mask(F.C, F.c_scales, F.c_config)
    dZ *= ste_gradient_mask(F.Z, F.z_scales, F.z_config)
    return dC, dZ


# -- optimizer ----------------------------------------------------------------


@dataclass(frozen=True)
class AdamState:
    step: int = 0
    m_C: np.ndarray = None
    v_C: np.ndarray = None
    m_Z: np.ndarray = None
    v_Z: np.ndarray = None


def _adam(param, grad, m, v, t, cfg: SolverConfig):
    b1, b2 = cfg.betas
    m = b1 * (0.0 if m is None else m) + (1 - b1) * grad
    v = b2 * (0.0 if v is None else v) + (1 - b2) * grad * grad
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    new = param - cfg.lr * (m_hat / (np.sqrt(v_hat) + cfg.eps) + cfg.weight_decay * param)
    return new, m, v


def adaptive_step(F: FactorPair, grads, state: AdamState, cfg: SolverConfig):
    """One Adam step with decoupled weight decay on the raw factors.

    Returns the updated ``(FactorPair, AdamState)``; inputs are not modified.
    """
    dC, dZ = grads
    t = state.step + 1
    C, m_C, v_C = _adam(F.C, dC, state.m_C, state.v_C, t, cfg)
    Z, m_Z, v_Z = _adam(F.Z, dZ, state.m_Z, state.v_Z, t, cfg)
    return F.replace(C=C, Z=Z), AdamState(t, m_C, v_C, m_Z, v_Z)


# -- projection ---------------------------------------------------------------


def hard_threshold_mask(Zq: QuantizedMatrix, S: int, respect_accidental=False) -> np.ndarray:
    """Boolean mask of the ``S`` largest ``|Zq|`` entries.

    Ties go to the smaller (row, column) index.  With ``respect_accidental``
    entries whose code is already zero are never selected, so ``S`` counts
    stored nonzeros only.
    """
    values = np.abs(Zq.dequant)
    total = values.size
    if not 0 <= S <= total:
        raise ValueError(f"sparsity target S={S} outside [0, {total}]")
    flat = values.reshape(-1)
    order = np.argsort(-flat, kind="stable")
    if respect_accidental:
        order = order[flat[order] != 0]
    keep = np.zeros(total, dtype=bool)
    keep[order[:S]] = True
    return keep.reshape(values.shape)


def sparsity_target(Zq: QuantizedMatrix, cfg: SolverConfig):
    """Number of entries to keep, or ``None`` when no thresholding is configured."""
    if cfg.sparsity is not None:
        return int(cfg.sparsity)
    if cfg.extra_sparsity is not None:
        nnz = int(np.count_nonzero(Zq.codes))
        return int(np.floor((1.0 - cfg.extra_sparsity) * nnz + 0.5))
    return None


def _threshold(F: FactorPair, cfg: SolverConfig, S=None):
    """Project ``Z``; returns the new pair and the target used.

    Pass the target back in on later calls so an extra-sparsity fraction
    is resolved once instead of compounding every iteration.
    """
    Zq = F.Zq
    if S is None:
        S = sparsity_target(Zq, cfg)
    if S is None:
        return F, None
    mask = hard_threshold_mask(Zq, min(S, Zq.codes.size), cfg.respect_accidental)
    # accidental zeros are not pruned: their raw values survive (they still
    # quantize to 0, so Zq * M is unchanged) and may grow back later
    keep = mask | (Zq.codes == 0) if cfg.respect_accidental else mask
    return F.replace(Z=F.Z * keep, mask=mask), S


# -- solver -------------------------------------------------------------------


def solve(T: TileMatrix, cal: CalibrationSet, cfg: SolverConfig, k: int,
          c_config: QuantConfig = None, z_config: QuantConfig = None):
    """Projected gradient descent from the SVD initialization.

    ``T`` should already be centered; its ``mean`` is added back when the
    layer outputs are evaluated.  Returns ``(FactorPair, SolveTrace)``.
    """
    F = svd_init(T, k, c_config, z_config)
    mean = T.mean
    has_val = len(cal.val_idx) > 0
    trace = SolveTrace()
    trace.initial_train_mse = objective(F, cal, "train", mean)
    trace.initial_val_mse = objective(F, cal, "val", mean) if has_val else float("nan")

    stop = cfg.stopping
    if isinstance(stop, FixedIterations):
        budget = stop.iterations
    else:
        if not has_val:
            raise ValueError("validation-based stopping needs a non-empty validation split")
        budget = stop.max_iterations
    state = AdamState()
    best_val = trace.initial_val_mse
    stalls = 0
    # the budget comes from the initial latent and stays fixed for the run
    target = sparsity_target(F.Zq, cfg) if cfg.thresholding == ITERATIVE else None
    trace.termination = "fixed_iterations" if isinstance(stop, FixedIterations) else "max_iterations"

    for it in range(1, budget + 1):
        grads = gradient(F, cal, "train", mean)
        F, state = adaptive_step(F, grads, state, cfg)
        if cfg.thresholding == ITERATIVE:
            F, target = _threshold(F, cfg, target)
        train = objective(F, cal, "train", mean)
        val = objective(F, cal, "val", mean) if has_val else float("nan")
        trace.records.append(IterationRecord(it, train, val, F.sparsity()))
        if isinstance(stop, ValidationPatience):
            if val < best_val:
                best_val, stalls = val, 0
            else:
                stalls += 1
                if stalls > stop.patience:
                    trace.termination = "validation_patience"
                    break

    if cfg.thresholding == ONE_SHOT:
        F, target = _threshold(F, cfg)
    trace.final_train_mse = objective(F, cal, "train", mean)
    trace.final_val_mse = objective(F, cal, "val", mean) if has_val else float("nan")
    log.debug("solve finished after %d iterations (%s)", trace.iterations, trace.termination)
    return F, trace


def reconstruct(F: FactorPair, mean, shape, dtype=np.float64) -> WeightTensor:
    """Weight tensor from ``Cq @ (Zq * M) + mean``."""
    mean = np.zeros(F.d) if mean is None else mean
    return untile_reshape(TileMatrix(F.effective(), mean), shape, dtype)
