"""End-to-end compression of one convolution layer."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import codec
from .factorizer import CalibrationSet, FactorPair, SolverConfig, SolveTrace, objective, reconstruct, solve
from .quantizer import SIGNED, QuantConfig
from .tensor_core import ConvSpec, TileMatrix, WeightTensor, center, conv2d, tile_reshape

__all__ = ["CompressionResult", "compress_layer", "synthetic_layer", "checksum"]


@dataclass
class CompressionResult:
    factors: FactorPair
    mean: np.ndarray
    shape: tuple
    trace: SolveTrace
    size: codec.SizeReport

    def to_bytes(self) -> bytes:
        return codec.to_bytes(codec.encode(self.factors, self.mean, self.shape))

    def reconstruct(self, dtype=np.float64) -> WeightTensor:
        return reconstruct(self.factors, self.mean, self.shape, dtype)

    def heldout_mse(self, cal: CalibrationSet) -> float:
        return objective(self.factors, cal, "val", self.mean)

    def report(self) -> dict:
        out = self.size.as_dict()
        out.update(
            iterations=self.trace.iterations,
            termination=self.trace.termination,
            initial_train_mse=self.trace.initial_train_mse,
            initial_val_mse=self.trace.initial_val_mse,
            train_mse=self.trace.final_train_mse,
            val_mse=self.trace.final_val_mse,
        )
        return out


def compress_layer(W: WeightTensor, cal: CalibrationSet, d: int, k: int, b_c=4, b_z=4,
                   solver: SolverConfig = None, mode=SIGNED) -> CompressionResult:
    """Tile, center, factorize and size one layer.

    The centering vector is rounded to float32 up front (that is how it is
    stored), so the in-memory result reconstructs exactly what a decoded
    container would.
    """
    if tuple(cal.weight_shape) != W.shape:
        raise ValueError(f"calibration data is for a {cal.weight_shape} layer, weight is {W.shape}")
    solver = solver or SolverConfig()
    T = center(tile_reshape(W, d))
    T = TileMatrix(T.entries, T.mean.astype(np.float32).astype(np.float64))
    F, trace = solve(T, cal, solver, k, QuantConfig(b_c, mode, "per_column"), QuantConfig(b_z, mode, "per_row"))
    size = codec.report_for(F, W.shape)
    return CompressionResult(F, T.mean, W.shape, trace, size)


def synthetic_layer(shape=(16, 16, 3, 3), m=64, in_hw=(8, 8), stride=1, padding=1, seed=0,
                    noise=0.0, correlated=True):
    """Random weight plus ``m`` calibration pairs ``Y = conv(W, X) (+ noise)``.

    The weight has a decaying spectrum across output channels so that a
    low-rank factorization is meaningful.  With ``correlated`` the input
    channels are mixed through a matrix with geometrically decaying columns,
    which gives the anisotropic input covariance of real feature maps; white
    inputs make the data-aware loss equal to plain weight-space MSE.
    """
    rng = np.random.default_rng(seed)
    f_out, f_in = shape[:2]
    decay = 1.0 / np.sqrt(1.0 + np.arange(f_out))
    data = rng.standard_normal(shape) * 0.1 * decay[:, None, None, None]
    W = WeightTensor(data.astype(np.float32))
    spec = ConvSpec(stride, padding, in_hw, shape[2:])
    X = rng.standard_normal((m, f_in, *in_hw))
    if correlated:
        mix = rng.standard_normal((f_in, f_in)) * 0.5 ** np.arange(f_in)
        X = np.einsum("ij,mjhw->mihw", mix, X)
    Y = conv2d(W, X, spec)
    if noise:
        Y = Y + noise * rng.standard_normal(Y.shape)
    return W, X, Y, spec


def checksum(W: WeightTensor) -> str:
    """SHA-256 of the float32 little-endian payload."""
    return hashlib.sha256(np.ascontiguousarray(W.data, dtype="<f4").tobytes()).hexdigest()
