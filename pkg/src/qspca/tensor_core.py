"""Weight tensors, tile matrices and convolution lowering.

A 4-D convolution weight ``(f_out, f_in, h, w)`` is flattened in row-major
order and cut into contiguous blocks of length ``d``; block ``i`` becomes
column ``i`` of a ``d x n`` tile matrix.  Centering subtracts the per-row
mean over columns, as in ordinary PCA.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ShapeError",
    "WeightTensor",
    "TileMatrix",
    "ConvSpec",
    "tile_reshape",
    "untile_reshape",
    "center",
    "lower_conv",
    "lower_conv_batch",
    "conv2d",
]


class ShapeError(ValueError):
    """Raised when array dimensions do not conform to an operation."""


@dataclass(frozen=True)
class WeightTensor:
    """Convolution weight of shape ``(f_out, f_in, h, w)``."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 4:
            raise ShapeError(f"weight tensor must be 4-D, got shape {data.shape}")
        if min(data.shape) < 1:
            raise ShapeError(f"weight dimensions must be positive, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("weight tensor contains non-finite entries")
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(int(s) for s in self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def f_out(self) -> int:
        return self.shape[0]

    @property
    def f_in(self) -> int:
        return self.shape[1]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.shape[2], self.shape[3]

    def as_matrix(self) -> np.ndarray:
        """Weight as a ``f_out x (f_in*h*w)`` matrix (the GEMM operand)."""
        return self.data.reshape(self.f_out, -1)


@dataclass(frozen=True)
class TileMatrix:
    """``d x n`` tile matrix plus its length-``d`` centering vector."""

    entries: np.ndarray
    mean: np.ndarray = field(default=None)

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=np.float64)
        if entries.ndim != 2:
            raise ShapeError(f"tile matrix must be 2-D, got shape {entries.shape}")
        mean = np.zeros(entries.shape[0]) if self.mean is None else np.asarray(self.mean, dtype=np.float64)
        if mean.shape != (entries.shape[0],):
            raise ShapeError(f"mean must have length {entries.shape[0]}, got shape {mean.shape}")
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "mean", mean)

    @property
    def d(self) -> int:
        return self.entries.shape[0]

    @property
    def n(self) -> int:
        return self.entries.shape[1]

    def uncentered(self) -> np.ndarray:
        return self.entries + self.mean[:, None]


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 2-D convolution (zero padding, no dilation or groups)."""

    stride: int = 1
    padding: int = 0
    in_hw: tuple[int, int] = (1, 1)
    kernel_hw: tuple[int, int] = (1, 1)

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")
        object.__setattr__(self, "in_hw", tuple(int(v) for v in self.in_hw))
        object.__setattr__(self, "kernel_hw", tuple(int(v) for v in self.kernel_hw))
        oh, ow = self.out_hw
        if oh < 1 or ow < 1:
            raise ShapeError(
                f"kernel {self.kernel_hw} does not fit input {self.in_hw} "
                f"with padding {self.padding}"
            )

    @property
    def out_hw(self) -> tuple[int, int]:
        (H, W), (kh, kw) = self.in_hw, self.kernel_hw
        p, s = self.padding, self.stride
        return (H + 2 * p - kh) // s + 1, (W + 2 * p - kw) // s + 1

    @property
    def p(self) -> int:
        """Number of output positions per channel."""
        oh, ow = self.out_hw
        return oh * ow

    @classmethod
    def infer(cls, in_hw, out_hw, kernel_hw, stride=1):
        """Recover the symmetric padding that maps ``in_hw`` to ``out_hw``."""
        pads = set()
        for size, out, k in zip(in_hw, out_hw, kernel_hw):
            twice = (out - 1) * stride + k - size
            # floor division in out_hw admits a range of paddings; take the smallest
            pad = max(0, -(-twice // 2))
            pads.add(pad)
        for pad in sorted(pads):
            spec = cls(stride=stride, padding=pad, in_hw=in_hw, kernel_hw=kernel_hw)
            if spec.out_hw == tuple(out_hw):
                return spec
        raise ShapeError(
            f"no padding maps input {tuple(in_hw)} to output {tuple(out_hw)} "
            f"with kernel {tuple(kernel_hw)} and stride {stride}"
        )


def tile_reshape(W: WeightTensor, d: int) -> TileMatrix:
    """Cut the flattened weight into ``n = W.size / d`` contiguous columns."""
    if d < 1 or W.size % d:
        raise ShapeError(
            f"tile size d={d} does not divide the weight size "
            f"{'x'.join(map(str, W.shape))}={W.size}"
        )
    n = W.size // d
    flat = W.data.astype(np.float64).reshape(-1)
    return TileMatrix(flat.reshape(n, d).T.copy())


def untile_reshape(T: TileMatrix, shape, dtype=np.float64) -> WeightTensor:
    """Inverse of :func:`tile_reshape`; adds the centering vector back first."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4:
        raise ShapeError(f"target shape must have 4 dims, got {shape}")
    if T.d * T.n != int(np.prod(shape)):
        raise ShapeError(f"tile matrix {T.d}x{T.n} cannot be reshaped to {shape}")
    full = T.uncentered() if np.any(T.mean) else T.entries
    return WeightTensor(full.T.reshape(shape).astype(dtype, copy=False))


def center(T: TileMatrix) -> TileMatrix:
    """Subtract per-row means; the removed means accumulate into ``mean``."""
    row_mean = T.entries.mean(axis=1)
    return TileMatrix(T.entries - row_mean[:, None], T.mean + row_mean)


def _check_activation(X, spec: ConvSpec):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3:
        raise ShapeError(f"activation must be (channels, H, W), got shape {X.shape}")
    if X.shape[1:] != spec.in_hw:
        raise ShapeError(f"activation spatial dims {X.shape[1:]} do not match {spec.in_hw}")
    return X


def lower_conv(X, spec: ConvSpec) -> np.ndarray:
    """im2col: return ``X_col`` of shape ``(f_in*h*w, p)`` for one sample.

    Row order is ``(channel, ky, kx)``, matching ``WeightTensor.as_matrix``,
    so ``conv(W, X) == W.as_matrix() @ lower_conv(X, spec)``.
    """
    X = _check_activation(X, spec)
    return lower_conv_batch(X[None], spec)[0]


def lower_conv_batch(X, spec: ConvSpec) -> np.ndarray:
    """Batched :func:`lower_conv`: ``(m, c, H, W) -> (m, c*h*w, p)``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4 or X.shape[2:] != spec.in_hw:
        raise ShapeError(f"activation batch must be (m, c, {spec.in_hw}), got {X.shape}")
    m, c = X.shape[:2]
    kh, kw = spec.kernel_hw
    oh, ow = spec.out_hw
    s, pad = spec.stride, spec.padding
    Xp = np.pad(X, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((m, c, kh, kw, oh, ow))
    for ky in range(kh):
        for kx in range(kw):
            cols[:, :, ky, kx] = Xp[:, :, ky:ky + s * oh:s, kx:kx + s * ow:s]
    return cols.reshape(m, c * kh * kw, oh * ow)


def conv2d(W: WeightTensor, X, spec: ConvSpec) -> np.ndarray:
    """Cross-correlation of ``W`` with a batch ``(m, f_in, H, W)``.

    Returns ``(m, f_out, oh, ow)``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.shape[1] != W.f_in:
        raise ShapeError(f"activation has {X.shape[1]} channels, weight expects {W.f_in}")
    if tuple(W.kernel) != spec.kernel_hw:
        raise ShapeError(f"weight kernel {W.kernel} does not match {spec.kernel_hw}")
    cols = lower_conv_batch(X, spec)
    out = np.matmul(W.as_matrix().astype(np.float64), cols)
    return out.reshape(X.shape[0], W.f_out, *spec.out_hw)
