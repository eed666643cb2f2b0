"""Per-channel fake quantization with a clamped straight-through estimator.

Two integer grids are supported:

* ``paper_literal_unsigned``: codes in ``[0, 2**b - 1]``, as the clamp is
  literally written for the factor quantizers.  Negative values saturate to 0.
* ``symmetric_signed``: codes in ``[-2**(b-1), 2**(b-1) - 1]``; the default,
  since PCA factors are signed.

A third mode, ``identity``, passes values through untouched.  It stands in
for an infinite bit-width and is what turns the method into plain PCA.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "UNSIGNED",
    "SIGNED",
    "IDENTITY",
    "SCALE_EPS",
    "QuantConfig",
    "QuantizedMatrix",
    "round_half_away",
    "fit_minmax_scales",
    "quantize",
    "ste_gradient_mask",
    "to_fp16_scales",
]

UNSIGNED = "paper_literal_unsigned"
SIGNED = "symmetric_signed"
IDENTITY = "identity"
MODES = (UNSIGNED, SIGNED, IDENTITY)
AXES = ("per_column", "per_row")

SCALE_EPS = 1e-8


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 4
    mode: str = SIGNED
    axis: str = "per_column"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown quantization mode {self.mode!r}; expected one of {MODES}")
        if self.axis not in AXES:
            raise ValueError(f"unknown channel axis {self.axis!r}; expected one of {AXES}")
        if self.mode != IDENTITY and not 2 <= self.bits <= 8:
            raise ValueError(f"bit-width must be in [2, 8], got {self.bits}")

    @property
    def code_range(self) -> tuple[int, int]:
        b = self.bits
        if self.mode == UNSIGNED:
            return 0, 2**b - 1
        if self.mode == SIGNED:
            return -(2 ** (b - 1)), 2 ** (b - 1) - 1
        return -np.inf, np.inf

    @property
    def channel_axis(self) -> int:
        """Array axis that indexes channels (columns -> 1, rows -> 0)."""
        return 1 if self.axis == "per_column" else 0

    def n_channels(self, M) -> int:
        return np.shape(M)[self.channel_axis]

    def broadcast(self, scales) -> np.ndarray:
        scales = np.asarray(scales, dtype=np.float64)
        return scales[None, :] if self.channel_axis == 1 else scales[:, None]


@dataclass(frozen=True)
class QuantizedMatrix:
    """Integer codes, their scales, and the dequantized matrix."""

    codes: np.ndarray
    scales: np.ndarray
    config: QuantConfig

    @property
    def dequant(self) -> np.ndarray:
        if self.config.mode == IDENTITY:
            return np.asarray(self.codes, dtype=np.float64)
        return self.codes * self.config.broadcast(self.scales)


def round_half_away(x):
    """Round to nearest integer, ties away from zero (``np.round`` ties to even)."""
    x = np.asarray(x, dtype=np.float64)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def fit_minmax_scales(M, cfg: QuantConfig) -> np.ndarray:
    """Min-max scale per channel; degenerate channels get :data:`SCALE_EPS`."""
    M = np.asarray(M, dtype=np.float64)
    if not np.all(np.isfinite(M)):
        raise ValueError("cannot fit scales to a matrix with non-finite entries")
    axis = 1 - cfg.channel_axis  # reduce over the other axis
    if cfg.mode == IDENTITY:
        return np.ones(cfg.n_channels(M))
    if M.size == 0:
        return np.full(cfg.n_channels(M), SCALE_EPS)
    if cfg.mode == UNSIGNED:
        peak = M.max(axis=axis)
        levels = 2**cfg.bits - 1
    else:
        peak = np.abs(M).max(axis=axis)
        levels = 2 ** (cfg.bits - 1) - 1
    scale = np.where(peak > 0, peak / levels, 0.0)
    # subnormal peaks can underflow to a zero scale
    return np.where(scale > 0, scale, SCALE_EPS)


def _check_scales(M, scales, cfg):
    scales = np.asarray(scales, dtype=np.float64)
    if scales.shape != (cfg.n_channels(M),):
        raise ValueError(
            f"expected {cfg.n_channels(M)} scales for {cfg.axis} channels, got shape {scales.shape}"
        )
    if cfg.mode != IDENTITY and not np.all(scales > 0):
        raise ValueError("quantization scales must be positive")
    return scales


def quantize(M, scales, cfg: QuantConfig) -> QuantizedMatrix:
    """``code = clamp(round(M / s), lo, hi)`` per channel."""
    M = np.asarray(M, dtype=np.float64)
    scales = _check_scales(M, scales, cfg)
    if cfg.mode == IDENTITY:
        return QuantizedMatrix(M.copy(), scales, cfg)
    lo, hi = cfg.code_range
    with np.errstate(over="ignore"):  # overflow to +-inf clamps correctly
        codes = np.clip(round_half_away(M / cfg.broadcast(scales)), lo, hi).astype(np.int64)
    return QuantizedMatrix(codes, scales, cfg)


def ste_gradient_mask(M, scales, cfg: QuantConfig) -> np.ndarray:
    """1 where the gradient passes through the quantizer, 0 where the clamp saturates."""
    M = np.asarray(M, dtype=np.float64)
    scales = _check_scales(M, scales, cfg)
    if cfg.mode == IDENTITY:
        return np.ones(M.shape)
    lo, hi = cfg.code_range
    with np.errstate(over="ignore"):
        u = M / cfg.broadcast(scales)
    return ((u >= lo - 0.5) & (u <= hi + 0.5)).astype(np.float64)


_FP16_TINY = float(np.finfo(np.float16).smallest_subnormal)
_FP16_MAX = float(np.finfo(np.float16).max)


def to_fp16_scales(scales) -> np.ndarray:
    """Round scales to binary16 (nearest-even), kept strictly positive and finite."""
    scales = np.clip(np.asarray(scales, dtype=np.float64), _FP16_TINY, _FP16_MAX)
    return scales.astype(np.float16).astype(np.float64)
