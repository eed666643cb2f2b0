"""QSPC container for compressed layers, plus size and overhead accounting.

Container layout (little-endian)::

    b"QSPC" | u16 version=1
    u32 x 12: f_out f_in h w d k n b_c b_z c_mode z_mode nnz
    C codes     d*k fields of b_c bits, row-major            (byte padded)
    mask        k*n bits, row-major                          (byte padded)
    Z codes     nnz fields of b_z bits, row-major mask order (byte padded)
    scales      k C-scales then k Z-scales, binary16
    mean        d float32

Bit streams are LSB-first: field bit 0 goes to bit 0 of byte 0.  Signed
codes are stored in two's complement.  A mask bit is set only where the
kept code is nonzero, so the stored count always equals ``||Zq * M||_0``.
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .factorizer import FactorPair
from .quantizer import IDENTITY, SIGNED, UNSIGNED, QuantConfig, quantize, to_fp16_scales

__all__ = [
    "CodecError",
    "MAGIC",
    "VERSION",
    "HEADER_BYTES",
    "CompressedLayer",
    "StreamLayout",
    "pack_fields",
    "unpack_fields",
    "encode",
    "decode",
    "to_bytes",
    "from_bytes",
    "layout",
    "SizeReport",
    "OverheadReport",
    "layer_size_bits",
    "network_ratio",
    "overhead",
]

MAGIC = b"QSPC"
VERSION = 1
_HEADER = struct.Struct("<4sH12I")
HEADER_BYTES = _HEADER.size
_MODE_IDS = {UNSIGNED: 0, SIGNED: 1}
_MODE_NAMES = {v: k for k, v in _MODE_IDS.items()}

SCALE_BITS = 16
FLOAT_BITS = 32


class CodecError(ValueError):
    """Malformed, truncated or unsupported QSPC data."""


# -- bit packing ------------------------------------------------------------


def pack_fields(values, bits: int) -> bytes:
    """Pack integers into ``bits``-wide LSB-first fields (two's complement)."""
    values = np.asarray(values, dtype=np.int64).reshape(-1)
    if values.size == 0:
        return b""
    fields = values & ((1 << bits) - 1)
    bitmat = (fields[:, None] >> np.arange(bits)) & 1
    return np.packbits(bitmat.astype(np.uint8).reshape(-1), bitorder="little").tobytes()


def unpack_fields(buf: bytes, count: int, bits: int, signed: bool) -> np.ndarray:
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    raw = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little")
    bitmat = raw[:count * bits].reshape(count, bits).astype(np.int64)
    values = bitmat @ (1 << np.arange(bits, dtype=np.int64))
    if signed:
        values = np.where(values >= 1 << (bits - 1), values - (1 << bits), values)
    return values


def _nbytes(nbits: int) -> int:
    return (nbits + 7) // 8


# -- container --------------------------------------------------------------


@dataclass(frozen=True)
class CompressedLayer:
    """Decoded-but-unexpanded contents of a QSPC container."""

    shape: tuple
    d: int
    k: int
    n: int
    b_c: int
    b_z: int
    c_mode: str
    z_mode: str
    c_codes: np.ndarray  # (d, k) int
    mask: np.ndarray     # (k, n) bool
    z_values: np.ndarray  # (nnz,) int, row-major over the mask
    c_scales: np.ndarray  # (k,) float16-representable
    z_scales: np.ndarray
    mean: np.ndarray      # (d,) float32-representable

    @property
    def nnz(self) -> int:
        return int(self.z_values.size)


@dataclass(frozen=True)
class StreamLayout:
    """Bits used and bytes occupied by each stream of an encoded layer."""

    c_bits: int
    mask_bits: int
    z_bits: int
    scale_bits: int
    mean_bits: int
    c_bytes: int
    mask_bytes: int
    z_bytes: int
    scale_bytes: int
    mean_bytes: int

    @property
    def factor_bits(self) -> int:
        """Bits that count toward the compressed size (codes, mask, scales)."""
        return self.c_bits + self.mask_bits + self.z_bits + self.scale_bits

    @property
    def factor_bytes(self) -> int:
        return self.c_bytes + self.mask_bytes + self.z_bytes + self.scale_bytes

    @property
    def total_bytes(self) -> int:
        return HEADER_BYTES + self.factor_bytes + self.mean_bytes


def _stream_layout(d, k, n, b_c, b_z, nnz) -> StreamLayout:
    bits = dict(c=d * k * b_c, mask=k * n, z=nnz * b_z, scale=2 * k * SCALE_BITS, mean=d * FLOAT_BITS)
    return StreamLayout(
        bits["c"], bits["mask"], bits["z"], bits["scale"], bits["mean"],
        *(_nbytes(b) for b in bits.values()),
    )


def encode(F: FactorPair, mean, shape) -> CompressedLayer:
    """Quantize ``F`` with binary16-rounded scales and drop all zero codes."""
    for cfg in (F.c_config, F.z_config):
        if cfg.mode == IDENTITY:
            raise CodecError("identity quantizers have no integer codes to store")
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != F.d * F.n:
        raise CodecError(f"shape {shape} does not hold a {F.d}x{F.n} tile matrix")
    c_scales = to_fp16_scales(F.c_scales)
    z_scales = to_fp16_scales(F.z_scales)
    c_codes = quantize(F.C, c_scales, F.c_config).codes
    z_codes = quantize(F.Z, z_scales, F.z_config).codes
    mask = F.mask & (z_codes != 0)
    mean = np.zeros(F.d) if mean is None else np.asarray(mean, dtype=np.float64)
    if mean.shape != (F.d,):
        raise CodecError(f"mean must have length {F.d}, got {mean.shape}")
    return CompressedLayer(
        shape, F.d, F.k, F.n, F.c_config.bits, F.z_config.bits, F.c_config.mode, F.z_config.mode,
        c_codes, mask, z_codes[mask], c_scales, z_scales,
        mean.astype(np.float32).astype(np.float64),
    )


def decode(c: CompressedLayer):
    """Expand a container into ``(FactorPair, mean, shape)``.

    The raw factors are the dequantized ones, so quantizing them again gives
    back the stored codes.
    """
    c_cfg = QuantConfig(c.b_c, c.c_mode, "per_column")
    z_cfg = QuantConfig(c.b_z, c.z_mode, "per_row")
    if int(c.mask.sum()) != c.nnz:
        raise CodecError(f"mask has {int(c.mask.sum())} set bits but {c.nnz} values are stored")
    codes = np.zeros((c.k, c.n), dtype=np.int64)
    codes[c.mask] = c.z_values
    C = c.c_codes * c.c_scales[None, :]
    Z = codes * c.z_scales[:, None]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        F = FactorPair(C, Z, c.c_scales, c.z_scales, c_cfg, z_cfg, c.mask)
    return F, c.mean.copy(), c.shape


def to_bytes(c: CompressedLayer) -> bytes:
    if not (2 <= c.b_c <= 8 and 2 <= c.b_z <= 8):
        raise CodecError(f"bit-widths must lie in [2, 8], got b_c={c.b_c}, b_z={c.b_z}")
    header = _HEADER.pack(
        MAGIC, VERSION, *c.shape, c.d, c.k, c.n, c.b_c, c.b_z,
        _MODE_IDS[c.c_mode], _MODE_IDS[c.z_mode], c.nnz,
    )
    mask_bytes = np.packbits(c.mask.reshape(-1).astype(np.uint8), bitorder="little").tobytes()
    return b"".join([
        header,
        pack_fields(c.c_codes, c.b_c),
        mask_bytes,
        pack_fields(c.z_values, c.b_z),
        np.concatenate([c.c_scales, c.z_scales]).astype("<f2").tobytes(),
        c.mean.astype("<f4").tobytes(),
    ])


def _parse_header(blob: bytes):
    if len(blob) < HEADER_BYTES:
        raise CodecError(f"truncated container: {len(blob)} bytes, header needs {HEADER_BYTES}")
    magic, version, *fields = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CodecError("bad magic, not a QSPC container")
    if version != VERSION:
        raise CodecError(f"unsupported QSPC version {version}")
    f_out, f_in, h, w, d, k, n, b_c, b_z, c_mode, z_mode, nnz = fields
    if c_mode not in _MODE_NAMES or z_mode not in _MODE_NAMES:
        raise CodecError(f"unknown quantization mode ids ({c_mode}, {z_mode})")
    if not (2 <= b_c <= 8 and 2 <= b_z <= 8):
        raise CodecError(f"bit-widths out of range: b_c={b_c}, b_z={b_z}")
    if d * n != f_out * f_in * h * w:
        raise CodecError(f"header tile shape {d}x{n} inconsistent with weight shape {(f_out, f_in, h, w)}")
    if nnz > k * n:
        raise CodecError(f"stored count {nnz} exceeds latent size {k * n}")
    return (f_out, f_in, h, w), d, k, n, b_c, b_z, _MODE_NAMES[c_mode], _MODE_NAMES[z_mode], nnz


def layout(blob: bytes) -> StreamLayout:
    """Stream sizes implied by a container's header."""
    _, d, k, n, b_c, b_z, _, _, nnz = _parse_header(blob)
    return _stream_layout(d, k, n, b_c, b_z, nnz)


def from_bytes(blob: bytes) -> CompressedLayer:
    shape, d, k, n, b_c, b_z, c_mode, z_mode, nnz = _parse_header(blob)
    lay = _stream_layout(d, k, n, b_c, b_z, nnz)
    if len(blob) != lay.total_bytes:
        kind = "truncated" if len(blob) < lay.total_bytes else "oversized"
        raise CodecError(f"{kind} container: {len(blob)} bytes, header implies {lay.total_bytes}")
    pos = HEADER_BYTES

    def take(nbytes):
        nonlocal pos
        chunk = blob[pos:pos + nbytes]
        pos += nbytes
        return chunk

    c_codes = unpack_fields(take(lay.c_bytes), d * k, b_c, c_mode == SIGNED).reshape(d, k)
    mask_raw = np.unpackbits(np.frombuffer(take(lay.mask_bytes), dtype=np.uint8), bitorder="little")
    mask = mask_raw[:k * n].astype(bool).reshape(k, n)
    if int(mask.sum()) != nnz:
        raise CodecError(f"mask has {int(mask.sum())} set bits but header stores {nnz} values")
    z_values = unpack_fields(take(lay.z_bytes), nnz, b_z, z_mode == SIGNED)
    scales = np.frombuffer(take(lay.scale_bytes), dtype="<f2").astype(np.float64)
    if not np.all(scales > 0) or not np.all(np.isfinite(scales)):
        raise CodecError("container holds non-positive or non-finite scales")
    mean = np.frombuffer(take(lay.mean_bytes), dtype="<f4").astype(np.float64)
    return CompressedLayer(shape, d, k, n, b_c, b_z, c_mode, z_mode, c_codes, mask, z_values,
                           scales[:k], scales[k:], mean)


# -- size accounting --------------------------------------------------------


@dataclass(frozen=True)
class SizeReport:
    """Bit counts for one layer; ratios are exact fractions."""

    shape: tuple
    d: int
    k: int
    n: int
    b_c: int
    b_z: int
    nnz: int
    L_o: int
    L_c: int
    L_q: int
    codebook_bits: int
    mask_bits: int
    latent_bits: int

    @property
    def weight_elements(self) -> int:
        return int(np.prod(self.shape))

    @property
    def codebook_elements(self) -> int:
        return self.d * self.k

    @property
    def latent_elements(self) -> int:
        return self.k * self.n

    @property
    def r(self) -> Fraction:
        """Sparsity ratio ``1 - nnz / (k n)``."""
        return 1 - Fraction(self.nnz, self.latent_elements)

    @property
    def C_r(self) -> Fraction:
        return Fraction(self.L_o, self.L_c)

    @property
    def dense_latent_bits(self) -> int:
        """Latent stored densely: ``k n b_z``, no mask."""
        return self.latent_elements * self.b_z

    @property
    def sparse_latent_bits(self) -> int:
        return self.mask_bits + self.latent_bits

    @property
    def sparse_pays_off(self) -> bool:
        """Whether the mask+values encoding beats dense storage (``r > 1/b_z``)."""
        return self.r > Fraction(1, self.b_z)

    def as_dict(self) -> dict:
        return {
            "shape": list(self.shape), "d": self.d, "k": self.k, "n": self.n,
            "b_c": self.b_c, "b_z": self.b_z, "nnz": self.nnz,
            "weight_elements": self.weight_elements,
            "codebook_elements": self.codebook_elements,
            "latent_elements": self.latent_elements,
            "L_o": self.L_o, "L_c": self.L_c, "L_q": self.L_q,
            "r": float(self.r), "C_r": float(self.C_r),
            "sparse_pays_off": self.sparse_pays_off,
        }


def layer_size_bits(shape, d, k, b_c, b_z, r=None, nnz=None) -> SizeReport:
    """``L_c = d k b_c + k n + (1 - r) k n b_z + 2 k 16`` and ``L_o = 32 |W|``.

    Give either the stored nonzero count ``nnz`` or a sparsity ratio ``r``
    that corresponds to a whole number of nonzeros.
    """
    shape = tuple(int(s) for s in shape)
    size = int(np.prod(shape))
    if size % d:
        raise ValueError(f"tile size d={d} does not divide {size}")
    n = size // d
    kn = k * n
    if nnz is None:
        if r is None:
            raise ValueError("need either r or nnz")
        exact = (1 - Fraction(r).limit_denominator(10**12)) * kn
        if exact.denominator != 1:
            raise ValueError(f"sparsity ratio {r} gives a non-integral nonzero count {float(exact)}")
        nnz = int(exact)
    if not 0 <= nnz <= kn:
        raise ValueError(f"nonzero count {nnz} outside [0, {kn}]")
    L_q = 2 * k * SCALE_BITS
    codebook = d * k * b_c
    latent = nnz * b_z
    L_c = codebook + kn + latent + L_q
    return SizeReport(shape, d, k, n, b_c, b_z, nnz, size * FLOAT_BITS, L_c, L_q, codebook, kn, latent)


def report_for(F: FactorPair, shape) -> SizeReport:
    """Size report from a factor pair's actual stored nonzeros."""
    return layer_size_bits(shape, F.d, F.k, F.c_config.bits, F.z_config.bits, nnz=F.nnz())


def network_ratio(layers, L_u=0) -> Fraction:
    """``sum L_o / (L_u + sum L_c)`` over compressed layers."""
    layers = list(layers)
    if not layers:
        raise ValueError("network ratio needs at least one layer")
    if L_u < 0:
        raise ValueError(f"uncompressible size must be >= 0, got {L_u}")
    return Fraction(sum(l.L_o for l in layers)) / (Fraction(L_u) + sum(l.L_c for l in layers))


@dataclass(frozen=True)
class OverheadReport:
    base_macs: int
    reconstruction_macs: int
    b_c: int
    b_z: int

    @property
    def relative(self) -> Fraction:
        """Extra MACs relative to the forward pass (``k / p``)."""
        return Fraction(self.reconstruction_macs, self.base_macs)

    @property
    def bop_relative(self) -> Fraction:
        """Same ratio in bit operations, with 32-bit operands for the forward pass."""
        return Fraction(self.reconstruction_macs * self.b_c * self.b_z,
                        self.base_macs * FLOAT_BITS * FLOAT_BITS)

    def as_dict(self) -> dict:
        return {
            "base_macs": self.base_macs,
            "reconstruction_macs": self.reconstruction_macs,
            "relative": float(self.relative),
            "bop_relative": float(self.bop_relative),
        }


def overhead(shape, k, p, b_c=4, b_z=4) -> OverheadReport:
    if p < 1:
        raise ValueError(f"output spatial size p must be >= 1, got {p}")
    size = int(np.prod([int(s) for s in shape]))
    return OverheadReport(size * p, size * k, b_c, b_z)
