"""Quantized sparse PCA for convolution weight compression."""
from .codec import decode, encode, layer_size_bits, network_ratio, overhead
from .factorizer import (
    CalibrationSet,
    FactorPair,
    FixedIterations,
    SolverConfig,
    ValidationPatience,
    reconstruct,
    solve,
    svd_init,
)
from .pipeline import compress_layer, synthetic_layer
from .quantizer import QuantConfig, quantize
from .tensor_core import ConvSpec, TileMatrix, WeightTensor, center, tile_reshape, untile_reshape

__version__ = "0.1.0"

__all__ = [
    "decode", "encode", "layer_size_bits", "network_ratio", "overhead",
    "CalibrationSet", "FactorPair", "FixedIterations", "SolverConfig", "ValidationPatience",
    "reconstruct", "solve", "svd_init", "compress_layer", "synthetic_layer",
    "QuantConfig", "quantize", "ConvSpec", "TileMatrix", "WeightTensor", "center",
    "tile_reshape", "untile_reshape",
]
