"""Sparse voxel point cloud codec with stage-wise and residual context models."""

from .codec import (CodecConfig, DecodeResult, EncodeReport, ModelBundle, decode,
                    encode, level_counts, select_start_level, stream_report,
                    train_grc_model, train_stagewise_model)
from .errors import CodecError
from .geometry import (QuantParams, build_levels, cart_to_spherical, dequantize_points,
                       derive_quant_params, morton_decode, morton_encode,
                       quantize_points, sort_unique, spherical_to_cart)
from .metrics import bits_per_point, max_nn_error, psnr_d1, psnr_d2
from .ply_io import read_ply, write_ply
from .residual import RpaModel
from .stagewise import StagewiseModel
from .synthetic import synthetic_cloud, synthetic_points

__version__ = "0.1.0"

__all__ = [
    "CodecConfig", "DecodeResult", "EncodeReport", "ModelBundle", "decode", "encode",
    "level_counts", "select_start_level", "stream_report", "train_grc_model",
    "train_stagewise_model", "CodecError", "QuantParams", "build_levels",
    "cart_to_spherical", "dequantize_points", "derive_quant_params", "morton_decode",
    "morton_encode", "quantize_points", "sort_unique", "spherical_to_cart",
    "bits_per_point", "max_nn_error", "psnr_d1", "psnr_d2", "read_ply", "write_ply",
    "RpaModel", "StagewiseModel", "synthetic_cloud", "synthetic_points", "__version__",
]
