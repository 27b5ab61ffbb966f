"""Image autoencoders with KL / VQ / LFQ / FSQ latent regularizers."""
from .config import CodecConfig
from .io import load_codec, read_encoded, save_codec, write_encoded
from .model import Autoencoder, CodecOutput, to_uint8, to_unit
from .quantizers import (
    fsq_codes_to_ids,
    fsq_ids_to_codes,
    fsq_levels_of,
    fsq_quantize,
    kl_regularize,
    lfq_codes,
    lfq_ids,
    lfq_quantize,
    nearest_codes,
    vq_quantize,
)
from .train import ReconReport, code_stats, codec_metrics, psnr, recon_report, train_autoencoder

__all__ = [
    "Autoencoder", "CodecConfig", "CodecOutput", "ReconReport", "code_stats", "codec_metrics",
    "fsq_codes_to_ids", "fsq_ids_to_codes", "fsq_levels_of", "fsq_quantize", "kl_regularize",
    "lfq_codes", "lfq_ids", "lfq_quantize", "load_codec", "nearest_codes", "psnr", "read_encoded",
    "recon_report", "save_codec", "to_uint8", "to_unit", "train_autoencoder", "vq_quantize",
    "write_encoded",
]
