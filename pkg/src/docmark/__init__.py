"""docmark: end-to-end trainable blind watermarking for document images."""

from .codec import Codec, CodecMeta, DecoderNet, EncoderNet, add_mask
from .dataset import DatasetHandle, DocumentSpec, batches, build_dataset, render_document
from .distortions import DistortionSpec, NoiseRegime
from .errors import (
    DocmarkError,
    GenerationError,
    InvalidConfigError,
    InvalidInputError,
    InvalidParameterError,
    TrainingDiagnosticError,
)
from .evaluation import EvalReport, default_grid, evaluate, report_write, strength_sweep
from .imaging import QualityReport, bit_accuracy, cpp, psnr, quality_report, ssim, text_pixel_mask
from .losses import LossBreakdown, LossWeights, image_loss, lambda_ramp, text_loss, total_loss, watermark_loss
from .training import TrainConfig, TrainResult, make_variant, train, train_step

__version__ = "0.1.0"

__all__ = [
    "Codec", "CodecMeta", "EncoderNet", "DecoderNet", "add_mask",
    "DatasetHandle", "DocumentSpec", "batches", "build_dataset", "render_document",
    "DistortionSpec", "NoiseRegime",
    "DocmarkError", "GenerationError", "InvalidConfigError", "InvalidInputError",
    "InvalidParameterError", "TrainingDiagnosticError",
    "EvalReport", "default_grid", "evaluate", "report_write", "strength_sweep",
    "QualityReport", "bit_accuracy", "cpp", "psnr", "quality_report", "ssim", "text_pixel_mask",
    "LossBreakdown", "LossWeights", "image_loss", "lambda_ramp", "text_loss",
    "total_loss", "watermark_loss",
    "TrainConfig", "TrainResult", "make_variant", "train", "train_step",
]
