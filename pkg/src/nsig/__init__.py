"""Signature watermarking for grid radiance fields.

A frozen radiance field gets a secret bit string added to its finest feature
grid through a learned codebook. A small convolutional extractor reads the bits
back from patches rendered at a secret camera pose.
"""

from .caks import SecretKey, select_key
from .codebook import SignatureCodebook, codebook_init, embed, signature_representation
from .errors import CompatibilityError, ConfigError, ContractViolation, FormatError, KeySelectionError, NumericFailure
from .extractor import Extractor, binarize, bit_accuracy, extract_logits
from .field import CameraPose, FieldConfig, PoseDistribution, RadianceField
from .renderer import render_image, render_patch_set
from .scene import PretrainConfig, make_scene, pretrain
from .trainer import TrainConfig, optimize
from .verify import embed_batch, psnr, ssim, verify_model

__version__ = "0.1.0"

__all__ = [
    "CameraPose",
    "CompatibilityError",
    "ConfigError",
    "ContractViolation",
    "Extractor",
    "FieldConfig",
    "FormatError",
    "KeySelectionError",
    "NumericFailure",
    "PoseDistribution",
    "PretrainConfig",
    "RadianceField",
    "SecretKey",
    "SignatureCodebook",
    "TrainConfig",
    "binarize",
    "bit_accuracy",
    "codebook_init",
    "embed",
    "embed_batch",
    "extract_logits",
    "make_scene",
    "optimize",
    "pretrain",
    "psnr",
    "render_image",
    "render_patch_set",
    "select_key",
    "signature_representation",
    "ssim",
    "verify_model",
]
