"""Image extension with a gated-conv generator and a feature-conditioned discriminator."""
from .config import RunConfig, desk_preset
from .discriminator import Discriminator, DiscriminatorConfig, build_discriminator
from .errors import (BoundlessError, CacheMissError, CheckpointError, ConfigError, DataError,
                     DegenerateEmbeddingError, EmbeddingLoadError, NumericalAbort)
from .evaluation import EvalReport, evaluate_model, evaluate_predictions, fid_diagonal, psnr_masked
from .generator import Generator, GeneratorConfig, build_generator
from .losses import LossWeights
from .masking import MaskSpec, apply_mask, build_mask, composite
from .panorama import PanoramaConfig, generate_panorama
from .trainer import ModelSpec, TrainingConfig, TrainingData, load_generator, train

__version__ = "0.1.0"

__all__ = [
    "RunConfig", "desk_preset",
    "Discriminator", "DiscriminatorConfig", "build_discriminator",
    "BoundlessError", "CacheMissError", "CheckpointError", "ConfigError", "DataError",
    "DegenerateEmbeddingError", "EmbeddingLoadError", "NumericalAbort",
    "EvalReport", "evaluate_model", "evaluate_predictions", "fid_diagonal", "psnr_masked",
    "Generator", "GeneratorConfig", "build_generator",
    "LossWeights",
    "MaskSpec", "apply_mask", "build_mask", "composite",
    "PanoramaConfig", "generate_panorama",
    "ModelSpec", "TrainingConfig", "TrainingData", "load_generator", "train",
]
