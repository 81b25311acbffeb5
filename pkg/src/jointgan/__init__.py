"""Jointly trained text encoder and multi-stage attention GAN for text-to-image synthesis.

The pipeline: a bidirectional recurrent text encoder produces per-word
features and a sentence vector; a three-stage decoder with per-scale noise
injection and word attention generates an image pyramid; per-scale
discriminators score realism and caption consistency; an image-text matching
loss ties generated regions to words. The trainer's fully_trained mode
updates the text encoder together with the decoder, its split mode freezes
the encoder as a baseline.
"""

from .corpus import (
    CaptionBatch,
    DatasetManifest,
    ImageBatch,
    Vocabulary,
    build_vocabulary,
    encode_caption,
    load_manifest,
    make_batch,
    tokenize,
)
from .damsm import (
    DamsmConfig,
    ImageEncoder,
    ImageEncoderConfig,
    ImageTextFeatures,
    damsm_loss,
    matching_score,
    pretrain_damsm,
)
from .discriminators import (
    DiscriminatorConfig,
    DiscriminatorOutput,
    StageDiscriminator,
    build_discriminators,
)
from .errors import CheckpointMismatchError, DatasetError, TrainingDivergedError
from .generator import (
    AttentionStack,
    Generator,
    GeneratorConfig,
    ImagePyramid,
    NoiseInjection,
    NoiseVector,
    WordAttention,
)
from .losses import (
    LossReport,
    discriminator_loss,
    generator_stage_loss,
    total_generator_loss,
)
from .metrics import (
    ColorStatBackend,
    EmbeddingBackend,
    FeatureCache,
    MetricReport,
    ToyCnnBackend,
    compute_metrics,
    evaluate_checkpoint,
    fid,
    fsd,
    fss,
    inception_score,
    train_toy_backend,
)
from .text_encoder import SentenceVector, TextEncoder, TextEncoderConfig, WordFeatures
from .trainer import TrainConfig, Trainer, export_attention, sample, train

__version__ = "0.1.0"

__all__ = [
    "CaptionBatch",
    "DatasetManifest",
    "ImageBatch",
    "Vocabulary",
    "build_vocabulary",
    "encode_caption",
    "load_manifest",
    "make_batch",
    "tokenize",
    "DamsmConfig",
    "ImageEncoder",
    "ImageEncoderConfig",
    "ImageTextFeatures",
    "damsm_loss",
    "matching_score",
    "pretrain_damsm",
    "DiscriminatorConfig",
    "DiscriminatorOutput",
    "StageDiscriminator",
    "build_discriminators",
    "CheckpointMismatchError",
    "DatasetError",
    "TrainingDivergedError",
    "AttentionStack",
    "Generator",
    "GeneratorConfig",
    "ImagePyramid",
    "NoiseInjection",
    "NoiseVector",
    "WordAttention",
    "LossReport",
    "discriminator_loss",
    "generator_stage_loss",
    "total_generator_loss",
    "ColorStatBackend",
    "EmbeddingBackend",
    "FeatureCache",
    "MetricReport",
    "ToyCnnBackend",
    "compute_metrics",
    "evaluate_checkpoint",
    "fid",
    "fsd",
    "fss",
    "inception_score",
    "train_toy_backend",
    "SentenceVector",
    "TextEncoder",
    "TextEncoderConfig",
    "WordFeatures",
    "TrainConfig",
    "Trainer",
    "export_attention",
    "sample",
    "train",
    "__version__",
]
