"""FaceChannel affect regression: shunting-inhibition convnet, masked-face
dataset generation, fine-tuning schemes, CCC evaluation, TPE search and
saliency export."""

__version__ = "0.1.0"

from .dataset import DatasetManifest, PreprocessConfig, Sample, batch_stream, load_image, parse_manifest
from .metrics import CCCReport, ccc, evaluate, render_report
from .model import (
    FaceChannelModel,
    FreezeScheme,
    ModelConfig,
    apply_freeze_policy,
    build_model,
    count_parameters,
    load_weights,
    save_weights,
    shunting_forward,
)

__all__ = [
    "CCCReport",
    "DatasetManifest",
    "FaceChannelModel",
    "FreezeScheme",
    "ModelConfig",
    "PreprocessConfig",
    "Sample",
    "apply_freeze_policy",
    "batch_stream",
    "build_model",
    "ccc",
    "count_parameters",
    "evaluate",
    "load_image",
    "load_weights",
    "parse_manifest",
    "render_report",
    "save_weights",
    "shunting_forward",
]
