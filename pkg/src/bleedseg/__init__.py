"""Semi-supervised binary segmentation with a mean-teacher attention U-Net."""

from .config import (
    AppConfig,
    DataConfig,
    build_split,
    build_synthetic_split,
    load_config,
)
from .data import (
    Batch,
    DatasetSplit,
    ImageSample,
    PolygonAnnotation,
    PolygonShape,
    generate_synthetic,
    rasterize_polygons,
    select_label_budget,
    split_by_patient,
)
from .experiment import ExperimentResult, ExperimentSpec, run_experiment
from .losses import LossBreakdown, LossWeights
from .metrics import Confusion, MetricReport, evaluate
from .model import ModelConfig, NoiseConfig, ParamSet, init_params, unet_forward
from .trainer import (
    Checkpoint,
    TrainConfig,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AppConfig",
    "Batch",
    "Checkpoint",
    "Confusion",
    "DataConfig",
    "DatasetSplit",
    "ExperimentResult",
    "ExperimentSpec",
    "ImageSample",
    "LossBreakdown",
    "LossWeights",
    "MetricReport",
    "ModelConfig",
    "NoiseConfig",
    "ParamSet",
    "PolygonAnnotation",
    "PolygonShape",
    "TrainConfig",
    "build_split",
    "build_synthetic_split",
    "evaluate",
    "generate_synthetic",
    "init_params",
    "load_checkpoint",
    "load_config",
    "predict",
    "rasterize_polygons",
    "run_experiment",
    "save_checkpoint",
    "select_label_budget",
    "split_by_patient",
    "train",
    "unet_forward",
    "__version__",
]
