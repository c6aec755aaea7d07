"""U-Net segmentation engine with an optional GSConv + ECA variant, built on a small numpy autograd."""
from .blocks import ModelConfig, Model, build_model, count_parameters
from .data_io import load_checkpoint, pair_dataset, save_checkpoint, write_metrics_csv
from .errors import ConfigError, DataError, GseUnetError, NumericalError, ShapeError, UsageError
from .estimator import HistogramEqualizer, UNetSegmenter
from .preprocess import equalize, preprocess_image
from .tensor import Tape, Tensor
from .training import MetricRecord, TrainConfig, evaluate, miou, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "GseUnetError", "HistogramEqualizer", "MetricRecord", "Model",
    "ModelConfig", "NumericalError", "ShapeError", "Tape", "Tensor", "TrainConfig", "UNetSegmenter",
    "UsageError", "build_model", "count_parameters", "equalize", "evaluate", "load_checkpoint", "miou",
    "pair_dataset", "preprocess_image", "save_checkpoint", "train", "write_metrics_csv",
]
