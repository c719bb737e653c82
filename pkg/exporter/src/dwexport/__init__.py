"""Framework-side exporter: trains reference CNNs and writes engine archives."""

from .archive import file_sha256, write_dataset_archive, write_idx_pair
from .data import shape_set
from .errors import CountMismatchError, ExportError, RangeError, UnsupportedLayerError
from .export import export_dataset, export_model, model_to_layers
from .models import CnnSpec, Conv2dSame, FilterResponseNorm2d, GlobalAvgPool, SmallResNet
from .training import TrainSettings, accuracy, train_cnn

__all__ = [
    "CnnSpec",
    "Conv2dSame",
    "CountMismatchError",
    "ExportError",
    "FilterResponseNorm2d",
    "GlobalAvgPool",
    "RangeError",
    "SmallResNet",
    "TrainSettings",
    "UnsupportedLayerError",
    "accuracy",
    "export_dataset",
    "export_model",
    "file_sha256",
    "model_to_layers",
    "shape_set",
    "train_cnn",
    "write_dataset_archive",
    "write_idx_pair",
]
