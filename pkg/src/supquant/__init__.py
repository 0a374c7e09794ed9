"""Supervised composite quantization for semantic similarity search."""

from .dataset_io import (
    KernelMap,
    LabeledDataset,
    make_blobs,
    read_labels,
    read_vectors,
    split_dataset,
)
from .evaluation import EvalReport, average_precision, mean_average_precision
from .numerics import LbfgsConfig
from .quantizer import Codebooks, ModelBundle, load_model, save_model
from .search import build_table, scan, search, transform_query
from .trainer import TrainConfig, encode_unlabeled, train, validate_grid

__version__ = "0.1.0"

__all__ = [
    "Codebooks",
    "EvalReport",
    "KernelMap",
    "LabeledDataset",
    "LbfgsConfig",
    "ModelBundle",
    "TrainConfig",
    "average_precision",
    "build_table",
    "encode_unlabeled",
    "load_model",
    "make_blobs",
    "mean_average_precision",
    "read_labels",
    "read_vectors",
    "save_model",
    "scan",
    "search",
    "split_dataset",
    "train",
    "transform_query",
    "validate_grid",
]
