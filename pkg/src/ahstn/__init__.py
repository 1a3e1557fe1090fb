"""Adaptive hierarchical spatio-temporal network for multi-step traffic forecasting."""

from .graph import GraphSpec, build_gaussian_adjacency, gcn_forward, normalize
from .hierarchy import (
    AssignmentState,
    ClusterGraph,
    cluster_count,
    downsample,
    momentum_update,
    propose_assignment,
    upsample,
)
from .model import AHSTNModel, ModelConfig, build_variant, load_checkpoint, save_checkpoint
from .training import (
    Adam,
    DatasetSplits,
    Normalizer,
    TrainSettings,
    WindowedDataset,
    make_windows,
    masked_mae_loss,
    metrics,
    train,
)
from .data import RawSeries, SyntheticSpec, assignment_quality, generate_synthetic, load_series

__version__ = "0.1.0"

__all__ = [
    "GraphSpec",
    "build_gaussian_adjacency",
    "gcn_forward",
    "normalize",
    "AssignmentState",
    "ClusterGraph",
    "cluster_count",
    "downsample",
    "momentum_update",
    "propose_assignment",
    "upsample",
    "AHSTNModel",
    "ModelConfig",
    "build_variant",
    "load_checkpoint",
    "save_checkpoint",
    "Adam",
    "DatasetSplits",
    "Normalizer",
    "TrainSettings",
    "WindowedDataset",
    "make_windows",
    "masked_mae_loss",
    "metrics",
    "train",
    "RawSeries",
    "SyntheticSpec",
    "assignment_quality",
    "generate_synthetic",
    "load_series",
    "__version__",
]
