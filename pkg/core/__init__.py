"""Core modules for the TransPro desk: volumes, phantoms, networks, losses, metrics and evaluation."""

from .config import ExperimentConfig, load_config
from .errors import TransProError
from .metrics import MetricsReport, WeightingConfig
from .phantom import PhantomConfig, PhantomDataset
from .volumes import MaskSource, ProjectionMap, VesselMask, Volume, project_mean

__all__ = [
    "ExperimentConfig",
    "load_config",
    "TransProError",
    "MetricsReport",
    "WeightingConfig",
    "PhantomConfig",
    "PhantomDataset",
    "MaskSource",
    "ProjectionMap",
    "VesselMask",
    "Volume",
    "project_mean",
]
