"""Multimodal (text + image) sentiment classification with expert-feature fusion."""

from .dataset import Dataset, Sample, load_manifest, make_folds, make_split
from .encoders import BRANCHES, FeatureBundle, FeatureRecord, StubBackend
from .errors import ConfigError, DataError, ManifestError, VtsentError
from .featurestore import FeatureStore, materialize_bundles
from .fusion import FusionModel, ModelSpec, build_model
from .metrics import compute_metrics
from .textnorm import NormPolicy, normalize
from .training import TrainConfig, default_config, train_pipeline, train_stage

__version__ = "0.1.0"

__all__ = [
    "BRANCHES", "ConfigError", "DataError", "Dataset", "FeatureBundle", "FeatureRecord", "FeatureStore",
    "FusionModel", "ManifestError", "ModelSpec", "NormPolicy", "Sample", "StubBackend", "TrainConfig",
    "VtsentError", "build_model", "compute_metrics", "default_config", "load_manifest", "make_folds",
    "make_split", "materialize_bundles", "normalize", "train_pipeline", "train_stage",
]
