"""petcascade: a desk-scale cascaded detection/segmentation pipeline for
synthetic PET-like volumes (slice classifier -> tumor detector -> ROI
segmentor), with a single-step 3D baseline for comparison."""

from .dataio import (BoundingBox, DatasetManifest, MaskVolume, SliceAnnotation,
                     ValidationError, Volume3D)
from .losses import LossConfig
from .models import TrainConfig
from .phantom import PhantomCase, PhantomConfig

__version__ = "0.1.0"

__all__ = [
    "BoundingBox", "DatasetManifest", "LossConfig", "MaskVolume", "PhantomCase",
    "PhantomConfig", "SliceAnnotation", "TrainConfig", "ValidationError", "Volume3D",
    "__version__",
]
