"""Crowd counting with hierarchical attention and weakly supervised adaptation."""

__version__ = "0.1.0"

from .density import (
    DEFAULT_CLASS_BOUNDARIES,
    DEFAULT_SEG_THRESHOLD,
    DEFAULT_SIGMA,
    DENSITY_CLASS_NAMES,
    ClassBoundaries,
    DensityMap,
    PointAnnotation,
    SegmentationMask,
    assign_density_class,
    boundaries_from_counts,
    derive_segmentation_mask,
    downsample_density_map,
    generate_density_map,
)
from .model import (
    CountingNetwork,
    ModelConfig,
    ablation_config,
    build_model,
    load_checkpoint,
    save_checkpoint,
)

__all__ = [
    "DEFAULT_CLASS_BOUNDARIES",
    "DEFAULT_SEG_THRESHOLD",
    "DEFAULT_SIGMA",
    "DENSITY_CLASS_NAMES",
    "ClassBoundaries",
    "CountingNetwork",
    "DensityMap",
    "ModelConfig",
    "PointAnnotation",
    "SegmentationMask",
    "ablation_config",
    "assign_density_class",
    "boundaries_from_counts",
    "build_model",
    "derive_segmentation_mask",
    "downsample_density_map",
    "generate_density_map",
    "load_checkpoint",
    "save_checkpoint",
]
