"""Zero-shot human-object interaction detection with conditional
multi-modal prompts, at desk scale.

Pipeline: a synthetic scene generator stands in for a detection dataset,
a small contrastively-pretrained dual encoder stands in for a large
vision-language model, and the interaction head learns decoupled vision
and language prompts on top of the frozen towers. Splits, training,
prediction, and mAP evaluation are driven by the `hoiprompt` CLI.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    GenerationError,
    HoiPromptError,
    NumericalError,
    ParseError,
    ValidationError,
)
from .geometry import (
    BBox,
    GlobalSpatialPatterns,
    ImageSize,
    fit_global_spatial_patterns,
    iou,
    pairwise_spatial_features,
    union_box,
)

__all__ = [
    "__version__",
    "BBox",
    "ImageSize",
    "GlobalSpatialPatterns",
    "iou",
    "union_box",
    "pairwise_spatial_features",
    "fit_global_spatial_patterns",
    "HoiPromptError",
    "ValidationError",
    "ParseError",
    "ConfigError",
    "GenerationError",
    "NumericalError",
]
