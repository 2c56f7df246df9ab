"""Coarse-to-fine detection refinement for wide panoramic frames."""

from panofocus.focuser.adapters import (
    AdapterError,
    CommandDetector,
    DetectorAdapter,
    FileDetector,
    NullDetector,
)
from panofocus.focuser.core import (
    FocuserConfig,
    FocusResult,
    RegionError,
    SubRegion,
    adaptive_resize,
    crop_bounds,
    dense_region_merge,
    focus_frame,
    fuse_detections,
    refine_regions,
    run_focuser,
)

__all__ = [
    "AdapterError",
    "CommandDetector",
    "DetectorAdapter",
    "FileDetector",
    "FocusResult",
    "FocuserConfig",
    "NullDetector",
    "RegionError",
    "SubRegion",
    "adaptive_resize",
    "crop_bounds",
    "dense_region_merge",
    "focus_frame",
    "fuse_detections",
    "refine_regions",
    "run_focuser",
]
