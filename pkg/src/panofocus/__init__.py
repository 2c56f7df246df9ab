"""panofocus: panoramic detection refinement, hierarchical prototype encoding
and multi-granularity activity evaluation."""

__version__ = "0.1.0"

from panofocus.geometry import Box, FrameSpec, clip_box, iou, overlaps, union_box

__all__ = ["Box", "FrameSpec", "clip_box", "iou", "overlaps", "union_box", "__version__"]
