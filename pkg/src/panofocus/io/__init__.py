"""File formats, run configuration and image access."""

from panofocus.io.formats import (
    FormatError,
    annotations_to_dict,
    dumps_detections,
    dumps_predictions,
    dumps_weights,
    features_record,
    load_annotations,
    load_detections,
    load_predictions,
    load_weights,
    save_annotations,
    save_detections,
    save_predictions,
    save_weights,
)

__all__ = [
    "FormatError",
    "annotations_to_dict",
    "dumps_detections",
    "dumps_predictions",
    "dumps_weights",
    "features_record",
    "load_annotations",
    "load_detections",
    "load_predictions",
    "load_weights",
    "save_annotations",
    "save_detections",
    "save_predictions",
    "save_weights",
]
