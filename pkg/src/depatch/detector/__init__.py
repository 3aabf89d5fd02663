from .base import (BBox, Detection, DetectorAdapter, Predictions, best_iou, box_iou, iou,
                   load_detector, nms, register_detector, registered_detectors)
from . import toy  # noqa: F401  registers "toy"

__all__ = ["BBox", "Detection", "DetectorAdapter", "Predictions", "best_iou", "box_iou", "iou",
           "load_detector", "nms", "register_detector", "registered_detectors"]
