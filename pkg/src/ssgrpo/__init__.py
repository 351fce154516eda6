"""Spatial-semantic rewarded GRPO for box grounding, at desk scale."""

from ssgrpo.core import BBox, GroundingSample, ImageRef, box_area, box_intersection, box_iou

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "GroundingSample",
    "ImageRef",
    "box_area",
    "box_intersection",
    "box_iou",
]
