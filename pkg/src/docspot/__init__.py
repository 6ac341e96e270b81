"""docspot: pattern spotting and document retrieval for page images."""

__version__ = "0.1.0"

from .geometry import BBox, ScoredBox, iou, nms  # noqa: F401
