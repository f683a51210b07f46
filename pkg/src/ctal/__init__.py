"""Continuous anchoring for temporal action localization.

Segments are scored at arbitrary real-valued coordinates by a small MLP
conditioned on interpolated snippet features, refined over several recurrent
stages, and evaluated with the usual mAP / length-group harness. Everything
runs on numpy; ``ctal.data`` synthesises planted-segment datasets to train on.
"""
__version__ = "0.1.0"

from .geometry import Segment, TimeGrid, OffsetPair, tiou
from .postproc import Detection, soft_nms, top_q
from .evaluation import GroundTruth, evaluate

__all__ = ["Segment", "TimeGrid", "OffsetPair", "tiou", "Detection", "soft_nms", "top_q",
           "GroundTruth", "evaluate", "__version__"]
