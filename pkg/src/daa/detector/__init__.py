"""Miniature two-stage detector: backbone, proposal provider, ROI head."""

from .boxes import clip_boxes, decode, encode, iou, iou_matrix, nms
from .evaluation import average_precision, evaluate_map
from .model import Backbone, PredictionHead, detection_loss, match_proposals, postprocess
from .proposals import ProposalConfig, anchor_grid, generate_proposals

__all__ = [
    "Backbone",
    "PredictionHead",
    "ProposalConfig",
    "anchor_grid",
    "average_precision",
    "clip_boxes",
    "decode",
    "detection_loss",
    "encode",
    "evaluate_map",
    "generate_proposals",
    "iou",
    "iou_matrix",
    "match_proposals",
    "nms",
    "postprocess",
]
