"""Backbone G1/G2/G3 and the ROI prediction head."""

from __future__ import annotations

import numpy as np

from ..autodiff import Conv2d, Linear, Module, Tensor, ops
from ..autodiff.tensor import ShapeError
from . import boxes as bx

STRIDE = 8


class Backbone(Module):
    """Three conv blocks, each two 3x3 convs with ReLU; the second conv of a
    block has stride 2, so the blocks emit maps at strides 2, 4 and 8."""

    def __init__(self, rng: np.random.Generator, widths=(16, 32, 64), in_channels: int = 3):
        self.widths = tuple(widths)
        blocks = []
        c_in = in_channels
        for c in self.widths:
            blocks.append(
                [Conv2d(rng, c_in, c, 3, stride=1, padding=1), Conv2d(rng, c, c, 3, stride=2, padding=1)]
            )
            c_in = c
        self.g1, self.g2, self.g3 = (_Block(b) for b in blocks)

    def __call__(self, image: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        x = image if image.ndim == 4 else image.reshape((1,) + image.shape)
        h, w = x.shape[-2:]
        if h % STRIDE or w % STRIDE:
            raise ShapeError(f"backbone input {h}x{w} must be divisible by {STRIDE}")
        x = x - 0.5  # centre [0, 1] pixels
        z1 = self.g1(x)
        z2 = self.g2(z1)
        z3 = self.g3(z2)
        return z1, z2, z3


class _Block(Module):
    def __init__(self, convs):
        self.convs = list(convs)

    def __call__(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = ops.relu(conv(x))
        return x


class PredictionHead(Module):
    """ROI-pooled features -> two FC layers -> (K+1 class logits, 4 box offsets).

    ``stride`` is the downsampling factor of the map passed to :meth:`pool`.
    """

    def __init__(self, rng, in_channels: int, num_classes: int, pool_size=(2, 2), hidden: int = 64, stride: int = 4):
        self.pool_size = tuple(pool_size)
        self.stride = stride
        self.num_classes = num_classes
        flat = in_channels * self.pool_size[0] * self.pool_size[1]
        self.fc1 = Linear(rng, flat, hidden)
        self.fc2 = Linear(rng, hidden, hidden)
        self.cls = Linear(rng, hidden, num_classes + 1)
        self.bbox = Linear(rng, hidden, 4)

    def pool(self, feature: Tensor, proposals: np.ndarray) -> Tensor:
        pooled = ops.roi_pool(feature, proposals, self.pool_size, 1.0 / self.stride)
        return pooled.reshape((pooled.shape[0], -1))

    def __call__(self, instance_features: Tensor) -> tuple[Tensor, Tensor]:
        h = ops.relu(self.fc1(instance_features))
        h = ops.relu(self.fc2(h))
        return self.cls(h), self.bbox(h)


def match_proposals(proposals: np.ndarray, gt_boxes: np.ndarray, gt_classes, iou_fg: float = 0.5):
    """Label each proposal with ``class + 1`` (0 = background) and the
    offset target to its best-overlapping gt box."""
    n = len(proposals)
    labels = np.zeros(n, dtype=np.intp)
    targets = np.zeros((n, 4))
    gt_boxes = np.asarray(gt_boxes, dtype=float).reshape(-1, 4)
    if n == 0 or len(gt_boxes) == 0:
        return labels, targets
    overlaps = bx.iou_matrix(proposals, gt_boxes)
    best = overlaps.argmax(axis=1)
    fg = overlaps[np.arange(n), best] >= iou_fg
    labels[fg] = np.asarray(gt_classes, dtype=np.intp)[best[fg]] + 1
    targets[fg] = bx.encode(proposals[fg], gt_boxes[best[fg]])
    return labels, targets


def detection_loss(cls_logits: Tensor, box_deltas: Tensor, labels, box_targets, box_weight: float = 1.0) -> Tensor:
    """Mean softmax CE over all proposals plus mean smooth-L1 over fg proposals."""
    labels = np.asarray(labels, dtype=np.intp)
    loss = ops.softmax_ce(cls_logits, labels)
    fg = np.flatnonzero(labels > 0)
    if fg.size:
        loss = loss + box_weight * ops.smooth_l1(ops.take_rows(box_deltas, fg), np.asarray(box_targets)[fg])
    return loss


def postprocess(
    proposals: np.ndarray,
    cls_logits: np.ndarray,
    box_deltas: np.ndarray,
    image_size: int,
    score_threshold: float = 0.05,
    nms_iou: float = 0.5,
    max_detections: int = 20,
):
    """Softmax, decode, threshold and per-class NMS. Returns ``(box, cls, score)`` tuples."""
    probs = ops.softmax(cls_logits)
    decoded = bx.clip_boxes(bx.decode(proposals, box_deltas), image_size)
    out = []
    for c in range(probs.shape[1] - 1):
        scores = probs[:, c + 1]
        keep = np.flatnonzero(scores > score_threshold)
        if keep.size == 0:
            continue
        kept = keep[bx.nms(decoded[keep], scores[keep], nms_iou)]
        out.extend((decoded[i].copy(), c, float(scores[i])) for i in kept)
    out.sort(key=lambda t: -t[2])
    return out[:max_detections]
