"""mAP at a fixed IoU threshold, all-points interpolation (VOC2010+ style)."""

from __future__ import annotations

import numpy as np

from .boxes import iou_matrix


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def evaluate_map(detections, ground_truth, num_classes: int, iou_threshold: float = 0.5) -> dict:
    """Per-class AP and their mean over classes that have ground truth.

    ``detections[i]`` is a list of ``(box, cls, score)`` for image ``i``;
    ``ground_truth[i]`` is ``(boxes, classes)``. A detection is a true
    positive when it overlaps a not-yet-claimed gt box of its class with
    IoU >= ``iou_threshold``.
    """
    ap = {}
    for c in range(num_classes):
        gts = {}
        n_gt = 0
        for i, (boxes, classes) in enumerate(ground_truth):
            b = np.asarray(boxes, dtype=float).reshape(-1, 4)[np.asarray(classes) == c]
            gts[i] = (b, np.zeros(len(b), dtype=bool))
            n_gt += len(b)
        if n_gt == 0:
            continue
        dets = [
            (float(score), i, np.asarray(box, dtype=float))
            for i, per_image in enumerate(detections)
            for box, cls, score in per_image
            if cls == c
        ]
        dets.sort(key=lambda t: -t[0])
        tp = np.zeros(len(dets))
        for k, (_, i, box) in enumerate(dets):
            b, used = gts.get(i, (np.zeros((0, 4)), np.zeros(0, bool)))
            if len(b) == 0:
                continue
            overlaps = iou_matrix(box, b)[0]
            j = int(overlaps.argmax())
            if overlaps[j] >= iou_threshold and not used[j]:
                used[j] = True
                tp[k] = 1.0
        ctp = np.cumsum(tp)
        recall = ctp / n_gt
        precision = ctp / np.maximum(np.arange(1, len(dets) + 1), 1)
        ap[c] = average_precision(recall, precision) if dets else 0.0
    mean_ap = float(np.mean(list(ap.values()))) if ap else 0.0
    return {"ap": ap, "map": mean_ap}
