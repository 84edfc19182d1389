"""Axis-aligned box helpers. Boxes are ``(x1, y1, x2, y2)`` in pixels."""

from __future__ import annotations

import numpy as np


def iou(a, b) -> float:
    return float(iou_matrix(np.asarray(a, float)[None], np.asarray(b, float)[None])[0, 0])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def encode(proposals: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """(dx, dy, dw, dh) offsets taking each proposal onto its target."""
    pw = proposals[:, 2] - proposals[:, 0]
    ph = proposals[:, 3] - proposals[:, 1]
    px = proposals[:, 0] + 0.5 * pw
    py = proposals[:, 1] + 0.5 * ph
    tw = targets[:, 2] - targets[:, 0]
    th = targets[:, 3] - targets[:, 1]
    tx = targets[:, 0] + 0.5 * tw
    ty = targets[:, 1] + 0.5 * th
    return np.stack([(tx - px) / pw, (ty - py) / ph, np.log(tw / pw), np.log(th / ph)], axis=1)


def decode(proposals: np.ndarray, offsets: np.ndarray, max_log: float = 2.0) -> np.ndarray:
    pw = proposals[:, 2] - proposals[:, 0]
    ph = proposals[:, 3] - proposals[:, 1]
    px = proposals[:, 0] + 0.5 * pw
    py = proposals[:, 1] + 0.5 * ph
    cx = px + offsets[:, 0] * pw
    cy = py + offsets[:, 1] * ph
    w = pw * np.exp(np.clip(offsets[:, 2], -max_log, max_log))
    h = ph * np.exp(np.clip(offsets[:, 3], -max_log, max_log))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def clip_boxes(boxes: np.ndarray, size: int, min_size: float = 1.0) -> np.ndarray:
    """Clip into ``[0, size]`` and keep at least ``min_size`` extent."""
    b = np.clip(np.asarray(boxes, dtype=float), 0.0, float(size))
    for lo, hi in ((0, 2), (1, 3)):
        short = b[:, hi] - b[:, lo] < min_size
        b[short, hi] = np.minimum(b[short, lo] + min_size, size)
        b[short, lo] = b[short, hi] - min_size
    return b


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float = 0.5) -> np.ndarray:
    """Greedy non-maximum suppression; returns kept indices by descending score."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    overlaps = iou_matrix(boxes[order], boxes[order])
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for k in range(len(order)):
        if not alive[k]:
            continue
        keep.append(order[k])
        alive &= overlaps[k] < iou_threshold
    return np.asarray(keep, dtype=np.intp)
