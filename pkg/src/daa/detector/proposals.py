"""Proposal provider standing in for an RPN at toy scale.

Training proposals are jittered copies of reference boxes (ground truth on
source images, current top predictions on target images) mixed with
uniformly random rectangles. Inference uses a fixed dense anchor grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import clip_boxes


@dataclass(frozen=True)
class ProposalConfig:
    budget: int = 16
    jitter: float = 0.2
    min_size: float = 4.0
    max_size: float = 20.0
    anchor_sizes: tuple = (8.0, 11.0, 14.0)
    anchor_stride: int = 4


def jitter_boxes(rng: np.random.Generator, boxes: np.ndarray, n: int, jitter: float, image_size: int) -> np.ndarray:
    """``n`` copies cycling through ``boxes``, each corner moved by up to
    ``jitter`` times the box width/height."""
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    src = boxes[np.arange(n) % len(boxes)]
    w = (src[:, 2] - src[:, 0])[:, None]
    h = (src[:, 3] - src[:, 1])[:, None]
    noise = rng.uniform(-jitter, jitter, size=(n, 4))
    out = src + noise * np.concatenate([w, h, w, h], axis=1)
    return clip_boxes(out, image_size, min_size=2.0)


def random_boxes(rng: np.random.Generator, n: int, image_size: int, min_size: float, max_size: float) -> np.ndarray:
    max_size = min(max_size, image_size)
    w = rng.uniform(min_size, max_size, size=n)
    h = rng.uniform(min_size, max_size, size=n)
    x1 = rng.uniform(0, 1, size=n) * (image_size - w)
    y1 = rng.uniform(0, 1, size=n) * (image_size - h)
    return np.stack([x1, y1, x1 + w, y1 + h], axis=1)


def generate_proposals(rng: np.random.Generator, reference_boxes, image_size: int, config: ProposalConfig = ProposalConfig()) -> np.ndarray:
    """Half the budget jittered around ``reference_boxes``, the rest random.

    With no reference boxes the whole budget is random.
    """
    ref = np.asarray(reference_boxes, dtype=float).reshape(-1, 4)
    n_jit = config.budget // 2 if len(ref) else 0
    parts = []
    if n_jit:
        parts.append(jitter_boxes(rng, ref, n_jit, config.jitter, image_size))
    parts.append(random_boxes(rng, config.budget - n_jit, image_size, config.min_size, config.max_size))
    return np.concatenate(parts, axis=0)


def anchor_grid(image_size: int, config: ProposalConfig = ProposalConfig()) -> np.ndarray:
    s = config.anchor_stride
    centers = np.arange(s, image_size, s, dtype=float)
    out = []
    for cy in centers:
        for cx in centers:
            for size in config.anchor_sizes:
                out.append([cx - size / 2, cy - size / 2, cx + size / 2, cy + size / 2])
    return clip_boxes(np.asarray(out), image_size, min_size=2.0)
