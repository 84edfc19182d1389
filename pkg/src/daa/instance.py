"""Foreground/background aware proposal-level alignment."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import BatchNorm, Linear, Module, Tensor, ops
from .detector.boxes import iou_matrix
from .grl import grl_forward

logger = logging.getLogger(__name__)


@dataclass
class PartitionedProposals:
    """Indices of foreground and background proposals into ``boxes``.

    Proposals in neither list are excluded from alignment.
    """

    boxes: np.ndarray
    fg: np.ndarray
    bg: np.ndarray

    @property
    def fg_boxes(self) -> np.ndarray:
        return self.boxes[self.fg]

    @property
    def bg_boxes(self) -> np.ndarray:
        return self.boxes[self.bg]


def _empty_index() -> np.ndarray:
    return np.zeros(0, dtype=np.intp)


def partition_source(proposals, gt_boxes, iou_fg_threshold: float = 0.5) -> PartitionedProposals:
    proposals = np.asarray(proposals, dtype=float).reshape(-1, 4)
    gt = np.asarray(gt_boxes, dtype=float).reshape(-1, 4)
    if len(proposals) == 0:
        return PartitionedProposals(proposals, _empty_index(), _empty_index())
    if len(gt) == 0:
        best = np.zeros(len(proposals))
    else:
        best = iou_matrix(proposals, gt).max(axis=1)
    fg = best >= iou_fg_threshold
    return PartitionedProposals(proposals, np.flatnonzero(fg), np.flatnonzero(~fg))


def partition_target(
    proposals, class_scores, score_threshold: float = 0.9, object_rule: str = "max"
) -> PartitionedProposals:
    """Select confident target proposals from softmax class scores.

    Column 0 of ``class_scores`` is the background class. A proposal is
    background when its background score exceeds the threshold and
    foreground when its object score does (``max`` over object classes, or
    their ``sum``). Everything else is dropped.
    """
    proposals = np.asarray(proposals, dtype=float).reshape(-1, 4)
    scores = np.asarray(class_scores, dtype=float).reshape(len(proposals), -1)
    if len(proposals) and not np.allclose(scores.sum(axis=1), 1.0, rtol=0.0, atol=1e-6):
        raise ValueError("class scores must sum to 1 per proposal (within 1e-6)")
    if object_rule == "max":
        obj = scores[:, 1:].max(axis=1, initial=0.0)
    elif object_rule == "sum":
        obj = scores[:, 1:].sum(axis=1)
    else:
        raise ValueError(f"object_rule must be 'max' or 'sum', got {object_rule!r}")
    bg = scores[:, 0] > score_threshold
    fg = (obj > score_threshold) & ~bg
    return PartitionedProposals(proposals, np.flatnonzero(fg), np.flatnonzero(bg))


class InstanceDiscriminator(Module):
    """FC -> BN -> ReLU, FC -> BN -> ReLU, FC -> sigmoid; widths halve."""

    def __init__(self, rng, in_features: int):
        h1 = max(in_features // 2, 1)
        h2 = max(h1 // 2, 1)
        self.fc1 = Linear(rng, in_features, h1)
        self.bn1 = BatchNorm(h1)
        self.fc2 = Linear(rng, h1, h2)
        self.bn2 = BatchNorm(h2)
        self.fc3 = Linear(rng, h2, 1)

    def __call__(self, u: Tensor) -> Tensor:
        h = ops.relu(self.bn1(self.fc1(u)))
        h = ops.relu(self.bn2(self.fc2(h)))
        return ops.sigmoid(self.fc3(h)).reshape((-1,))


@dataclass
class InstanceBatch:
    """Pooled features of one image with their partition and domain label."""

    partition: PartitionedProposals
    features: Tensor
    d: int


@dataclass
class InstanceLossResult:
    """Per-domain losses (keyed by position in the input list) and the
    discriminator outputs, ``probs[i][side]``, that entered them."""

    losses: dict
    probs: dict

    @property
    def total(self) -> Tensor:
        total = None
        for term in self.losses.values():
            total = term if total is None else total + term
        return Tensor(0.0) if total is None else total


def _side_terms(batches, rows_per_batch, disc, grl_scale: float, side: str, result: InstanceLossResult,
                paired: bool = False) -> None:
    """Run ``disc`` once over the rows of every batch, so batch norm sees all
    instances of the step, then add each domain's mean CE to its loss.

    With ``paired`` the side is skipped unless instances of both domains are
    present: a one-domain batch only teaches the discriminator a label prior,
    and reversing that gradient pushes the features without aligning them.
    """
    if paired and len({b.d for b, rows in zip(batches, rows_per_batch) if rows.size}) < 2:
        logger.debug("skipping %s instance term: instances from one domain only", side)
        return
    parts, spans = [], []
    start = 0
    for i, (batch, rows) in enumerate(zip(batches, rows_per_batch)):
        if rows.size:
            parts.append(ops.take_rows(batch.features, rows))
            spans.append((i, start, start + rows.size))
            start += rows.size
    if start == 0:
        return
    if start == 1:
        logger.info("skipping %s instance term: a single instance leaves batch variance undefined", side)
        return
    u = grl_forward(parts[0] if len(parts) == 1 else ops.concat(parts, axis=0), grl_scale)
    p = disc(u)
    for i, lo, hi in spans:
        pi = p if (lo, hi) == (0, p.shape[0]) else p[lo:hi]
        result.probs.setdefault(i, {})[side] = pi.data.copy()
        term = ops.binary_ce(pi, batches[i].d, reduction="mean")
        result.losses[i] = term if i not in result.losses else result.losses[i] + term


def joint_roi_alignment_loss(batches, disc_fg, disc_bg, grl_scale: float = 1.0, paired: bool = False) -> InstanceLossResult:
    """Foreground/background alignment over every image of a step.

    Each image's loss is the mean CE of ``disc_fg`` over its fg instances plus
    that of ``disc_bg`` over its bg instances; an empty set adds 0. With
    ``paired`` a side whose instances all come from one domain adds 0 too.
    """
    result = InstanceLossResult({}, {})
    for side, disc in (("fg", disc_fg), ("bg", disc_bg)):
        rows = [np.asarray(getattr(b.partition, side), dtype=np.intp) for b in batches]
        _side_terms(batches, rows, disc, grl_scale, side, result, paired)
    return result


def joint_single_discriminator_loss(batches, disc, grl_scale: float = 1.0, paired: bool = False) -> InstanceLossResult:
    """One discriminator over every proposal of every image, ignoring fg/bg."""
    result = InstanceLossResult({}, {})
    rows = [np.arange(b.features.shape[0]) for b in batches]
    _side_terms(batches, rows, disc, grl_scale, "all", result, paired)
    return result


def roi_alignment_loss(
    partition: PartitionedProposals,
    instance_features: Tensor,
    d: int,
    disc_fg: InstanceDiscriminator,
    disc_bg: InstanceDiscriminator,
    grl_scale: float = 1.0,
):
    """Single-image form of :func:`joint_roi_alignment_loss`.

    Returns ``(loss, probs)``; ``probs`` maps ``"fg"``/``"bg"`` to the
    discriminator outputs that entered the loss.
    """
    result = joint_roi_alignment_loss([InstanceBatch(partition, instance_features, d)], disc_fg, disc_bg, grl_scale)
    return result.total, result.probs.get(0, {})


def single_discriminator_loss(instance_features: Tensor, d: int, disc: InstanceDiscriminator, grl_scale: float = 1.0):
    """Single-image form of :func:`joint_single_discriminator_loss`."""
    batch = InstanceBatch(PartitionedProposals(np.zeros((0, 4)), _empty_index(), _empty_index()), instance_features, d)
    result = joint_single_discriminator_loss([batch], disc, grl_scale)
    return result.total, result.probs.get(0, {})
