import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from daa.autodiff import Tensor, backward, parameter
from daa.detector.boxes import iou
from daa.instance import (
    InstanceBatch,
    InstanceDiscriminator,
    PartitionedProposals,
    joint_roi_alignment_loss,
    joint_single_discriminator_loss,
    partition_source,
    partition_target,
    roi_alignment_loss,
    single_discriminator_loss,
)

LN2 = math.log(2)


def constant_disc(values):
    """Stand-in discriminator that returns fixed probabilities."""
    values = np.asarray(values, dtype=float)
    return lambda u: Tensor(values[: u.shape[0]] if values.ndim else np.full(u.shape[0], float(values)))


def partition(n, fg=(), bg=()):
    return PartitionedProposals(np.tile([0.0, 0.0, 4.0, 4.0], (n, 1)), np.asarray(fg, np.intp), np.asarray(bg, np.intp))


@st.composite
def boxes(draw, size=32.0):
    x1 = draw(st.floats(0, size - 1))
    y1 = draw(st.floats(0, size - 1))
    w = draw(st.floats(0.5, size))
    h = draw(st.floats(0.5, size))
    return [x1, y1, x1 + w, y1 + h]


class TestIou:
    def test_hand_overlap(self):
        assert iou([0, 0, 10, 10], [5, 0, 15, 10]) == pytest.approx(1 / 3)

    @given(a=boxes(), b=boxes())
    def test_symmetric_and_bounded(self, a, b):
        ab = iou(a, b)
        assert ab == iou(b, a)
        assert 0.0 <= ab <= 1.0

    @given(a=boxes())
    def test_self_is_one(self, a):
        assert iou(a, a) == pytest.approx(1.0)


class TestPartitionSource:
    def test_identical_is_fg(self):
        p = partition_source([[0, 0, 10, 10]], [[0, 0, 10, 10]])
        assert p.fg.tolist() == [0] and p.bg.size == 0

    def test_disjoint_is_bg(self):
        p = partition_source([[20, 20, 30, 30]], [[0, 0, 10, 10]])
        assert p.bg.tolist() == [0] and p.fg.size == 0

    def test_third_overlap_is_bg(self):
        p = partition_source([[0, 0, 10, 10]], [[5, 0, 15, 10]])
        assert p.bg.tolist() == [0]

    def test_empty(self):
        p = partition_source(np.zeros((0, 4)), [[0, 0, 10, 10]])
        assert p.fg.size == 0 and p.bg.size == 0

    def test_no_gt_makes_everything_bg(self):
        p = partition_source([[0, 0, 5, 5], [1, 1, 4, 4]], np.zeros((0, 4)))
        assert p.bg.tolist() == [0, 1]

    @given(props=st.lists(boxes(), min_size=1, max_size=8), gts=st.lists(boxes(), max_size=3))
    def test_exclusive_and_exhaustive(self, props, gts):
        p = partition_source(props, np.asarray(gts).reshape(-1, 4))
        assert not set(p.fg) & set(p.bg)
        assert sorted(set(p.fg) | set(p.bg)) == list(range(len(props)))


class TestPartitionTarget:
    def test_examples(self):
        scores = [[0.95, 0.05], [0.05, 0.95], [0.5, 0.5]]
        p = partition_target(np.tile([0, 0, 4, 4], (3, 1)), scores)
        assert p.bg.tolist() == [0]
        assert p.fg.tolist() == [1]

    def test_threshold_is_strict(self):
        p = partition_target([[0, 0, 4, 4], [0, 0, 4, 4]], [[0.9, 0.1], [0.1, 0.9]])
        assert p.fg.size == 0 and p.bg.size == 0

    def test_unnormalized_scores_rejected(self):
        with pytest.raises(ValueError):
            partition_target([[0, 0, 4, 4]], [[0.5, 0.6]])

    def test_object_rule(self):
        scores = [[0.04, 0.48, 0.48]]
        assert partition_target([[0, 0, 4, 4]], scores, object_rule="max").fg.size == 0
        assert partition_target([[0, 0, 4, 4]], scores, object_rule="sum").fg.tolist() == [0]
        with pytest.raises(ValueError):
            partition_target([[0, 0, 4, 4]], scores, object_rule="mean")

    @given(raw=arrays(float, (6, 4), elements=st.floats(0.01, 10.0)), thr=st.floats(0.3, 0.99))
    def test_exclusive(self, raw, thr):
        scores = raw / raw.sum(axis=1, keepdims=True)
        p = partition_target(np.tile([0, 0, 4, 4], (6, 1)), scores, thr, "sum")
        assert not set(p.fg) & set(p.bg)


class TestRoiAlignmentLoss:
    def feats(self, n):
        return Tensor(np.zeros((n, 4)))

    def test_both_half(self):
        loss, _ = roi_alignment_loss(partition(4, [0, 1], [2, 3]), self.feats(4), 0, constant_disc(0.5), constant_disc(0.5))
        assert loss.item() == pytest.approx(2 * LN2)

    def test_empty_bg_contributes_zero(self):
        loss, probs = roi_alignment_loss(partition(2, [0, 1]), self.feats(2), 1, constant_disc(0.5), constant_disc(0.1))
        assert loss.item() == pytest.approx(LN2)
        assert set(probs) == {"fg"}

    def test_hand_average(self):
        loss, _ = roi_alignment_loss(partition(2, [0, 1]), self.feats(2), 0, constant_disc([0.25, 0.75]), constant_disc(0.5))
        assert loss.item() == pytest.approx((-math.log(0.75) - math.log(0.25)) / 2, abs=1e-12)

    def test_nothing_selected_is_zero_without_nan(self, caplog):
        rng = np.random.default_rng(0)
        feats = parameter(rng.normal(size=(3, 8)))
        loss, probs = roi_alignment_loss(partition(3), feats, 1, InstanceDiscriminator(rng, 8), InstanceDiscriminator(rng, 8))
        assert loss.item() == 0.0
        assert probs == {}
        assert not loss.requires_grad

    def test_single_instance_side_is_skipped_and_logged(self, caplog):
        rng = np.random.default_rng(0)
        feats = parameter(rng.normal(size=(3, 8)))
        with caplog.at_level(logging.INFO, logger="daa.instance"):
            loss, probs = roi_alignment_loss(
                partition(3, [0], [1, 2]), feats, 0, InstanceDiscriminator(rng, 8), InstanceDiscriminator(rng, 8)
            )
        assert set(probs) == {"bg"}
        assert "single instance" in caplog.text
        backward(loss)
        assert np.all(np.isfinite(feats.grad))
        assert np.all(feats.grad[0] == 0.0)

    @given(seed=st.integers(0, 2**16), d=st.sampled_from([0, 1]))
    @settings(max_examples=20, deadline=None)
    def test_matches_oracle(self, seed, d):
        rng = np.random.default_rng(seed)
        feats = Tensor(rng.normal(size=(7, 6)))
        loss, probs = roi_alignment_loss(
            partition(7, [0, 2, 4], [1, 3, 5, 6]), feats, d, InstanceDiscriminator(rng, 6), InstanceDiscriminator(rng, 6)
        )

        def mean_ce(p):
            p = np.clip(p, 1e-7, 1 - 1e-7)
            return float(np.mean(-np.log(p) if d else -np.log(1 - p)))

        assert loss.item() == pytest.approx(mean_ce(probs["fg"]) + mean_ce(probs["bg"]), abs=1e-10)


class TestJointBatches:
    def test_per_domain_losses_share_one_discriminator_pass(self):
        calls = []

        def disc(u):
            calls.append(u.shape[0])
            return Tensor(np.linspace(0.2, 0.8, u.shape[0]))

        batches = [
            InstanceBatch(partition(3, [0, 1], [2]), Tensor(np.zeros((3, 4))), 0),
            InstanceBatch(partition(2, [1], [0]), Tensor(np.zeros((2, 4))), 1),
        ]
        result = joint_roi_alignment_loss(batches, disc, disc)
        assert calls == [3, 2]
        p_fg = np.linspace(0.2, 0.8, 3)
        p_bg = np.linspace(0.2, 0.8, 2)
        expected_source = -np.log(1 - p_fg[:2]).mean() - np.log(1 - p_bg[0])
        expected_target = -np.log(p_fg[2]) - np.log(p_bg[1])
        assert result.losses[0].item() == pytest.approx(expected_source, abs=1e-12)
        assert result.losses[1].item() == pytest.approx(expected_target, abs=1e-12)
        assert result.total.item() == pytest.approx(expected_source + expected_target, abs=1e-12)


class TestPairedTerms:
    def batches(self):
        # fg instances only in the source image, bg instances in both
        return [
            InstanceBatch(partition(3, [0, 1], [2]), Tensor(np.zeros((3, 4))), 0),
            InstanceBatch(partition(2, [], [0, 1]), Tensor(np.zeros((2, 4))), 1),
        ]

    def test_one_domain_side_is_skipped(self):
        result = joint_roi_alignment_loss(self.batches(), constant_disc(0.5), constant_disc(0.5), paired=True)
        assert set(result.probs[0]) == {"bg"} and set(result.probs[1]) == {"bg"}
        assert result.losses[0].item() == pytest.approx(LN2)
        assert result.total.item() == pytest.approx(2 * LN2)

    def test_unpaired_keeps_one_domain_side(self):
        result = joint_roi_alignment_loss(self.batches(), constant_disc(0.5), constant_disc(0.5))
        assert set(result.probs[0]) == {"fg", "bg"}
        assert result.total.item() == pytest.approx(3 * LN2)

    def test_single_domain_step_adds_nothing(self):
        batches = [InstanceBatch(partition(3, [0], [1, 2]), Tensor(np.zeros((3, 4))), 0)]
        assert joint_roi_alignment_loss(batches, constant_disc(0.5), constant_disc(0.5), paired=True).losses == {}
        assert joint_single_discriminator_loss(batches, constant_disc(0.5), paired=True).losses == {}


class TestSingleDiscriminator:
    def test_all_half(self):
        loss, _ = single_discriminator_loss(Tensor(np.zeros((3, 4))), 1, constant_disc(0.5))
        assert loss.item() == pytest.approx(LN2)

    def test_equals_fg_only_partition(self):
        rng = np.random.default_rng(2)
        disc = InstanceDiscriminator(rng, 6)
        feats = Tensor(rng.normal(size=(5, 6)))
        single, _ = single_discriminator_loss(feats, 0, disc)
        paired, _ = roi_alignment_loss(partition(5, range(5)), feats, 0, disc, InstanceDiscriminator(rng, 6))
        assert single.item() == pytest.approx(paired.item(), abs=1e-14)

    def test_joint_form(self):
        batches = [InstanceBatch(partition(2), Tensor(np.zeros((2, 4))), d) for d in (0, 1)]
        result = joint_single_discriminator_loss(batches, constant_disc(0.5))
        assert result.total.item() == pytest.approx(2 * LN2)


class TestInstanceDiscriminator:
    def test_one_probability_per_instance(self):
        rng = np.random.default_rng(0)
        p = InstanceDiscriminator(rng, 16)(Tensor(rng.normal(size=(5, 16))))
        assert p.shape == (5,)
        assert np.all((p.data > 0) & (p.data < 1))
