import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from daa.adaptors import (
    ConfigError,
    GlobalDiscriminator,
    ImageAdaptors,
    LocalDiscriminator,
    TransitionDiscriminator,
    dmi_mask,
    feat_loss,
    global_loss,
    local_loss_masked,
    local_loss_unmasked,
    transition_loss,
)
from daa.autodiff import ShapeError, Tensor, backward, parameter
from daa.autodiff import ops

LN2 = math.log(2)
probs = st.floats(0.0, 1.0)


def pmap(values):
    return Tensor(np.asarray(values, dtype=float))


def silence(module):
    """Zero every parameter so each sigmoid output is exactly 0.5."""
    for p in module.parameters():
        p.data[...] = 0.0
    return module


def random_features(rng, widths=(8, 8, 8), size=16):
    return tuple(
        parameter(rng.normal(size=(1, c, size >> i, size >> i))) for i, c in enumerate(widths)
    )


class TestLocalLoss:
    def test_uniform_half(self):
        assert local_loss_unmasked(pmap(np.full((1, 1, 3, 3), 0.5)), 1).item() == pytest.approx(LN2)

    def test_two_cells(self):
        assert local_loss_unmasked(pmap([[0.5, 0.5]]), 0).item() == pytest.approx(LN2)

    def test_hand_average(self):
        expected = (-math.log(0.25) - math.log(0.75)) / 2
        assert local_loss_unmasked(pmap([[0.25, 0.75]]), 1).item() == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.8370, abs=1e-4)

    def test_empty_map(self):
        with pytest.raises(ShapeError):
            local_loss_unmasked(pmap(np.zeros((1, 1, 0, 0))), 0)


class TestDmiMask:
    @pytest.mark.parametrize("p,eta,expected", [(0.5, 5.0, 1.0), (0.0, 5.0, 3.5), (1.0, 5.0, 3.5), (0.9, 2.0, 1.8)])
    def test_values(self, p, eta, expected):
        assert dmi_mask([p], eta)[0] == pytest.approx(expected, abs=1e-15)

    def test_negative_eta(self):
        with pytest.raises(ValueError):
            dmi_mask([0.3], -1.0)

    @given(p=arrays(float, 6, elements=probs), eta=st.floats(0.0, 20.0))
    def test_range(self, p, eta):
        m = dmi_mask(p, eta)
        assert np.all(m >= 1.0)
        assert np.all(m <= eta / 2 + 1.0 + 1e-12)

    @given(eta=st.floats(0.01, 20.0), a=probs, b=probs)
    def test_strictly_increasing_in_distance(self, eta, a, b):
        near, far = sorted((a, b), key=lambda p: abs(p - 0.5))
        if abs(far - 0.5) - abs(near - 0.5) < 1e-9:  # below float resolution of the product
            return
        m_near, m_far = dmi_mask([near, far], eta)
        assert m_far > m_near

    @given(p=probs.filter(lambda v: v != 0.5), eta=st.floats(0.1, 20.0))
    def test_one_only_at_half(self, p, eta):
        assert dmi_mask([p], eta)[0] > 1.0

    def test_mask_is_constant(self):
        p = parameter([0.3])
        m = dmi_mask(p, 5.0)
        assert isinstance(m, np.ndarray)


class TestMaskedLocalLoss:
    def test_ones_mask_equals_unmasked(self):
        p = pmap(np.random.default_rng(0).uniform(size=(1, 1, 4, 4)))
        assert local_loss_masked(p, np.ones(p.shape), 0).item() == pytest.approx(local_loss_unmasked(p, 0).item(), abs=1e-15)

    def test_hand_example(self):
        p = pmap([[[[0.25]]]])
        loss = local_loss_masked(p, dmi_mask(p, 4.0), 0).item()
        assert loss == pytest.approx(-2 * math.log(0.75), abs=1e-12)
        assert loss == pytest.approx(0.5754, abs=1e-4)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            local_loss_masked(pmap(np.full((1, 1, 2, 2), 0.5)), np.ones((1, 1, 2, 3)), 0)

    @given(p=arrays(float, (1, 1, 3, 3), elements=probs), d=st.sampled_from([0, 1]))
    def test_eta_zero_reduces_to_unmasked(self, p, d):
        m = pmap(p)
        assert local_loss_masked(m, dmi_mask(m, 0.0), d).item() == pytest.approx(local_loss_unmasked(m, d).item(), abs=1e-12)

    def test_gradient_ignores_mask_dependence(self):
        """The tape gradient equals that of a clone using a frozen copy of the mask."""
        rng = np.random.default_rng(3)
        z0 = rng.normal(size=(1, 4, 3, 3))
        disc = LocalDiscriminator(rng, 4)

        def grads(frozen):
            disc.zero_grad()
            p = disc(Tensor(z0))
            mask = frozen if frozen is not None else dmi_mask(p, 5.0)
            backward(local_loss_masked(p, mask, 1))
            return [q.grad.copy() for q in disc.parameters()], mask

        live, mask = grads(None)
        clone, _ = grads(mask.copy())
        for a, b in zip(live, clone):
            np.testing.assert_array_equal(a, b)


class TestGlobalAndTransition:
    @pytest.mark.parametrize("d", [0, 1])
    def test_global_half(self, d):
        assert global_loss(pmap([0.5]), d).item() == pytest.approx(LN2)

    @pytest.mark.parametrize("d,expected", [(1, -math.log(0.9)), (0, -math.log(0.1))])
    def test_global_hand(self, d, expected):
        assert global_loss(pmap([0.9]), d).item() == pytest.approx(expected, abs=1e-12)

    def test_transition_uniform(self):
        m = pmap(np.full((1, 1, 2, 2), 0.5))
        assert transition_loss(m, dmi_mask(m, 5.0), pmap([0.5]), 0).item() == pytest.approx(2 * LN2)

    def test_transition_sum(self):
        m = pmap(np.full((1, 1, 2, 2), 0.5))
        assert transition_loss(m, np.ones(m.shape), pmap([0.9]), 1).item() == pytest.approx(LN2 - math.log(0.9), abs=1e-12)

    def test_transition_empty_map(self):
        with pytest.raises(ShapeError):
            transition_loss(pmap(np.zeros((1, 1, 0, 2))), np.ones((1, 1, 0, 2)), pmap([0.5]), 0)


class TestDiscriminatorShapes:
    @given(c=st.integers(1, 12), h=st.integers(1, 9), seed=st.integers(0, 100))
    @settings(max_examples=25, deadline=None)
    def test_local_keeps_spatial_size(self, c, h, seed):
        rng = np.random.default_rng(seed)
        p = LocalDiscriminator(rng, c)(Tensor(rng.normal(size=(2, c, h, h + 1))))
        assert p.shape == (2, 1, h, h + 1)
        assert np.all((p.data > 0) & (p.data < 1))

    def test_local_widths_halve(self):
        d = LocalDiscriminator(np.random.default_rng(0), 16)
        assert [c.weight.shape[:2] for c in (d.conv1, d.conv2, d.conv3)] == [(8, 16), (4, 8), (1, 4)]

    def test_global_one_probability_per_image(self):
        rng = np.random.default_rng(0)
        assert GlobalDiscriminator(rng, 8)(Tensor(rng.normal(size=(3, 8, 4, 4)))).shape == (3,)

    def test_transition_outputs(self):
        rng = np.random.default_rng(0)
        local, glob = TransitionDiscriminator(rng, 8)(Tensor(rng.normal(size=(1, 8, 8, 8))))
        assert local.shape == (1, 1, 1, 1)
        assert glob.shape == (1,)

    @pytest.mark.parametrize("dropped", ["local", "global"])
    def test_trunk_gets_gradient_from_both_branches(self, dropped):
        rng = np.random.default_rng(5)
        disc = TransitionDiscriminator(rng, 32)
        z = Tensor(rng.normal(size=(2, 32, 8, 8)))

        def trunk_grad(use_local, use_global):
            disc.zero_grad()
            local, glob = disc(z)
            loss = ops.binary_ce(local, 1) * float(use_local) + ops.binary_ce(glob, 1) * float(use_global)
            backward(loss)
            return np.concatenate([p.grad.ravel() for p in disc.trunk.parameters()])

        both = trunk_grad(True, True)
        one = trunk_grad(dropped != "local", dropped != "global")
        assert np.max(np.abs(both - one)) > 1e-8


class TestFeatLoss:
    def test_local_only_at_half(self):
        rng = np.random.default_rng(0)
        adaptors = silence(ImageAdaptors(rng, (8, 8, 8)))
        res = feat_loss(random_features(rng), 0, adaptors, transition=False, global_=False)
        assert res.loss.item() == pytest.approx(LN2)

    def test_all_terms_at_half(self):
        rng = np.random.default_rng(0)
        adaptors = silence(ImageAdaptors(rng, (8, 8, 8)))
        res = feat_loss(random_features(rng), 1, adaptors, mask=False)
        assert res.loss.item() == pytest.approx(4 * LN2)
        assert set(res.probs) == {"local", "transition_local", "transition_global", "global"}

    def test_needs_one_term(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ConfigError):
            feat_loss(random_features(rng), 0, ImageAdaptors(rng, (8, 8, 8)), local=False, transition=False, global_=False)

    @given(seed=st.integers(0, 2**16), d=st.sampled_from([0, 1]), eta=st.floats(0.0, 8.0))
    @settings(max_examples=15, deadline=None)
    def test_matches_scalar_oracle(self, seed, d, eta):
        rng = np.random.default_rng(seed)
        res = feat_loss(random_features(rng), d, ImageAdaptors(rng, (8, 8, 8)), eta=eta)

        def ce(p):
            p = np.clip(np.asarray(p, float).ravel(), 1e-7, 1 - 1e-7)
            return [-math.log(v) if d else -math.log(1 - v) for v in p]

        def masked_mean(p):
            p = np.asarray(p).ravel()
            return sum((eta * abs(v - 0.5) + 1) * c for v, c in zip(p, ce(p))) / p.size

        loc = masked_mean(res.probs["local"])
        tr = masked_mean(res.probs["transition_local"]) + sum(ce(res.probs["transition_global"]))
        glob = sum(ce(res.probs["global"]))
        assert res.terms["loc"].item() == pytest.approx(loc, abs=1e-10)
        assert res.terms["tr"].item() == pytest.approx(tr, abs=1e-10)
        assert res.loss.item() == pytest.approx(loc + tr + glob, abs=1e-10)

    def test_fixed_masks_override(self):
        rng = np.random.default_rng(0)
        feats = random_features(rng)
        adaptors = ImageAdaptors(rng, (8, 8, 8))
        first = feat_loss(feats, 0, adaptors)
        again = feat_loss(feats, 0, adaptors, fixed_masks={k: 2 * v for k, v in first.masks.items()})
        assert again.terms["loc"].item() == pytest.approx(2 * first.terms["loc"].item())

    def test_mask_transition_switch(self):
        rng = np.random.default_rng(0)
        res = feat_loss(random_features(rng), 0, ImageAdaptors(rng, (8, 8, 8)), mask_transition=False)
        assert np.all(res.masks["transition_local"] == 1.0)
        assert np.any(res.masks["local"] > 1.0)


class TestLocalDiscriminatorSlope:
    def test_leaky_discriminator_keeps_a_gradient_when_units_are_negative(self):
        z = parameter(np.random.default_rng(1).uniform(0.5, 1.0, size=(1, 8, 3, 3)))
        for slope, expect_zero in ((0.0, True), (0.2, False)):
            disc = LocalDiscriminator(np.random.default_rng(0), 8, slope)
            disc.conv1.bias.data[...] = -100.0  # every first-layer unit negative
            z.grad = None
            backward(local_loss_unmasked(disc(z), 1))
            assert np.all(z.grad == 0.0) == expect_zero

