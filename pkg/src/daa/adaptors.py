"""Image-level domain alignment: local, transition and global adaptors.

Each adaptor is a domain discriminator fed through a gradient reversal
node. The local adaptor scores every spatial position of the first
backbone block's map, the global adaptor scores the whole image from the
last block, and the transition adaptor on the middle block does both
through a Y-shaped network sharing one conv trunk.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Conv2d, Linear, Module, Tensor, ops
from .autodiff.tensor import ShapeError
from .grl import grl_forward

ADAPTOR_IDS = ("local", "transition_local", "transition_global", "global")


class ConfigError(ValueError):
    pass


def _halve(c: int) -> int:
    return max(c // 2, 1)


class LocalDiscriminator(Module):
    """Three 1x1 convs C -> C/2 -> C/4 -> 1, ReLU after the first two, sigmoid out.

    A positive ``negative_slope`` makes the two activations leaky.
    """

    def __init__(self, rng, in_channels: int, negative_slope: float = 0.0):
        c1 = _halve(in_channels)
        c2 = _halve(c1)
        self.conv1 = Conv2d(rng, in_channels, c1, 1)
        self.conv2 = Conv2d(rng, c1, c2, 1)
        self.conv3 = Conv2d(rng, c2, 1, 1)
        self.negative_slope = negative_slope

    def _act(self, x: Tensor) -> Tensor:
        return ops.leaky_relu(x, self.negative_slope) if self.negative_slope else ops.relu(x)

    def __call__(self, z: Tensor) -> Tensor:
        h = self._act(self.conv1(z))
        h = self._act(self.conv2(h))
        return ops.sigmoid(self.conv3(h))


class _StridedTrunk(Module):
    def __init__(self, rng, in_channels: int):
        widths = [in_channels]
        for _ in range(3):
            widths.append(_halve(widths[-1]))
        self.convs = [Conv2d(rng, a, b, 3, stride=2, padding=1) for a, b in zip(widths, widths[1:])]
        self.out_channels = widths[-1]

    def __call__(self, z: Tensor) -> Tensor:
        z = self.convs[0](z)
        for conv in self.convs[1:]:
            z = conv(ops.relu(z))
        return z


class _GlobalTop(Module):
    def __init__(self, rng, in_channels: int):
        hidden = in_channels
        self.fc1 = Linear(rng, in_channels, hidden)
        self.fc2 = Linear(rng, hidden, 1)

    def __call__(self, b: Tensor) -> Tensor:
        h = ops.relu(self.fc1(ops.avg_pool_global(b)))
        return ops.sigmoid(self.fc2(h))


class GlobalDiscriminator(Module):
    """Three stride-2 3x3 convs, global average pool, two FC layers, sigmoid."""

    def __init__(self, rng, in_channels: int):
        self.trunk = _StridedTrunk(rng, in_channels)
        self.top = _GlobalTop(rng, self.trunk.out_channels)

    def __call__(self, z: Tensor) -> Tensor:
        return self.top(self.trunk(z)).reshape((-1,))


class TransitionDiscriminator(Module):
    """Y-shaped: a shared trunk B feeding a 1x1-conv local branch and a
    pooled FC global branch. Returns ``(probability map, scalar per image)``."""

    def __init__(self, rng, in_channels: int):
        self.trunk = _StridedTrunk(rng, in_channels)
        self.local = Conv2d(rng, self.trunk.out_channels, 1, 1)
        self.top = _GlobalTop(rng, self.trunk.out_channels)

    def __call__(self, z: Tensor) -> tuple[Tensor, Tensor]:
        b = self.trunk(z)
        return ops.sigmoid(self.local(b)), self.top(b).reshape((-1,))


class ImageAdaptors(Module):
    def __init__(self, rng, widths, local_negative_slope: float = 0.0):
        self.local = LocalDiscriminator(rng, widths[0], local_negative_slope)
        self.transition = TransitionDiscriminator(rng, widths[1])
        self.global_ = GlobalDiscriminator(rng, widths[2])


# --- losses -----------------------------------------------------------------

def _check_map(prob_map: Tensor) -> None:
    if prob_map.size == 0:
        raise ShapeError("domain probability map is empty")


def local_loss_unmasked(prob_map: Tensor, d: int) -> Tensor:
    """Mean cross-entropy over every position of the map."""
    _check_map(prob_map)
    return ops.binary_ce(prob_map, d, reduction="mean")


def dmi_mask(prob_map, eta: float) -> np.ndarray:
    """Per-position weight ``eta * |p - 0.5| + 1``, as a constant array."""
    if eta < 0:
        raise ValueError(f"eta must be >= 0, got {eta}")
    p = prob_map.data if isinstance(prob_map, Tensor) else np.asarray(prob_map, dtype=float)
    return eta * np.abs(p - 0.5) + 1.0


def local_loss_masked(prob_map: Tensor, mask, d: int) -> Tensor:
    _check_map(prob_map)
    mask = np.asarray(mask, dtype=float)
    if mask.shape != prob_map.shape:
        raise ShapeError(f"mask shape {mask.shape} != probability map shape {prob_map.shape}")
    return ops.mean(ops.binary_ce(prob_map, d, reduction="none") * mask)


def global_loss(p: Tensor, d: int) -> Tensor:
    return ops.binary_ce(p, d, reduction="mean")


def transition_loss(local_map: Tensor, local_mask, global_p: Tensor, d: int) -> Tensor:
    return local_loss_masked(local_map, local_mask, d) + global_loss(global_p, d)


@dataclass
class FeatLossResult:
    loss: Tensor
    terms: dict = field(default_factory=dict)
    probs: dict = field(default_factory=dict)
    masks: dict = field(default_factory=dict)


def feat_loss(
    features,
    d: int,
    adaptors: ImageAdaptors,
    *,
    local: bool = True,
    transition: bool = True,
    global_: bool = True,
    mask: bool = True,
    mask_transition: bool = True,
    eta: float = 5.0,
    grl_scale: float = 1.0,
    fixed_masks: dict | None = None,
) -> FeatLossResult:
    """Sum of the enabled image-level alignment losses for one image.

    ``features`` is the backbone triple ``(Z1, Z2, Z3)``. Each map goes
    through a gradient reversal node before its discriminator. With
    ``mask`` on, the local loss (and, if ``mask_transition``, the
    transition's local branch) is reweighted by the DMI mask of its own
    detached probabilities. ``fixed_masks`` (keyed ``"local"`` /
    ``"transition_local"``) replaces the computed masks, which lets a
    finite-difference oracle hold them constant.
    """
    if not (local or transition or global_):
        raise ConfigError("feat_loss needs at least one of local / transition / global enabled")
    z1, z2, z3 = features
    total = None
    terms, probs, masks = {}, {}, {}

    def _mask(key, p, on):
        if fixed_masks is not None and key in fixed_masks:
            m = fixed_masks[key]
        else:
            m = dmi_mask(p, eta) if on else np.ones(p.shape)
        masks[key] = m
        return m

    if local:
        p1 = adaptors.local(grl_forward(z1, grl_scale))
        m1 = _mask("local", p1, mask)
        terms["loc"] = local_loss_masked(p1, m1, d)
        probs["local"] = p1.data.copy()
        total = terms["loc"]
    if transition:
        p2l, p2g = adaptors.transition(grl_forward(z2, grl_scale))
        m2 = _mask("transition_local", p2l, mask and mask_transition)
        terms["tr"] = transition_loss(p2l, m2, p2g, d)
        probs["transition_local"] = p2l.data.copy()
        probs["transition_global"] = p2g.data.copy()
        total = terms["tr"] if total is None else total + terms["tr"]
    if global_:
        p3 = adaptors.global_(grl_forward(z3, grl_scale))
        terms["global"] = global_loss(p3, d)
        probs["global"] = p3.data.copy()
        total = terms["global"] if total is None else total + terms["global"]
    return FeatLossResult(total, terms, probs, masks)
