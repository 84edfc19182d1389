"""Finite-difference suite over every primitive op, each alignment loss and
a full training-step objective.

Each case builds a deterministic scalar function and one or more parameter
groups. A group may carry its own numeric objective: upstream of a reversal
layer the tape gradient is ``-lambda`` times the forward derivative, so the
oracle differences the correspondingly signed quantity instead.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import adaptors as ad
from . import instance as inst
from .autodiff import GradCheckReport, Tensor, finite_difference_check, ops, parameter
from .config import TrainConfig
from .data import SOURCE, TARGET, DetectionSample
from .detector.model import PredictionHead, detection_loss, match_proposals
from .grl import grl_forward

LAMBDA = 0.05
FEATURE_SAMPLES = 48  # checked elements per input map of a composite loss


@dataclass
class Group:
    params: list
    names: list
    numeric_f: Callable[[], float] | None = None
    max_elements: int | None = None


@dataclass
class Case:
    f: Callable[[], Tensor]
    groups: list = field(default_factory=list)


@dataclass
class CaseResult:
    name: str
    seed: int
    reports: list
    seconds: float

    @property
    def worst(self) -> float:
        return max((r.worst for r in self.reports), default=0.0)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports)


def _weights(rng, shape):
    """Fixed random projection used to reduce a tensor-valued op to a scalar."""
    return Tensor(rng.normal(size=shape))


def _away_from_zero(rng, shape, gap=0.1):
    x = rng.normal(size=shape)
    return np.sign(x) * (np.abs(x) + gap)


def _generic(rng, *modules, scale: float = 0.05):
    """Jitter every parameter so no ReLU input sits exactly on its kink
    (zero-initialised biases over dead inputs would give exact zeros)."""
    for m in modules:
        for p in m.parameters():
            p.data = p.data + rng.normal(scale=scale, size=p.shape)
    return modules[0] if len(modules) == 1 else modules


def _project(out: Tensor, w: Tensor) -> Tensor:
    return ops.sum(out * w)


def _unary(op, make_input):
    def build(rng):
        x = parameter(make_input(rng))
        w = _weights(rng, op(Tensor(x.data)).shape)
        return Case(lambda: _project(op(x), w), [Group([x], ["x"])])
    return build


def _binary(op, make_b=None):
    def build(rng):
        a = parameter(rng.normal(size=(3, 4)))
        b = parameter(make_b(rng) if make_b else rng.normal(size=(4,)))
        w = _weights(rng, (3, 4))
        return Case(lambda: _project(op(a, b), w), [Group([a, b], ["a", "b"])])
    return build


def _case_matmul(rng):
    a, b = parameter(rng.normal(size=(3, 5))), parameter(rng.normal(size=(5, 2)))
    w = _weights(rng, (3, 2))
    return Case(lambda: _project(ops.matmul(a, b), w), [Group([a, b], ["a", "b"])])


def _case_fully_connected(rng):
    x, wt, b = parameter(rng.normal(size=(4, 5))), parameter(rng.normal(size=(5, 3))), parameter(rng.normal(size=3))
    w = _weights(rng, (4, 3))
    return Case(lambda: _project(ops.fully_connected(x, wt, b), w), [Group([x, wt, b], ["x", "weight", "bias"])])


def _conv_case(stride, padding):
    def build(rng):
        x = parameter(rng.normal(size=(1, 2, 6, 6)))
        wt = parameter(rng.normal(size=(3, 2, 3, 3)))
        b = parameter(rng.normal(size=3))
        out_shape = ops.conv2d(Tensor(x.data), Tensor(wt.data), Tensor(b.data), stride, padding).shape
        w = _weights(rng, out_shape)
        return Case(
            lambda: _project(ops.conv2d(x, wt, b, stride, padding), w), [Group([x, wt, b], ["x", "weight", "bias"])]
        )
    return build


def _case_index(rng):
    x = parameter(rng.normal(size=(5, 3)))
    rows = np.array([0, 2, 2, 4])
    w = _weights(rng, (4, 3))
    return Case(lambda: _project(x[rows] + ops.take_rows(x, rows[::-1]), w), [Group([x], ["x"])])


def _case_concat(rng):
    a, b = parameter(rng.normal(size=(2, 3))), parameter(rng.normal(size=(4, 3)))
    w = _weights(rng, (6, 3))
    return Case(lambda: _project(ops.concat([a, b], axis=0), w), [Group([a, b], ["a", "b"])])


def _case_reductions(rng):
    x = parameter(rng.normal(size=(3, 4)))
    w = _weights(rng, (4,))
    return Case(
        lambda: _project(ops.sum(x, axis=0), w) + ops.mean(x) * 3.0 + _project(ops.reshape(x, (4, 3)).mean(axis=0), Tensor(np.ones(3))),
        [Group([x], ["x"])],
    )


def _case_batch_norm(rng):
    x = parameter(rng.normal(size=(5, 3)))
    g, b = parameter(rng.normal(size=3)), parameter(rng.normal(size=3))
    w = _weights(rng, (5, 3))
    return Case(lambda: _project(ops.batch_norm(x, g, b), w), [Group([x, g, b], ["x", "gamma", "beta"])])


def _case_roi_pool(rng):
    feature = parameter(rng.normal(size=(1, 2, 8, 8)))
    boxes = np.array([[0.0, 0.0, 16.0, 16.0], [4.0, 6.0, 30.0, 22.0], [10.0, 3.0, 19.0, 27.0]])
    w = _weights(rng, (3, 2, 2, 2))
    return Case(lambda: _project(ops.roi_pool(feature, boxes, (2, 2), 0.25), w), [Group([feature], ["feature"])])


def _case_binary_ce(rng):
    p = parameter(rng.uniform(0.05, 0.95, size=(3, 4)))
    d = rng.integers(0, 2, size=(3, 4)).astype(float)
    return Case(lambda: ops.binary_ce(p, d, "mean") + ops.binary_ce(p, 1, "sum"), [Group([p], ["p"])])


def _case_softmax_ce(rng):
    logits = parameter(rng.normal(size=(5, 4)))
    labels = rng.integers(0, 4, size=5)
    return Case(lambda: ops.softmax_ce(logits, labels), [Group([logits], ["logits"])])


def _case_smooth_l1(rng):
    pred = parameter(rng.normal(scale=1.5, size=(4, 4)))
    target = rng.normal(size=(4, 4))
    return Case(lambda: ops.smooth_l1(pred, target), [Group([pred], ["pred"])])


def _case_grl(rng):
    x = parameter(rng.normal(size=(3, 4)))
    w = _weights(rng, (3, 4))
    f = lambda: _project(grl_forward(ops.sigmoid(x), LAMBDA), w)  # noqa: E731
    return Case(f, [Group([x], ["x"], numeric_f=lambda: -LAMBDA * f().item())])


# --- composite losses -------------------------------------------------------

def _disc_groups(f, disc, features: dict):
    """Discriminator parameters see the plain loss; reversed inputs see ``-lambda`` times it."""
    names, params = zip(*disc.named_parameters())
    return [
        Group(list(params), list(names)),
        Group(list(features.values()), list(features), numeric_f=lambda: -LAMBDA * f().item(), max_elements=FEATURE_SAMPLES),
    ]


def _case_local(masked: bool):
    def build(rng):
        disc = _generic(rng, ad.LocalDiscriminator(rng, 4))
        z = parameter(np.abs(rng.normal(size=(1, 4, 5, 5))))
        d = int(rng.integers(0, 2))
        mask = ad.dmi_mask(disc(Tensor(z.data)), 5.0) if masked else None

        def f():
            p = disc(grl_forward(z, LAMBDA))
            return ad.local_loss_masked(p, mask, d) if masked else ad.local_loss_unmasked(p, d)

        return Case(f, _disc_groups(f, disc, {"z1": z}))
    return build


def _case_transition(rng):
    disc = _generic(rng, ad.TransitionDiscriminator(rng, 8))
    z = parameter(np.abs(rng.normal(size=(1, 8, 8, 8))))
    d = int(rng.integers(0, 2))
    mask = ad.dmi_mask(disc(Tensor(z.data))[0], 5.0)

    def f():
        pl, pg = disc(grl_forward(z, LAMBDA))
        return ad.transition_loss(pl, mask, pg, d)

    return Case(f, _disc_groups(f, disc, {"z2": z}))


def _case_global(rng):
    disc = _generic(rng, ad.GlobalDiscriminator(rng, 8))
    z = parameter(np.abs(rng.normal(size=(1, 8, 8, 8))))
    d = int(rng.integers(0, 2))
    f = lambda: ad.global_loss(disc(grl_forward(z, LAMBDA)), d)  # noqa: E731
    return Case(f, _disc_groups(f, disc, {"z3": z}))


def _case_roi(rng):
    disc_fg, disc_bg = _generic(rng, inst.InstanceDiscriminator(rng, 6), inst.InstanceDiscriminator(rng, 6))
    fs, ft = parameter(rng.normal(size=(6, 6))), parameter(rng.normal(size=(5, 6)))
    empty = np.zeros((0, 4))
    ps = inst.PartitionedProposals(empty, np.array([0, 2, 3]), np.array([1, 4, 5]))
    pt = inst.PartitionedProposals(empty, np.array([1, 4]), np.array([0, 2]))

    def f():
        batches = [inst.InstanceBatch(ps, fs, SOURCE), inst.InstanceBatch(pt, ft, TARGET)]
        return inst.joint_roi_alignment_loss(batches, disc_fg, disc_bg, LAMBDA).total

    names, params = zip(*[(f"fg.{n}", p) for n, p in disc_fg.named_parameters()] + [(f"bg.{n}", p) for n, p in disc_bg.named_parameters()])
    return Case(
        f,
        [Group(list(params), list(names)), Group([fs, ft], ["u_s", "u_t"], numeric_f=lambda: -LAMBDA * f().item())],
    )


def _case_detection(rng):
    head = _generic(rng, PredictionHead(rng, 4, 3, hidden=8, stride=4))
    feature = parameter(rng.normal(size=(1, 4, 8, 8)))
    gt = np.array([[3.0, 4.0, 15.0, 14.0], [18.0, 16.0, 29.0, 30.0]])
    proposals = np.array([[2.0, 3.0, 14.0, 15.0], [17.0, 17.0, 30.0, 29.0], [0.0, 20.0, 9.0, 31.0], [20.0, 0.0, 31.0, 9.0]])
    labels, targets = match_proposals(proposals, gt, np.array([0, 2]))

    def f():
        logits, deltas = head(head.pool(feature, proposals))
        return detection_loss(logits, deltas, labels, targets)

    names, params = zip(*head.named_parameters())
    return Case(f, [Group(list(params) + [feature], list(names) + ["feature"])])


def _toy_sample(rng, d: int, index: int) -> DetectionSample:
    image = rng.uniform(0.0, 1.0, size=(3, 16, 16))
    boxes = np.array([[1.0, 2.0, 8.0, 9.0], [9.0, 7.0, 15.0, 15.0]])
    return DetectionSample(image, boxes, np.zeros(2, dtype=np.intp), d, index)


def _case_train_step(rng):
    from .train import DAAModel, compute_objective  # circular at import time

    seed = int(rng.integers(0, 2**31))
    config = TrainConfig(
        seed=seed, widths=(4, 8, 8), head_hidden=8, proposal_budget=8, target_score_threshold=0.5,
    )
    model = _generic(rng, DAAModel(config, num_classes=1, image_size=16))
    source, target = _toy_sample(rng, SOURCE, 0), _toy_sample(rng, TARGET, 1)
    base = compute_objective(model, source, target, config, np.random.default_rng(seed))
    frozen = base.detached

    def objective():
        return compute_objective(model, source, target, config, np.random.default_rng(seed), detached=frozen)

    def detector_side() -> float:
        r = objective()
        det = r.terms["det"].item()
        return det - config.lam * (r.total.item() - det)

    det_named = list(model.backbone.named_parameters("backbone.")) + list(model.head.named_parameters("head."))
    det_ids = {id(p) for _, p in det_named}
    disc_named = [(n, p) for n, p in model.named_parameters() if id(p) not in det_ids]
    return Case(
        lambda: objective().total,
        [
            Group([p for _, p in det_named], [n for n, _ in det_named], numeric_f=detector_side, max_elements=2),
            Group([p for _, p in disc_named], [n for n, _ in disc_named], max_elements=2),
        ],
    )


CASES = {
    "add": _binary(ops.add),
    "sub": _binary(ops.sub),
    "mul": _binary(ops.mul),
    "div": _binary(ops.div, lambda rng: rng.uniform(0.5, 2.0, size=(4,))),
    "exp": _unary(ops.exp, lambda rng: rng.normal(size=(3, 4))),
    "log": _unary(ops.log, lambda rng: rng.uniform(0.5, 3.0, size=(3, 4))),
    "relu": _unary(ops.relu, lambda rng: _away_from_zero(rng, (3, 4))),
    "leaky_relu": _unary(lambda x: ops.leaky_relu(x, 0.2), lambda rng: _away_from_zero(rng, (3, 4))),
    "sigmoid": _unary(ops.sigmoid, lambda rng: rng.normal(scale=3.0, size=(3, 4))),
    "avg_pool_global": _unary(ops.avg_pool_global, lambda rng: rng.normal(size=(2, 3, 4, 5))),
    "sum_mean_reshape": _case_reductions,
    "index_take_rows": _case_index,
    "concat": _case_concat,
    "matmul": _case_matmul,
    "fully_connected": _case_fully_connected,
    "conv2d": _conv_case(1, 0),
    "conv2d_strided_padded": _conv_case(2, 1),
    "batch_norm": _case_batch_norm,
    "roi_pool": _case_roi_pool,
    "binary_ce": _case_binary_ce,
    "softmax_ce": _case_softmax_ce,
    "smooth_l1": _case_smooth_l1,
    "grl": _case_grl,
    "local_loss": _case_local(masked=False),
    "local_loss_masked": _case_local(masked=True),
    "transition_loss": _case_transition,
    "global_loss": _case_global,
    "roi_alignment_loss": _case_roi,
    "detection_loss": _case_detection,
    "train_step_objective": _case_train_step,
}


def run_case(name: str, seed: int, h: float = 1e-5, tol: float = 1e-4) -> CaseResult:
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    start = time.perf_counter()
    case = CASES[name](rng)
    reports: list[GradCheckReport] = []
    for group in case.groups:
        reports.append(
            finite_difference_check(
                case.f, group.params, h=h, tol=tol, names=group.names, numeric_f=group.numeric_f,
                max_elements=group.max_elements, rng=np.random.default_rng(seed),
            )
        )
    return CaseResult(name, seed, reports, time.perf_counter() - start)


def run_suite(seeds=range(20), names=None, h: float = 1e-5, tol: float = 1e-4) -> list[CaseResult]:
    names = list(names) if names is not None else list(CASES)
    return [run_case(n, s, h, tol) for n in names for s in seeds]
