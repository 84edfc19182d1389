"""Training loop, evaluation and experiment outputs."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import adaptors as ad
from . import instance as inst
from .autodiff import Module, SgdOptimizer, Tensor, backward, no_grad, ops, sgd_step
from .config import TrainConfig
from .data import SOURCE, TARGET, DetectionSample, load_dataset, read_manifest
from .detector import proposals as props
from .detector.evaluation import evaluate_map
from .detector.model import Backbone, PredictionHead, detection_loss, match_proposals, postprocess

logger = logging.getLogger(__name__)

TERM_NAMES = ("det", "loc", "tr", "global", "roi")
HIST_BINS = 20


class TrainingError(RuntimeError):
    pass


class DAAModel(Module):
    """Detector plus every discriminator; all built in a fixed order from the seed
    so that ablation variants share their initial weights."""

    def __init__(self, config: TrainConfig, num_classes: int, image_size: int = 32):
        rng = np.random.default_rng([config.seed, 0])
        w = tuple(config.widths)
        self.num_classes = num_classes
        self.image_size = image_size
        self.backbone = Backbone(rng, w)
        self.pool_index = config.pool_level - 1
        self.head = PredictionHead(
            rng, w[self.pool_index], num_classes, hidden=config.head_hidden, stride=2**config.pool_level
        )
        self.adaptors = ad.ImageAdaptors(rng, w, config.local_disc_negative_slope)
        feat = w[self.pool_index] * self.head.pool_size[0] * self.head.pool_size[1]
        self.inst_fg = inst.InstanceDiscriminator(rng, feat)
        self.inst_bg = inst.InstanceDiscriminator(rng, feat)
        self.inst_single = inst.InstanceDiscriminator(rng, feat)
        self.proposal_config = props.ProposalConfig(budget=config.proposal_budget)
        self.anchors = props.anchor_grid(image_size, self.proposal_config)

    def detector_parameters(self) -> list[Tensor]:
        return self.backbone.parameters() + self.head.parameters()

    def discriminator_parameters(self) -> list[Tensor]:
        return self.local_discriminator_parameters() + self.other_discriminator_parameters()

    def local_discriminator_parameters(self) -> list[Tensor]:
        return self.adaptors.local.parameters()

    def other_discriminator_parameters(self) -> list[Tensor]:
        others = (self.adaptors.transition, self.adaptors.global_, self.inst_fg, self.inst_bg, self.inst_single)
        return [p for m in others for p in m.parameters()]

    def roi_map(self, z: tuple) -> Tensor:
        """The backbone map the prediction head pools from."""
        return z[self.pool_index]

    def detect(self, feature: Tensor, proposals: np.ndarray, score_threshold=0.05, nms_iou=0.5):
        with no_grad():
            logits, deltas = self.head(self.head.pool(feature, proposals))
        return postprocess(proposals, logits.data, deltas.data, self.image_size, score_threshold, nms_iou)

    def infer(self, image: np.ndarray, score_threshold: float = 0.05, nms_iou: float = 0.5):
        """Detections ``(box, class, score)`` for one C x H x W image."""
        with no_grad():
            z = self.backbone(Tensor(image))
        return self.detect(self.roi_map(z), self.anchors, score_threshold, nms_iou)


@dataclass
class StepResult:
    total: Tensor
    terms: dict
    probs: dict = field(default_factory=dict)
    detached: dict = field(default_factory=dict)
    instance_probs: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    instance_batches: dict = field(default_factory=dict, repr=False)


def _add(total, term):
    return term if total is None else total + term


def _domain_forward(
    model: DAAModel, sample: DetectionSample, d: int, config: TrainConfig, rng, result: StepResult, key: str,
    detached: dict | None = None,
):
    """Image-level alignment losses for one image, plus the detection loss
    when ``d`` is source. Instance features are stashed on ``result`` so the
    instance discriminators can see both images in one batch."""
    if d == TARGET and not config.aligns:
        return None
    z = model.backbone(Tensor(sample.image))
    total = None
    if d == SOURCE:
        proposals = props.generate_proposals(rng, sample.boxes, model.image_size, model.proposal_config)
        pooled = model.head.pool(model.roi_map(z), proposals)
        logits, deltas = model.head(pooled)
        labels, targets = match_proposals(proposals, sample.boxes, sample.classes, config.iou_fg)
        det = detection_loss(logits, deltas, labels, targets, config.box_loss_weight)
        result.terms["det"] = det
        total = det
        if not config.aligns:
            return total
        partition = inst.partition_source(proposals, sample.boxes, config.iou_fg)
    elif config.instance:
        if detached and "proposals" in detached:
            proposals = detached["proposals"]
        else:
            dets = model.detect(model.roi_map(z), model.anchors, 0.5, config.nms_iou)
            refs = np.asarray([b for b, _, _ in dets[:3]]).reshape(-1, 4)
            proposals = props.generate_proposals(rng, refs, model.image_size, model.proposal_config)
        result.detached.setdefault(key, {})["proposals"] = proposals
        pooled = model.head.pool(model.roi_map(z), proposals)
        logits, _ = model.head(pooled)
        scores = ops.softmax(logits.data)
        partition = inst.partition_target(proposals, scores, config.target_score_threshold, config.object_rule)
        ops.note_branch(np.concatenate([partition.fg, [-1], partition.bg]))

    if config.aligns_image:
        feat = ad.feat_loss(
            z, d, model.adaptors,
            local=config.local, transition=config.transition, global_=config.global_,
            mask=config.mask, mask_transition=config.mask_transition,
            eta=config.eta, grl_scale=config.lam, fixed_masks=(detached or {}).get("masks"),
        )
        for name, term in feat.terms.items():
            result.terms[f"{name}_{key}"] = term
        result.probs[key] = feat.probs
        result.detached.setdefault(key, {})["masks"] = feat.masks
        total = _add(total, feat.loss)
    if config.instance:
        result.instance_batches[key] = inst.InstanceBatch(partition, pooled, d)
    return total


def compute_objective(
    model: DAAModel, source: DetectionSample, target: DetectionSample, config: TrainConfig, rng,
    detached: dict | None = None,
) -> StepResult:
    """Forward pass of one step: detection loss on the source image plus the
    alignment losses of both images. Reversal layers carry ``lambda``, so the
    returned total is the unscaled sum. Instance discriminators run once over
    the instances of both images so batch norm sees the whole step.


    Quantities that carry no gradient (DMI masks, target proposals) are
    recorded in ``result.detached``; passing that dict back as ``detached``
    reuses them instead of recomputing, which a finite-difference oracle
    needs to hold them constant."""
    detached = detached or {}
    result = StepResult(total=None, terms={})
    total = _domain_forward(model, source, SOURCE, config, rng, result, "s", detached.get("s"))
    t = _domain_forward(model, target, TARGET, config, rng, result, "t", detached.get("t"))
    if t is not None:
        total = total + t
    if config.instance:
        keys = list(result.instance_batches)
        batches = [result.instance_batches[k] for k in keys]
        if config.single_instance_disc:
            roi = inst.joint_single_discriminator_loss(batches, model.inst_single, config.lam,
                                                     config.paired_instance_terms)
        else:
            roi = inst.joint_roi_alignment_loss(batches, model.inst_fg, model.inst_bg, config.lam,
                                                config.paired_instance_terms)
        for i, key in enumerate(keys):
            result.terms[f"roi_{key}"] = roi.losses.get(i, Tensor(0.0))
            result.instance_probs[key] = roi.probs.get(i, {})
            part = batches[i].partition
            result.counts[key] = (len(part.fg), len(part.bg))
        total = total + roi.total
    result.total = total
    return result


def _check_finite(result: StepResult, step: int) -> None:
    for name, term in result.terms.items():
        if not np.all(np.isfinite(term.data)):
            dump = {k: float(v.data) for k, v in result.terms.items()}
            raise TrainingError(f"non-finite loss term {name!r} at step {step}: {dump}")


def _batch_accuracy(probs: dict, d: int) -> dict:
    return {k: float(np.mean((v > 0.5) == bool(d))) for k, v in probs.items()}


def make_optimizer(config: TrainConfig) -> SgdOptimizer:
    return SgdOptimizer(config.lr, config.weight_decay, config.momentum)


def train_step(model: DAAModel, source, target, config: TrainConfig, rng, step: int, optimizer=None) -> dict:
    """One SGD step; returns the metrics row for this iteration."""
    optimizer = optimizer or make_optimizer(config)
    model.zero_grad()
    result = compute_objective(model, source, target, config, rng)
    _check_finite(result, step)
    backward(result.total)
    optimizer.learning_rate = config.lr_at(step)
    sgd_step(model.detector_parameters(), optimizer)
    sgd_step(model.local_discriminator_parameters(), optimizer, config.local_disc_lr_scale)
    sgd_step(model.other_discriminator_parameters(), optimizer, config.disc_lr_scale)

    row = {"iteration": step, "total": float(result.total.data)}
    for name in TERM_NAMES[1:]:
        vals = [float(v.data) for k, v in result.terms.items() if k.split("_")[0] == name]
        row[f"L_{name}"] = sum(vals) if vals else 0.0
    row["L_det"] = float(result.terms["det"].data)
    for key, d in (("s", SOURCE), ("t", TARGET)):
        for adaptor, acc in _batch_accuracy(result.probs.get(key, {}), d).items():
            row[f"acc_{adaptor}_{key}"] = acc
        fg, bg = result.counts.get(key, (0, 0))
        row[f"fg_{key}"], row[f"bg_{key}"] = fg, bg
    return row


# --- evaluation -------------------------------------------------------------

def domain_probabilities(model: DAAModel, samples, config: TrainConfig) -> dict:
    """Image-level discriminator outputs on held-out images, grouped by adaptor."""
    out = {a: [] for a in ad.ADAPTOR_IDS}
    with no_grad():
        for s in samples:
            z1, z2, z3 = model.backbone(Tensor(s.image))
            out["local"].append(model.adaptors.local(z1).data.ravel())
            pl, pg = model.adaptors.transition(z2)
            out["transition_local"].append(pl.data.ravel())
            out["transition_global"].append(pg.data.ravel())
            out["global"].append(model.adaptors.global_(z3).data.ravel())
    return {k: np.concatenate(v) if v else np.zeros(0) for k, v in out.items()}


def domain_accuracy(source_probs: dict, target_probs: dict) -> dict:
    """Balanced accuracy per adaptor: mean of per-domain correct rates.

    Source is correct below 0.5 and target above; exactly 0.5 scores half.
    """
    acc = {}
    for k in ad.ADAPTOR_IDS:
        ps, pt = source_probs.get(k, np.zeros(0)), target_probs.get(k, np.zeros(0))
        if ps.size == 0 or pt.size == 0:
            continue
        src = np.mean((ps < 0.5) + 0.5 * (ps == 0.5))
        tgt = np.mean((pt > 0.5) + 0.5 * (pt == 0.5))
        acc[k] = 0.5 * (float(src) + float(tgt))
    return acc


def histogram_counts(probs: np.ndarray, bins: int = HIST_BINS) -> np.ndarray:
    counts, _ = np.histogram(np.clip(probs, 0.0, 1.0), bins=bins, range=(0.0, 1.0))
    return counts


def histogram_export(diagnostics: dict, path=None, bins: int = HIST_BINS) -> list[dict]:
    """Bin probabilities per ``(adaptor, domain)`` into uniform bins over [0, 1].

    ``diagnostics`` maps domain name -> adaptor id -> probability array.
    Writes a CSV when ``path`` is given and returns the rows.
    """
    rows = []
    edges = np.linspace(0.0, 1.0, bins + 1)
    for domain in sorted(diagnostics):
        for adaptor in ad.ADAPTOR_IDS:
            probs = diagnostics[domain].get(adaptor)
            if probs is None:
                continue
            for i, c in enumerate(histogram_counts(probs, bins)):
                rows.append(
                    {"adaptor": adaptor, "domain": domain, "bin": i,
                     "lo": float(edges[i]), "hi": float(edges[i + 1]), "count": int(c)}
                )
    if path is not None:
        _write_csv(path, rows, ["adaptor", "domain", "bin", "lo", "hi", "count"])
    return rows


def export_probabilities(path, iteration: int, result: StepResult) -> None:
    """Append flattened per-position discriminator outputs of one step."""
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["iteration", "adaptor", "domain", "probability"])
        for key, domain in (("s", "source"), ("t", "target")):
            for adaptor, probs in result.probs.get(key, {}).items():
                for p in np.ravel(probs):
                    w.writerow([iteration, adaptor, domain, repr(float(p))])


def load_model(model_dir, num_classes: int, image_size: int) -> tuple[DAAModel, TrainConfig]:
    """Rebuild a trained model from a directory written by :func:`run_experiment`."""
    model_dir = Path(model_dir)
    config_path = model_dir / "config.json"
    if not config_path.exists():
        raise TrainingError(f"no config.json next to the checkpoint in {model_dir}")
    config = TrainConfig.load(config_path)
    model = DAAModel(config, num_classes, image_size)
    load_checkpoint(model, model_dir)
    return model, config


def evaluate_detection(model: DAAModel, samples, config: TrainConfig) -> dict:
    dets = [model.infer(s.image, config.eval_score_threshold, config.nms_iou) for s in samples]
    gts = [(s.boxes, s.classes) for s in samples]
    return evaluate_map(dets, gts, model.num_classes)


def center_variance(probs: np.ndarray) -> float:
    """Mean squared distance of probabilities from 0.5."""
    return float(np.mean((np.asarray(probs) - 0.5) ** 2)) if np.size(probs) else 0.0


# --- checkpoints ------------------------------------------------------------

def save_checkpoint(model: Module, out_dir) -> None:
    """Flat little-endian float64 parameter dump plus a JSON index."""
    out_dir = Path(out_dir)
    index, offset, chunks = [], 0, []
    for name, p in model.named_parameters():
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        index.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    (out_dir / "model.bin").write_bytes(b"".join(chunks))
    (out_dir / "model.json").write_text(json.dumps({"dtype": "<f8", "params": index}, indent=1))


def load_checkpoint(model: Module, ckpt_dir) -> None:
    ckpt_dir = Path(ckpt_dir)
    index = json.loads((ckpt_dir / "model.json").read_text())["params"]
    raw = (ckpt_dir / "model.bin").read_bytes()
    params = dict(model.named_parameters())
    for entry in index:
        p = params.get(entry["name"])
        if p is None:
            raise TrainingError(f"checkpoint parameter {entry['name']!r} not in model")
        arr = np.frombuffer(raw, dtype="<f8", count=int(np.prod(entry["shape"])), offset=entry["offset"])
        if list(p.shape) != entry["shape"]:
            raise TrainingError(f"shape mismatch for {entry['name']}: {p.shape} vs {entry['shape']}")
        p.data = arr.reshape(entry["shape"]).astype(np.float64)


# --- experiments ------------------------------------------------------------

def _write_csv(path, rows, header) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header, extrasaction="ignore", restval="")
        w.writeheader()
        w.writerows(rows)


def _round(x):
    if isinstance(x, float):
        return float(repr(x)) if math.isfinite(x) else None
    if isinstance(x, dict):
        return {str(k): _round(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_round(v) for v in x]
    return x


def train(model: DAAModel, source_train, target_train, config: TrainConfig, on_step=None) -> list[dict]:
    """Run ``config.iterations`` steps with one source and one target image each."""
    if not source_train:
        raise TrainingError("no source training images")
    order_rng = np.random.default_rng([config.seed, 1])
    step_rng = np.random.default_rng([config.seed, 2])
    optimizer = make_optimizer(config)
    src_order, tgt_order = np.zeros(0, int), np.zeros(0, int)
    rows = []
    start = time.perf_counter()
    for step in range(config.iterations):
        k = step % len(source_train)
        if k == 0:
            src_order = order_rng.permutation(len(source_train))
        if target_train:
            kt = step % len(target_train)
            if kt == 0:
                tgt_order = order_rng.permutation(len(target_train))
            target = target_train[tgt_order[kt]]
        else:
            target = None
        if target is None and config.aligns:
            raise TrainingError("alignment enabled but no target training images")
        row = train_step(model, source_train[src_order[k]], target, config, step_rng, step, optimizer)
        row["wall_time"] = time.perf_counter() - start
        if on_step is not None:
            on_step(step, row)
        if step % config.log_every == 0 or step == config.iterations - 1:
            rows.append(row)
    return rows


def run_experiment(config: TrainConfig, data_dir, out_dir, save_model: bool = True) -> dict:
    """Train on a generated dataset and write report.json, metrics.csv,
    histograms.csv and (with ``save_model``) the checkpoint plus its
    config.json under ``out_dir``."""
    started = time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = read_manifest(data_dir)
    source_train = load_dataset(data_dir, "source_train")
    target_train = load_dataset(data_dir, "target_train")
    source_eval = load_dataset(data_dir, "source_eval", mode="eval")
    target_eval = load_dataset(data_dir, "target_eval", mode="eval")

    model = DAAModel(config, manifest.scene.num_classes, manifest.scene.image_size)
    rows = train(model, source_train, target_train, config)
    header = sorted({k for r in rows for k in r}, key=lambda k: (k != "iteration", k))
    _write_csv(out / "metrics.csv", rows, header)

    target_map = evaluate_detection(model, target_eval, config)
    source_map = evaluate_detection(model, source_eval, config)
    ps = domain_probabilities(model, source_eval, config)
    pt = domain_probabilities(model, target_eval, config)
    histogram_export({"source": ps, "target": pt}, out / "histograms.csv")
    report = {
        "config": config.to_dict(),
        "dataset": {"path": str(Path(data_dir)), "seed": manifest.seed, "counts": manifest.counts},
        "target_map": target_map["map"],
        "target_ap": target_map["ap"],
        "source_map": source_map["map"],
        "source_ap": source_map["ap"],
        "domain_accuracy": domain_accuracy(ps, pt),
        "local_center_variance": center_variance(np.concatenate([ps["local"], pt["local"]])),
        "final_losses": {k: v for k, v in rows[-1].items() if k.startswith("L_")} if rows else {},
    }
    report = _round(report)
    report["wall_time"] = time.perf_counter() - started
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    if save_model:
        save_checkpoint(model, out)
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True))
    return report
