"""Multi-seed experiment suites: ablation variants and the diagnostic runs."""

from __future__ import annotations

import json
import logging
import statistics
from dataclasses import dataclass, replace
from pathlib import Path

from .config import VARIANTS, TrainConfig, variant_config
from .data import SHIFT_PRESETS, DatasetError, SceneSpec, generate_dataset, read_manifest
from .train import run_experiment

logger = logging.getLogger(__name__)

# Extra runs beside the ablation rows: DAA without the mask and DAA with the
# reversal scale at zero (discriminators train, features are left alone).
DIAGNOSTIC_RUNS = ("DAA-no-mask", "DAA-lambda0")
SUITE_RUNS = ("source-only", "DAA-E", "DAA") + DIAGNOSTIC_RUNS


def run_config(name: str, base: TrainConfig = TrainConfig()) -> TrainConfig:
    """Config for an ablation variant or one of :data:`DIAGNOSTIC_RUNS`."""
    if name in VARIANTS:
        return variant_config(name, base)
    full = variant_config("DAA", base)
    if name == "DAA-no-mask":
        return replace(full, mask=False)
    if name == "DAA-lambda0":
        return replace(full, lam=0.0)
    raise KeyError(f"unknown run {name!r}; choose from {sorted(VARIANTS) + list(DIAGNOSTIC_RUNS)}")


@dataclass(frozen=True)
class DataSettings:
    image_size: int = 32
    num_classes: int = 3
    shift_preset: str = "default"
    n_source: int = 400
    n_target: int = 400
    n_eval: int = 100


def ensure_dataset(root, seed: int, settings: DataSettings = DataSettings()) -> Path:
    """Generate the dataset for ``seed`` under ``root`` unless a matching one exists."""
    path = Path(root) / f"data-seed{seed}"
    if (path / "manifest.json").exists():
        manifest = read_manifest(path)
        if manifest.seed == seed and manifest.counts.get("source_train") == settings.n_source:
            return path
        raise DatasetError(f"{path} holds a different dataset; remove it or pick another root")
    src, tgt = SHIFT_PRESETS[settings.shift_preset]
    spec = SceneSpec(image_size=settings.image_size, num_classes=settings.num_classes)
    generate_dataset(spec, src, tgt, settings.n_source, settings.n_target, seed, path, settings.n_eval)
    return path


def run_suite(
    names,
    seeds,
    out_root,
    base: TrainConfig = TrainConfig(),
    data: DataSettings = DataSettings(),
    data_root=None,
    data_dir=None,
) -> dict:
    """Train every named run for every seed; seed ``s`` uses dataset seed ``s``
    (generated under ``data_root``) and training seed ``s``. A given
    ``data_dir`` is shared by all seeds instead. Returns
    ``{name: [report, ...]}`` in seed order."""
    out_root = Path(out_root)
    data_root = Path(data_root) if data_root is not None else out_root
    results = {name: [] for name in names}
    for seed in seeds:
        seed_data = Path(data_dir) if data_dir is not None else ensure_dataset(data_root, seed, data)
        for name in names:
            config = replace(run_config(name, base), seed=seed)
            out = out_root / name / f"seed{seed}"
            report = run_experiment(config, seed_data, out, save_model=False)
            logger.info("%s seed %d: target mAP %.3f (%.0f s)", name, seed, report["target_map"], report["wall_time"])
            results[name].append(report)
    return results


def median_of(reports, key: str) -> float:
    return statistics.median(r[key] for r in reports)


def median_domain_accuracy(reports) -> dict:
    adaptors = sorted({a for r in reports for a in r["domain_accuracy"]})
    return {a: statistics.median(r["domain_accuracy"][a] for r in reports if a in r["domain_accuracy"]) for a in adaptors}


def summarize(results: dict) -> dict:
    """Per-run medians of target/source mAP, centre variance and domain accuracy."""
    out = {}
    for name, reports in results.items():
        if not reports:
            continue
        out[name] = {
            "seeds": [r["config"]["seed"] for r in reports],
            "target_map": [r["target_map"] for r in reports],
            "median_target_map": median_of(reports, "target_map"),
            "median_source_map": median_of(reports, "source_map"),
            "median_local_center_variance": median_of(reports, "local_center_variance"),
            "median_domain_accuracy": median_domain_accuracy(reports),
            "total_wall_time": sum(r["wall_time"] for r in reports),
        }
    return out


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def check_ablation_ordering(summary: dict, margin: float = 0.05) -> CheckResult:
    daa = summary["DAA"]["median_target_map"]
    single = summary["DAA-E"]["median_target_map"]
    base = summary["source-only"]["median_target_map"]
    ok = daa > single and daa >= base + margin
    return CheckResult(
        "ablation ordering",
        ok,
        f"median target mAP DAA {daa:.3f}, DAA-E {single:.3f}, source-only {base:.3f} (need DAA > DAA-E and >= source-only + {margin})",
    )


def check_histogram_concentration(summary: dict) -> CheckResult:
    with_mask = summary["DAA"]["median_local_center_variance"]
    without = summary["DAA-no-mask"]["median_local_center_variance"]
    return CheckResult(
        "histogram concentration",
        with_mask < without,
        f"median local variance about 0.5: with mask {with_mask:.3g}, without {without:.3g}",
    )


def check_equilibrium(summary: dict, window=(0.4, 0.75), off_floor: float = 0.9) -> CheckResult:
    on = summary["DAA"]["median_domain_accuracy"]
    off = summary["DAA-lambda0"]["median_domain_accuracy"]
    lo, hi = window
    ok = all(lo <= v <= hi for v in on.values()) and all(v > off_floor for v in off.values())
    fmt = lambda d: ", ".join(f"{k} {v:.3f}" for k, v in sorted(d.items()))  # noqa: E731
    return CheckResult("equilibrium", ok, f"lambda>0: {fmt(on)}; lambda=0: {fmt(off)}")


def write_summary(summary: dict, path) -> None:
    Path(path).write_text(json.dumps(summary, indent=1, sort_keys=True))
