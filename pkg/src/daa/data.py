"""Deterministic two-domain synthetic detection scenes.

A scene is a flat background with 1-3 non-overlapping filled shapes
(square, circle, triangle). A domain transform perturbs appearance only:
contrast, per-channel colour shift, striped background texture and
Gaussian noise. Geometry depends on ``(seed, split, index)`` and never on
the domain, so paired scenes share annotations exactly.

On disk a dataset is a directory holding ``manifest.json`` and one
sub-directory per split with raw little-endian float32 C x H x W images.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

FORMAT = "daa-synthetic/1"
CLASS_NAMES = ("square", "circle", "triangle")
SPLITS = ("source_train", "target_train", "source_eval", "target_eval")
_SPLIT_CODE = {name: i for i, name in enumerate(SPLITS)}
SOURCE, TARGET = 0, 1


class DatasetError(Exception):
    pass


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 32
    num_classes: int = 3
    objects_per_image: tuple = (1, 3)
    object_size: tuple = (8, 14)

    def validate(self) -> None:
        if self.image_size <= 0 or self.image_size % 8:
            raise DatasetError(f"image_size must be a positive multiple of 8, got {self.image_size}")
        if not 1 <= self.num_classes <= len(CLASS_NAMES):
            raise DatasetError(f"num_classes must be in [1, {len(CLASS_NAMES)}]")
        lo, hi = self.objects_per_image
        if not 1 <= lo <= hi:
            raise DatasetError(f"bad objects_per_image {self.objects_per_image}")
        smin, smax = self.object_size
        if not 3 <= smin <= smax <= self.image_size:
            raise DatasetError(f"bad object_size {self.object_size}")


@dataclass(frozen=True)
class DomainTransform:
    color_shift: tuple = (0.0, 0.0, 0.0)
    noise_sigma: float = 0.0
    background: str = "flat"
    contrast: float = 1.0
    stripe_period: int = 4
    stripe_amplitude: float = 0.2

    def is_identity(self) -> bool:
        return self == DomainTransform()


SHIFT_PRESETS = {
    "none": (DomainTransform(), DomainTransform()),
    "default": (
        DomainTransform(),
        DomainTransform(color_shift=(0.25, -0.05, -0.2), noise_sigma=0.05, background="striped", contrast=0.6),
    ),
    "color": (DomainTransform(), DomainTransform(color_shift=(0.3, -0.1, -0.25), contrast=0.6)),
}


@dataclass
class DetectionSample:
    image: np.ndarray
    boxes: Optional[np.ndarray]
    classes: Optional[np.ndarray]
    domain: int
    index: int = 0

    @property
    def annotated(self) -> bool:
        return self.boxes is not None


@dataclass
class DatasetManifest:
    seed: int
    scene: SceneSpec
    transforms: dict
    counts: dict
    root: Optional[Path] = None
    entries: dict = field(default_factory=dict)


# --- rendering --------------------------------------------------------------

def _shape_mask(kind: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if kind == 0:
        return np.ones((size, size), dtype=bool)
    if kind == 1:
        r = size / 2
        return (xx - r) ** 2 + (yy - r) ** 2 <= r * r
    # apex at top centre, base along the bottom row
    half = size / 2
    return np.abs(xx - half) <= half * yy / size


def render_scene(spec: SceneSpec, seed: int, split: str, index: int):
    """Clean scene: returns (image HxWx3 float64, object mask, boxes, classes)."""
    rng = np.random.default_rng([seed, _SPLIT_CODE[split], index, 0])
    n = spec.image_size
    bg = rng.uniform(0.35, 0.65) + rng.uniform(-0.05, 0.05, size=3)
    img = np.broadcast_to(bg, (n, n, 3)).copy()
    objmask = np.zeros((n, n), dtype=bool)
    count = int(rng.integers(spec.objects_per_image[0], spec.objects_per_image[1] + 1))
    boxes, classes = [], []
    for attempt in range(200):
        if len(boxes) == count:
            break
        size = int(rng.integers(spec.object_size[0], spec.object_size[1] + 1))
        x, y = (int(v) for v in rng.integers(0, n - size + 1, size=2))
        cls = int(rng.integers(spec.num_classes))
        color = rng.uniform(0.0, 1.0, size=3)
        # keep objects separated by one pixel
        if any(x < b[2] + 1 and b[0] < x + size + 1 and y < b[3] + 1 and b[1] < y + size + 1 for b in boxes):
            continue
        mask = _shape_mask(cls, size)
        # push the colour away from the background so every object is visible
        if np.abs(color - bg).max() < 0.3:
            color = np.where(color > bg, np.minimum(color + 0.3, 1.0), np.maximum(color - 0.3, 0.0))
        region = img[y : y + size, x : x + size]
        region[mask] = color
        objmask[y : y + size, x : x + size] |= mask
        ys, xs = np.nonzero(mask)
        boxes.append([x + xs.min(), y + ys.min(), x + xs.max() + 1, y + ys.max() + 1])
        classes.append(cls)
    return img, objmask, np.asarray(boxes, dtype=float).reshape(-1, 4), np.asarray(classes, dtype=np.int64)


def apply_transform(img: np.ndarray, objmask: np.ndarray, transform: DomainTransform, rng: np.random.Generator) -> np.ndarray:
    out = img.copy()
    if transform.background == "striped":
        n = img.shape[0]
        cols = np.arange(n)
        stripe = np.where((cols[None, :] + cols[:, None]) // max(transform.stripe_period // 2, 1) % 2 == 0, 1.0, -1.0)
        out[~objmask] += transform.stripe_amplitude * stripe[~objmask][:, None]
    elif transform.background != "flat":
        raise DatasetError(f"unknown background mode {transform.background!r}")
    out = (out - 0.5) * transform.contrast + 0.5
    out = out + np.asarray(transform.color_shift, dtype=float)
    if transform.noise_sigma > 0:
        out = out + rng.normal(0.0, transform.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def make_sample(spec: SceneSpec, transform: DomainTransform, seed: int, split: str, index: int) -> DetectionSample:
    img, objmask, boxes, classes = render_scene(spec, seed, split, index)
    rng = np.random.default_rng([seed, _SPLIT_CODE[split], index, 1])
    img = apply_transform(img, objmask, transform, rng)
    chw = np.ascontiguousarray(img.transpose(2, 0, 1)).astype("<f4")
    domain = SOURCE if split.startswith("source") else TARGET
    return DetectionSample(chw.astype(np.float64), boxes, classes, domain, index)


# --- persistence ------------------------------------------------------------

def _manifest_dict(m: DatasetManifest) -> dict:
    return {
        "format": FORMAT,
        "seed": m.seed,
        "scene": asdict(m.scene),
        "transforms": {k: asdict(v) for k, v in m.transforms.items()},
        "counts": m.counts,
        "splits": m.entries,
    }


def generate_dataset(
    spec: SceneSpec,
    source_transform: DomainTransform,
    target_transform: DomainTransform,
    n_source: int,
    n_target: int,
    seed: int,
    out_dir,
    n_eval: int = 100,
) -> DatasetManifest:
    """Write all four splits under ``out_dir`` and return the manifest.

    Target annotations are written but marked eval-only.
    """
    spec.validate()
    if n_source <= 0:
        raise DatasetError("n_source must be positive; training needs labelled source images")
    if n_target < 0 or n_eval < 0:
        raise DatasetError("sample counts must be non-negative")
    root = Path(out_dir)
    counts = {"source_train": n_source, "target_train": n_target, "source_eval": n_eval, "target_eval": n_eval}
    transforms = {"source": source_transform, "target": target_transform}
    manifest = DatasetManifest(seed, spec, transforms, counts, root)
    for split, count in counts.items():
        (root / split).mkdir(parents=True, exist_ok=True)
        transform = source_transform if split.startswith("source") else target_transform
        entries = []
        for i in range(count):
            s = make_sample(spec, transform, seed, split, i)
            raw = s.image.astype("<f4").tobytes()
            rel = f"{split}/{i:05d}.f32"
            (root / rel).write_bytes(raw)
            entries.append(
                {
                    "file": rel,
                    "shape": list(s.image.shape),
                    "boxes": s.boxes.tolist(),
                    "classes": s.classes.tolist(),
                    "sha256": hashlib.sha256(raw).hexdigest(),
                    "annotations": "eval-only" if split.startswith("target") else "train",
                }
            )
        manifest.entries[split] = entries
    (root / "manifest.json").write_text(json.dumps(_manifest_dict(manifest), indent=1))
    return manifest


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise DatasetError(f"manifest not found: {path}")
    raw = json.loads(path.read_text())
    if raw.get("format") != FORMAT:
        raise DatasetError(f"{path}: unsupported format {raw.get('format')!r}")
    scene = raw["scene"]
    spec = SceneSpec(
        scene["image_size"], scene["num_classes"], tuple(scene["objects_per_image"]), tuple(scene["object_size"])
    )
    transforms = {}
    for k, v in raw["transforms"].items():
        v = dict(v)
        v["color_shift"] = tuple(v["color_shift"])
        transforms[k] = DomainTransform(**v)
    return DatasetManifest(raw["seed"], spec, transforms, raw["counts"], path.parent, raw["splits"])


def load_dataset(path, split: str, mode: str = "train") -> list[DetectionSample]:
    """Load one split in manifest order, verifying every checksum.

    In ``train`` mode eval-only (target) annotations are withheld: the
    returned samples carry ``boxes=None`` and ``classes=None``.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    manifest = read_manifest(path)
    if split not in manifest.entries:
        raise DatasetError(f"split {split!r} not in manifest")
    domain = SOURCE if split.startswith("source") else TARGET
    out = []
    for i, entry in enumerate(manifest.entries[split]):
        f = manifest.root / entry["file"]
        if not f.exists():
            raise DatasetError(f"missing image file: {f}")
        raw = f.read_bytes()
        if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise DatasetError(f"checksum mismatch: {f}")
        image = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).astype(np.float64)
        hidden = mode == "train" and entry["annotations"] == "eval-only"
        boxes = None if hidden else np.asarray(entry["boxes"], dtype=float).reshape(-1, 4)
        classes = None if hidden else np.asarray(entry["classes"], dtype=np.int64)
        out.append(DetectionSample(image, boxes, classes, domain, i))
    return out
