"""Training configuration and the ablation variants."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .adaptors import ConfigError

FLAG_LETTERS = ("L", "T", "G", "M", "I")


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.05
    eta: float = 5.0
    lr: float = 1e-2
    lr_low: float = 1e-3
    lr_drop_fraction: float = 5 / 7
    iterations: int = 2000
    weight_decay: float = 1e-4
    momentum: float = 0.9
    disc_lr_scale: float = 0.05
    local_disc_lr_scale: float = 0.3
    local_disc_negative_slope: float = 0.2
    local: bool = True
    transition: bool = True
    global_: bool = True
    mask: bool = True
    instance: bool = True
    single_instance_disc: bool = False
    mask_transition: bool = True
    paired_instance_terms: bool = True
    seed: int = 0
    widths: tuple = (16, 32, 64)
    head_hidden: int = 64
    pool_level: int = 2
    box_loss_weight: float = 1.0
    iou_fg: float = 0.5
    target_score_threshold: float = 0.9
    object_rule: str = "max"
    proposal_budget: int = 32
    eval_score_threshold: float = 0.05
    nms_iou: float = 0.3
    log_every: int = 10

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.eta < 0:
            raise ConfigError("eta must be >= 0")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.lr <= 0 or self.lr_low <= 0 or self.disc_lr_scale <= 0 or self.local_disc_lr_scale <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0.0 <= self.local_disc_negative_slope < 1.0:
            raise ConfigError("local_disc_negative_slope must be in [0, 1)")
        if self.pool_level not in (1, 2, 3):
            raise ConfigError("pool_level must be 1, 2 or 3")
        if self.object_rule not in ("max", "sum"):
            raise ConfigError("object_rule must be 'max' or 'sum'")

    @property
    def aligns_image(self) -> bool:
        return self.local or self.transition or self.global_

    @property
    def aligns(self) -> bool:
        return self.aligns_image or self.instance

    @property
    def lr_drop_step(self) -> int:
        return int(math.floor(self.iterations * self.lr_drop_fraction))

    def lr_at(self, step: int) -> float:
        return self.lr if step < self.lr_drop_step else self.lr_low

    @property
    def ablation(self) -> str:
        on = (self.local, self.transition, self.global_, self.mask, self.instance)
        return ",".join(letter for letter, flag in zip(FLAG_LETTERS, on) if flag)

    def with_ablation(self, flags: str) -> "TrainConfig":
        return replace(self, **parse_ablation(flags))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        d["global"] = d.pop("global_")
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        if "lambda" in raw:
            raw["lam"] = raw.pop("lambda")
        if "global" in raw:
            raw["global_"] = raw.pop("global")
        if "ablation" in raw:
            raw.update(parse_ablation(raw.pop("ablation")))
        if "widths" in raw:
            raw["widths"] = tuple(raw["widths"])
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def parse_ablation(flags: str) -> dict:
    """``"L,T,G"`` -> switch dict; letters not listed are off. Empty = source only."""
    letters = {f.strip().upper() for f in flags.replace("+", ",").split(",") if f.strip()}
    bad = letters - set(FLAG_LETTERS)
    if bad:
        raise ConfigError(f"unknown ablation flags {sorted(bad)}; use any of {FLAG_LETTERS}")
    return {
        "local": "L" in letters,
        "transition": "T" in letters,
        "global_": "G" in letters,
        "mask": "M" in letters,
        "instance": "I" in letters,
    }


# Table rows of the ablation study: name -> (flags, single instance discriminator)
VARIANTS = {
    "source-only": ("", False),
    "DAA-A": ("L,G", False),
    "DAA-B": ("L,T,G", False),
    "DAA-C": ("L,G,M", False),
    "DAA-D": ("L,T,G,M", False),
    "DAA-E": ("L,T,G,M,I", True),
    "DAA": ("L,T,G,M,I", False),
}


def variant_config(name: str, base: TrainConfig = TrainConfig()) -> TrainConfig:
    flags, single = VARIANTS[name]
    return replace(base.with_ablation(flags), single_instance_disc=single)
