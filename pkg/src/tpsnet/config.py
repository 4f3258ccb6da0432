"""Run configuration: a flat JSON object with strict key and range checks."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .dataset import AugmentParams


class ConfigError(ValueError):
    pass


BACKENDS = ("toy", "pretrained-vlm")
SCHEDULES = ("cosine", "constant")
SPLITS = ("all", "holdout")


@dataclass
class RunConfig:
    backend: str = "toy"
    backend_weights: str | None = None
    d: int = 64
    d_token: int = 32
    image_size: int | None = None
    M: int = 4
    num_categories: int | None = None
    tau: float = 0.07
    epsilon: float = 0.1
    momentum: float = 0.9
    alpha: float = 1.0
    beta: float = 0.2
    R: float = 1.0
    lr: float = 1e-4
    lr_prompts: float | None = None
    schedule: str = "cosine"
    epochs_dpg: int = 30
    epochs_tpdp: int = 30
    batch_size: int = 64
    warmup_epochs: int = 5
    seed: int = 0
    kmeans_n_init: int = 10
    augment: bool = True
    aug_flip_p: float = 0.5
    aug_pad: int = 4
    aug_erase_p: float = 0.5
    use_phase_prior: bool = True
    use_text_prior: bool = True
    domain_paths: list[str] | None = None
    toy_num_classes: int = 5
    toy_per_class: int = 50
    toy_seed: int = 0
    eval_ks: list[int] = field(default_factory=lambda: [1, 5, 15])
    eval_split: str = "all"
    holdout_fraction: float = 0.2

    def __post_init__(self):
        self.validate()

    @property
    def resolved_image_size(self) -> int:
        if self.image_size is not None:
            return self.image_size
        return 32 if self.backend == "toy" else 224

    @property
    def augment_params(self) -> AugmentParams:
        return AugmentParams(flip_p=self.aug_flip_p, pad=self.aug_pad, erase_p=self.aug_erase_p)

    @property
    def prompt_lr(self) -> float:
        return self.lr if self.lr_prompts is None else self.lr_prompts

    def validate(self) -> None:
        def need(cond: bool, name: str, msg: str) -> None:
            if not cond:
                raise ConfigError(f"{name}: {msg} (got {getattr(self, name)!r})")

        def is_int(v) -> bool:
            return isinstance(v, int) and not isinstance(v, bool)

        def is_num(v) -> bool:
            return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)

        need(self.backend in BACKENDS, "backend", f"must be one of {BACKENDS}")
        need(self.schedule in SCHEDULES, "schedule", f"must be one of {SCHEDULES}")
        need(self.eval_split in SPLITS, "eval_split", f"must be one of {SPLITS}")
        for name, lo in [("d", 8), ("d_token", 1), ("M", 1), ("batch_size", 2), ("kmeans_n_init", 1),
                         ("toy_num_classes", 2), ("toy_per_class", 2)]:
            need(is_int(getattr(self, name)) and getattr(self, name) >= lo, name, f"must be an integer >= {lo}")
        for name in ("epochs_dpg", "epochs_tpdp", "warmup_epochs", "seed", "toy_seed"):
            need(is_int(getattr(self, name)) and getattr(self, name) >= 0, name, "must be a non-negative integer")
        if self.image_size is not None:
            need(is_int(self.image_size) and self.image_size >= 16 and self.image_size % 4 == 0,
                 "image_size", "must be an integer >= 16 divisible by 4")
        if self.num_categories is not None:
            need(is_int(self.num_categories) and self.num_categories >= 1, "num_categories",
                 "must be a positive integer")
        need(is_num(self.tau) and self.tau > 0, "tau", "must be > 0")
        need(is_num(self.epsilon) and 0 <= self.epsilon < 1, "epsilon", "must lie in [0, 1)")
        need(is_num(self.momentum) and 0 <= self.momentum <= 1, "momentum", "must lie in [0, 1]")
        need(is_num(self.alpha) and self.alpha >= 0, "alpha", "must be >= 0")
        need(is_num(self.beta) and self.beta >= 0, "beta", "must be >= 0")
        need(is_num(self.R) and self.R != 0, "R", "must be non-zero")
        for name in ("aug_flip_p", "aug_erase_p"):
            need(is_num(getattr(self, name)) and 0 <= getattr(self, name) <= 1, name, "must lie in [0, 1]")
        need(is_int(self.aug_pad) and self.aug_pad >= 0, "aug_pad", "must be a non-negative integer")
        need(is_num(self.lr) and self.lr > 0, "lr", "must be > 0")
        if self.lr_prompts is not None:
            need(is_num(self.lr_prompts) and self.lr_prompts > 0, "lr_prompts", "must be > 0")
        need(is_num(self.holdout_fraction) and 0 < self.holdout_fraction < 1, "holdout_fraction",
             "must lie in (0, 1)")
        for name in ("augment", "use_phase_prior", "use_text_prior"):
            need(isinstance(getattr(self, name), bool), name, "must be a boolean")
        need(isinstance(self.eval_ks, list) and len(self.eval_ks) > 0
             and all(is_int(k) and k >= 1 for k in self.eval_ks), "eval_ks", "must be a non-empty list of positive integers")
        if self.domain_paths is not None:
            need(isinstance(self.domain_paths, list) and len(self.domain_paths) == 2
                 and all(isinstance(p, str) for p in self.domain_paths), "domain_paths",
                 "must be a list of two directory paths")
        if self.backend_weights is not None:
            need(isinstance(self.backend_weights, str), "backend_weights", "must be a path string")
        if self.backend == "pretrained-vlm":
            need(self.backend_weights is not None, "backend_weights", "is required for the pretrained-vlm backend")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def load_config(path: str | Path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(data)


def save_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(config.dumps() + "\n")
