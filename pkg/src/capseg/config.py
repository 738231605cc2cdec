"""Experiment configuration: every hyperparameter in one flat record.

Config files are UTF-8, either JSON objects or ``key=value`` lines
(``#`` comments allowed).  Unknown keys are rejected so typos fail fast.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, fields, asdict
from pathlib import Path

from .errors import ConfigError
from .model_core import ModelConfig, ProposalConfig

STRATEGIES = (
    "teacher_only",
    "x_only",
    "x_plus_mask",
    "robust",
    "class_score",
    "pixel_score",
    "dropout_entropy",
)


@dataclass
class RunConfig:
    seed: int = 1

    # vocabulary / embeddings
    n_base_classes: int = 12
    n_caption_only_classes: int = 8
    n_target_classes: int = 4
    d_attr: int = 16
    d_noise: int = 8

    # dataset
    n_base_images: int = 1500
    n_caption_images: int = 2000
    n_test_images: int = 400
    caption_noise_rate: float = 0.3
    image_size: int = 64

    # model
    backbone_channels: tuple[int, int, int] = (8, 16, 24)
    embed_hidden: int = 64
    roi_size: int = 7
    mask_size: int = 28
    head_channels: int = 16
    proposal_scales: tuple[float, ...] = (12.0, 18.0, 26.0)
    proposal_ratios: tuple[float, ...] = (1.0, 2.0)
    proposal_stride: int = 8
    gt_jitter: float = 0.1
    jitters_per_gt: int = 4

    # optimization
    teacher_iterations: int = 2000
    teacher_lr: float = 0.01
    student_iterations: int = 1500
    student_lr: float = 0.001
    momentum: float = 0.9
    lr_decay_step: int = 0  # 0 disables the single x0.1 decay
    base_batch_size: int = 2
    caption_batch_size: int = 2  # caption:base mixing is 1:1 by batches

    # losses
    bg_weight: float = 0.2
    normalize_mask_loss: bool = True
    mc_samples: int = 4  # >=2 lets predicted variance absorb label errors

    # robust student
    strategy: str = "robust"
    eta: float = 0.0  # 0 means calibrate; the reference operating point is 0.01
    eta_calibration_steps: int = 0  # 0 follows the student schedule
    eta_calibration_images: int = 300
    cache_pseudo_labels: bool = True

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r} (choose from {STRATEGIES})")
        if not 0.0 <= self.caption_noise_rate <= 1.0:
            raise ConfigError("caption_noise_rate must lie in [0, 1]")
        if self.eta < 0:
            raise ConfigError("eta must be >= 0 (0 requests calibration)")
        for name in ("teacher_iterations", "student_iterations", "base_batch_size",
                     "caption_batch_size", "mc_samples", "image_size"):
            if getattr(self, name) < 0 or (name.endswith("batch_size") and getattr(self, name) < 1):
                raise ConfigError(f"{name} out of range: {getattr(self, name)}")

    def model_config(self, embed_dim: int) -> ModelConfig:
        return ModelConfig(
            image_size=self.image_size,
            backbone_channels=tuple(self.backbone_channels),
            embed_hidden=self.embed_hidden,
            embed_dim=embed_dim,
            roi_size=self.roi_size,
            mask_size=self.mask_size,
            head_channels=self.head_channels,
            proposals=ProposalConfig(
                scales=tuple(self.proposal_scales),
                ratios=tuple(self.proposal_ratios),
                stride=self.proposal_stride,
                gt_jitter=self.gt_jitter,
                jitters_per_gt=self.jitters_per_gt,
            ),
        )

    @property
    def embed_dim(self) -> int:
        return self.d_attr + self.d_noise

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("backbone_channels", "proposal_scales", "proposal_ratios"):
            d[key] = list(d[key])
        return d

    def digest(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        ).hexdigest()

    def replace(self, **overrides) -> "RunConfig":
        d = self.to_dict()
        d.update(overrides)
        return RunConfig.from_dict(d)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(raw) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for name, value in raw.items():
            target = known[name].type
            if name in ("backbone_channels", "proposal_scales", "proposal_ratios"):
                value = tuple(value) if not isinstance(value, str) else tuple(
                    _parse_scalar(v) for v in value.split(",") if v.strip()
                )
            elif isinstance(value, str):
                value = _coerce(name, value, target)
            kwargs[name] = value
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        text = Path(path).read_text(encoding="utf-8")
        stripped = text.lstrip()
        if stripped.startswith("{"):
            try:
                raw = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
            if not isinstance(raw, dict):
                raise ConfigError(f"{path}: config JSON must be an object")
            return cls.from_dict(raw)
        raw = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, value = (part.strip() for part in line.split("=", 1))
            raw[key] = value
        return cls.from_dict(raw)


def _parse_scalar(text: str):
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        return float(text)


def _coerce(name: str, value: str, target: str):
    if target == "bool" or value.lower() in ("true", "false"):
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{name}: cannot parse bool from {value!r}")
    if target == "int":
        return int(value)
    if target == "float":
        return float(value)
    return value
