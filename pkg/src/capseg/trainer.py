"""Two-phase training: teacher on base masks, robust student on both sets.

The teacher minimizes the ground-truth loss with momentum SGD.  The
student starts as a copy of the teacher and, per step, draws one caption
batch and one base batch (1:1 mixing), regenerates pseudo labels from the
frozen teacher, and steps every head through the combined objective; the
reliability detachment lives in the loss graph, so a single optimizer
covers all parameters while the noise head still trains through the mask
loss.

Determinism: every random draw comes from a generator derived statelessly
from (seed, stream, step), so two runs with the same config produce
bit-identical checkpoints and a resumed run replays an uninterrupted one
exactly (momentum buffers ride in the checkpoint).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .config import RunConfig
from .errors import ConfigError, DataError, DivergenceError
from .evaluator import make_alpha_fn
from .losses import (
    LossConfig,
    NoiseConfig,
    StudentLossConfig,
    calibrate_eta,
    gt_batch_loss,
    total_student_objective,
)
from .model_core import (
    SegModel,
    build_model,
    clone_model,
    propose_regions,
    stream_generator,
)
from .pseudo_labeler import PseudoLabel, generate_pseudo_labels
from .semantic_space import EmbeddingTable, Vocabulary
from .synthetic_world import CaptionedSample, MaskedSample

LOG_COLUMNS = ("iteration", "l_gt", "l_x", "l_m", "l_x_alpha", "mean_alpha", "min_alpha", "max_alpha")


@dataclass(frozen=True)
class StudentVariant:
    """Loss wiring for one training strategy."""

    name: str
    loss_cfg: StudentLossConfig
    alpha_strategy: str | None = None  # evaluator strategy for external alphas
    skip_training: bool = False


def variant_factory(strategy: str) -> StudentVariant:
    """Map a strategy name onto the caption-loss configuration it trains."""
    if strategy == "teacher_only":
        return StudentVariant(
            strategy, StudentLossConfig(use_xmodal=False, use_mask=False, alpha_source="none"),
            skip_training=True,
        )
    if strategy == "x_only":
        return StudentVariant(strategy, StudentLossConfig(use_mask=False, alpha_source="none"))
    if strategy == "x_plus_mask":
        return StudentVariant(strategy, StudentLossConfig(noisy_mask=False, alpha_source="none"))
    if strategy == "robust":
        return StudentVariant(strategy, StudentLossConfig(noisy_mask=True, alpha_source="noise"))
    if strategy in ("class_score", "pixel_score", "dropout_entropy"):
        return StudentVariant(
            strategy,
            StudentLossConfig(noisy_mask=False, alpha_source="external"),
            alpha_strategy=strategy,
        )
    raise ConfigError(f"unknown strategy {strategy!r}")


def _momentum_buffers(model: SegModel, opt: torch.optim.SGD) -> dict[str, np.ndarray]:
    buffers = {}
    for name, p in model.named_parameters():
        state = opt.state.get(p, {})
        buf = state.get("momentum_buffer")
        buffers[name] = (
            buf.detach().numpy().copy() if buf is not None else np.zeros(p.shape, dtype=np.float64)
        )
    return buffers


def _restore_momentum(model: SegModel, opt: torch.optim.SGD, buffers: dict[str, np.ndarray]) -> None:
    for name, p in model.named_parameters():
        if name in buffers:
            opt.state[p] = {"momentum_buffer": torch.from_numpy(buffers[name].copy())}


def _check_finite(value: float, step: int, phase: str) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite {phase} loss at iteration {step}: {value}")


def train_teacher(
    cfg: RunConfig,
    vocab: Vocabulary,
    table: EmbeddingTable,
    base_data: Sequence[MaskedSample],
    start_model: SegModel | None = None,
    start_iteration: int = 0,
    momentum_buffers: dict[str, np.ndarray] | None = None,
    log_fn: Callable[[dict], None] | None = None,
) -> tuple[SegModel, dict[str, np.ndarray]]:
    """Minimize the ground-truth loss on base data; returns model + momentum."""
    if not base_data:
        raise DataError("teacher training requires a nonempty base dataset")
    model = start_model if start_model is not None else build_model(cfg.model_config(table.dim), cfg.seed)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.teacher_lr, momentum=cfg.momentum)
    if momentum_buffers:
        _restore_momentum(model, opt, momentum_buffers)
    loss_cfg = LossConfig(bg_weight=cfg.bg_weight, normalize_mask_loss=cfg.normalize_mask_loss)

    for step in range(start_iteration, cfg.teacher_iterations):
        if cfg.lr_decay_step and step >= cfg.lr_decay_step:
            for group in opt.param_groups:
                group["lr"] = cfg.teacher_lr * 0.1
        idx = torch.randint(
            0, len(base_data), (cfg.base_batch_size,),
            generator=stream_generator(cfg.seed, "teacher-batch", step),
        ).tolist()
        jitter_g = stream_generator(cfg.seed, "teacher-jitter", step)
        sample_g = stream_generator(cfg.seed, "teacher-subsample", step)
        batch = []
        for i in idx:
            sample = base_data[i]
            proposals = propose_regions(
                *sample.image.shape[:2], "train",
                gt_boxes=[ann.box for ann in sample.annotations],
                cfg=model.cfg.proposals, generator=jitter_g,
            )
            batch.append((sample, proposals))
        opt.zero_grad()
        loss = gt_batch_loss(model, batch, vocab, table, loss_cfg, sample_g)
        _check_finite(float(loss.detach()), step, "teacher")
        loss.backward()
        opt.step()
        if log_fn is not None:
            log_fn({
                "iteration": step, "l_gt": float(loss.detach()), "l_x": 0.0, "l_m": 0.0,
                "l_x_alpha": 0.0, "mean_alpha": 0.0, "min_alpha": 0.0, "max_alpha": 0.0,
            })
    return model, _momentum_buffers(model, opt)


class PseudoLabelCache:
    """Per-sample pseudo labels from a frozen teacher (pure, so cacheable)."""

    def __init__(self, teacher: SegModel, table: EmbeddingTable, lexicon, enabled: bool = True):
        self.teacher = teacher
        self.table = table
        self.lexicon = lexicon
        self.enabled = enabled
        self._store: dict[int, list[PseudoLabel]] = {}

    def get(self, index: int, sample: CaptionedSample) -> list[PseudoLabel]:
        if self.enabled and index in self._store:
            return self._store[index]
        labels = generate_pseudo_labels(self.teacher, sample, self.table, self.lexicon)
        if self.enabled:
            self._store[index] = labels
        return labels


def resolve_eta(
    cfg: RunConfig,
    teacher: SegModel,
    vocab: Vocabulary,
    table: EmbeddingTable,
    caption_data: Sequence[CaptionedSample],
) -> float:
    """Config override when positive, offline calibration otherwise.

    The calibration pass runs the caption losses on a subset for (by
    default) the student's own schedule length, so the minimum mean noise
    it records reflects the state real training will reach; a much shorter
    pass would freeze eta at an early, still-high noise level and inflate
    every alpha later on.
    """
    if cfg.eta > 0:
        return cfg.eta
    subset = list(caption_data[: cfg.eta_calibration_images])
    steps = cfg.eta_calibration_steps or cfg.student_iterations
    return calibrate_eta(
        teacher, subset, vocab, table,
        steps=steps,
        batch_size=cfg.caption_batch_size,
        lr=cfg.student_lr,
        momentum=cfg.momentum,
        seed=cfg.seed,
        mc_samples=cfg.mc_samples,
    )


def train_student(
    cfg: RunConfig,
    teacher: SegModel,
    vocab: Vocabulary,
    table: EmbeddingTable,
    base_data: Sequence[MaskedSample],
    caption_data: Sequence[CaptionedSample],
    eta: float | None = None,
    start_model: SegModel | None = None,
    start_iteration: int = 0,
    momentum_buffers: dict[str, np.ndarray] | None = None,
    log_fn: Callable[[dict], None] | None = None,
) -> tuple[SegModel, dict[str, np.ndarray], float]:
    """Self-train a student from a frozen teacher; returns (model, momentum, eta).

    The student is initialized as a copy of the teacher.  Pseudo labels are
    regenerated (or served from the pure-function cache) from the teacher
    only; the teacher's parameters never change.
    """
    if not caption_data:
        raise DataError("student training requires a nonempty caption dataset")
    if not base_data:
        raise DataError("student training requires a nonempty base dataset")
    variant = variant_factory(cfg.strategy)
    teacher.requires_grad_(False)

    student = start_model if start_model is not None else clone_model(teacher)
    if variant.skip_training:
        return student, {}, 0.0

    if eta is None:
        eta = resolve_eta(cfg, teacher, vocab, table, caption_data)
    noise_cfg = NoiseConfig(eta=eta, mc_samples=cfg.mc_samples, seed=cfg.seed)
    loss_cfg = LossConfig(bg_weight=cfg.bg_weight, normalize_mask_loss=cfg.normalize_mask_loss)
    alpha_fn = None
    if variant.alpha_strategy is not None:
        alpha_fn = make_alpha_fn(variant.alpha_strategy, vocab.caption_classes, table, seed=cfg.seed)

    opt = torch.optim.SGD(student.parameters(), lr=cfg.student_lr, momentum=cfg.momentum)
    if momentum_buffers:
        _restore_momentum(student, opt, momentum_buffers)
    cache = PseudoLabelCache(teacher, table, vocab.object_lexicon, enabled=cfg.cache_pseudo_labels)

    for step in range(start_iteration, cfg.student_iterations):
        if cfg.lr_decay_step and step >= cfg.lr_decay_step:
            for group in opt.param_groups:
                group["lr"] = cfg.student_lr * 0.1
        cap_idx = torch.randint(
            0, len(caption_data), (cfg.caption_batch_size,),
            generator=stream_generator(cfg.seed, "student-caption", step),
        ).tolist()
        base_idx = torch.randint(
            0, len(base_data), (cfg.base_batch_size,),
            generator=stream_generator(cfg.seed, "student-base", step),
        ).tolist()
        jitter_g = stream_generator(cfg.seed, "student-jitter", step)

        caption_batch = [(caption_data[i], cache.get(i, caption_data[i])) for i in cap_idx]
        base_batch = []
        for i in base_idx:
            sample = base_data[i]
            proposals = propose_regions(
                *sample.image.shape[:2], "train",
                gt_boxes=[ann.box for ann in sample.annotations],
                cfg=student.cfg.proposals, generator=jitter_g,
            )
            base_batch.append((sample, proposals))

        opt.zero_grad()
        breakdown = total_student_objective(
            student, caption_batch, base_batch, vocab, table,
            noise_cfg, loss_cfg, variant.loss_cfg,
            generator=stream_generator(cfg.seed, "student-noise", step),
            alpha_fn=alpha_fn,
        )
        _check_finite(float(breakdown.total.detach()), step, "student")
        breakdown.total.backward()
        opt.step()
        if log_fn is not None:
            alphas = list(breakdown.per_object_alpha.values())
            log_fn({
                "iteration": step,
                "l_gt": breakdown.l_gt,
                "l_x": breakdown.l_x,
                "l_m": breakdown.l_m,
                "l_x_alpha": breakdown.l_x_alpha,
                "mean_alpha": float(np.mean(alphas)) if alphas else 0.0,
                "min_alpha": float(np.min(alphas)) if alphas else 0.0,
                "max_alpha": float(np.max(alphas)) if alphas else 0.0,
            })
    return student, _momentum_buffers(student, opt), eta
