"""Training objectives for teacher and robust student.

The student objective combines, per caption sample, a noise-corrupted
pixel loss on pseudo masks and a reliability-reweighted cross-modal loss,
plus the ground-truth loss on base samples:

    total = sum_captions [ L_M + L_X^alpha ] + sum_base L_GT

Noise is modeled per pixel as a Gaussian whose variance the noise head
predicts from region features; sampling uses sqrt(variance) * z with
z ~ N(0,1) so gradients reach both mask and noise heads.  The reliability
weight alpha = eta / mean(noise) is detached: no gradient ever flows into
the noise head through the reweighted cross-modal term (optimizing it
there would collapse to predicting high noise everywhere).

Batch entry points stack images into one backbone call and concatenate
regions into one pass per head; per-sample reductions keep the result
equal to the sum of single-sample losses.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DataError
from .model_core import (
    DTYPE,
    SegModel,
    box_iou_matrix,
    clone_model,
    extract_region_features,
    regions_to_array,
    stream_generator,
)
from .pseudo_labeler import PseudoLabel, generate_pseudo_labels
from .semantic_space import EmbeddingTable, Vocabulary
from .synthetic_world import CaptionedSample, MaskedSample

# reference operating point for the reliability scale; calibration
# (smallest mean noise over a warm pass) replaces it per run
REFERENCE_ETA = 0.01


@dataclass(frozen=True)
class NoiseConfig:
    """Noise-model knobs: reference level eta, MC samples, draw seed."""

    eta: float = REFERENCE_ETA
    mc_samples: int = 1
    seed: int = 0
    variance_cap: float | None = None  # test hook: clamp variances from above

    def __post_init__(self):
        if not self.eta > 0:
            raise ConfigError(f"eta must be positive, got {self.eta}")
        if self.mc_samples < 1:
            raise ConfigError("mc_samples must be >= 1")


@dataclass(frozen=True)
class LossConfig:
    bg_weight: float = 0.2  # background classification downweight
    iou_fg: float = 0.5
    iou_bg: float = 0.3
    max_fg: int = 16  # per-image proposal subsample caps
    max_bg: int = 32
    normalize_mask_loss: bool = True  # divide pixel sums by M*M


@dataclass
class LossBreakdown:
    l_gt: float
    l_x: float
    l_m: float
    l_x_alpha: float
    total: torch.Tensor
    per_object_alpha: dict[tuple[int, str], float] = field(default_factory=dict)
    per_object_mean_noise: dict[tuple[int, str], float] = field(default_factory=dict)


@dataclass
class CaptionForward:
    """Student tensors for one captioned sample's pseudo labels."""

    labels: list[PseudoLabel]
    region_features: torch.Tensor  # (K, C, S, S)
    embeddings: torch.Tensor  # (K, d)
    mask_logits: torch.Tensor  # (K, M, M)
    noise_variance: torch.Tensor  # (K, M, M)


def caption_batch_forward(
    model: SegModel,
    batch: Sequence[tuple[CaptionedSample, Sequence[PseudoLabel]]],
) -> list[CaptionForward | None]:
    """One backbone/head pass covering every pseudo label in the batch.

    Entries with no labels come back as None.
    """
    active = [(i, sample, list(labels)) for i, (sample, labels) in enumerate(batch) if labels]
    out: list[CaptionForward | None] = [None] * len(batch)
    if not active:
        return out
    images = np.stack([sample.image for _, sample, _ in active])
    tensor = torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).to(DTYPE)
    feats = model.backbone(tensor)
    boxes = np.concatenate([
        regions_to_array([lab.region for lab in labels]) for _, _, labels in active
    ])
    batch_idx = np.concatenate([
        np.full(len(labels), row, dtype=np.int64) for row, (_, _, labels) in enumerate(active)
    ])
    region_feats = extract_region_features(
        feats, boxes, model.cfg.roi_size, model.cfg.backbone_stride, batch_idx=batch_idx
    )
    emb = model.embed(region_feats)
    mask = model.mask_logits(region_feats)
    noise = model.noise_variance(region_feats)
    offset = 0
    for i, _, labels in active:
        k = len(labels)
        sl = slice(offset, offset + k)
        out[i] = CaptionForward(
            labels=labels,
            region_features=region_feats[sl],
            embeddings=emb[sl],
            mask_logits=mask[sl],
            noise_variance=noise[sl],
        )
        offset += k
    return out


def caption_forward(model: SegModel, image: np.ndarray, labels: Sequence[PseudoLabel]) -> CaptionForward:
    sample = CaptionedSample(image=image, tokens=("_",))
    fwd = caption_batch_forward(model, [(sample, list(labels))])[0]
    assert fwd is not None
    return fwd


# ---------------------------------------------------------------------------
# ground-truth loss on base samples

def match_proposals(
    proposals_boxes: np.ndarray, gt_boxes: np.ndarray, cfg: LossConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """IoU matching: returns (fg indices, assigned gt per fg, bg indices)."""
    iou = box_iou_matrix(proposals_boxes, gt_boxes)
    best_gt = iou.argmax(axis=1)
    best_iou = iou.max(axis=1)
    fg = np.flatnonzero(best_iou >= cfg.iou_fg)
    bg = np.flatnonzero(best_iou < cfg.iou_bg)
    return fg, best_gt[fg], bg


def _select_proposals(sample, proposals, cfg: LossConfig, generator: torch.Generator):
    """Match, subsample, and package one sample's proposal selection."""
    prop_boxes = regions_to_array(proposals)
    gt_boxes = np.array([ann.box for ann in sample.annotations], dtype=np.float64)
    fg, fg_gt, bg = match_proposals(prop_boxes, gt_boxes, cfg)
    if len(fg) > cfg.max_fg:
        keep = torch.randperm(len(fg), generator=generator)[: cfg.max_fg].numpy()
        keep.sort()
        fg, fg_gt = fg[keep], fg_gt[keep]
    if len(bg) > cfg.max_bg:
        keep = torch.randperm(len(bg), generator=generator)[: cfg.max_bg].numpy()
        keep.sort()
        bg = bg[keep]
    selected = np.concatenate([fg, bg]).astype(np.int64)
    if selected.size == 0:
        raise DataError("no proposals matched as foreground or background")
    return prop_boxes, selected, fg, fg_gt


def gt_batch_loss(
    model: SegModel,
    batch: Sequence[tuple[MaskedSample, Sequence]],
    vocab: Vocabulary,
    table: EmbeddingTable,
    cfg: LossConfig = LossConfig(),
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Sum over the batch of per-sample ground-truth losses.

    Per sample: classification is softmax cross-entropy over base-class
    scores plus an appended background score of exactly 0, background
    terms weighted ``bg_weight``, reduced as the mean of weighted
    per-proposal losses; the mask term is mean per-pixel BCE between mask
    logits and the GT mask resampled to the prediction grid, foreground
    proposals only.  Equal-weight sum of both terms.
    """
    if not batch:
        return torch.zeros((), dtype=DTYPE)
    for sample, _ in batch:
        if not sample.annotations:
            raise DataError("sample with no annotations")
    if generator is None:
        generator = stream_generator(0, "loss-gt")

    base_classes = vocab.base_classes
    name_to_idx = {c: i for i, c in enumerate(base_classes)}

    images = np.stack([sample.image for sample, _ in batch])
    feats = model.backbone(torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).to(DTYPE))

    selections = [_select_proposals(sample, proposals, cfg, generator) for sample, proposals in batch]
    all_boxes = np.concatenate([boxes[sel] for boxes, sel, _, _ in selections])
    batch_idx = np.concatenate([
        np.full(len(sel), row, dtype=np.int64) for row, (_, sel, _, _) in enumerate(selections)
    ])
    region_feats = extract_region_features(
        feats, all_boxes, model.cfg.roi_size, model.cfg.backbone_stride, batch_idx=batch_idx
    )
    emb = model.embed(region_feats)
    class_matrix = torch.from_numpy(table.matrix(base_classes))
    logits = torch.cat([emb @ class_matrix.T, torch.zeros(emb.shape[0], 1, dtype=DTYPE)], dim=1)

    # foreground rows of region_feats, batch-major, for one mask-head call
    fg_rows = []
    offset = 0
    for _, sel, fg, _ in selections:
        fg_rows.extend(range(offset, offset + len(fg)))
        offset += len(sel)
    mask_logits = model.mask_logits(region_feats[fg_rows]) if fg_rows else None

    total = torch.zeros((), dtype=DTYPE)
    offset = 0
    fg_offset = 0
    m = model.cfg.mask_size
    for row, ((sample, _), (prop_boxes, sel, fg, fg_gt)) in enumerate(zip(batch, selections)):
        targets = torch.full((len(sel),), len(base_classes), dtype=torch.long)
        for k, gt_idx in enumerate(fg_gt):
            targets[k] = name_to_idx[sample.annotations[int(gt_idx)].label]
        weights = torch.full((len(sel),), cfg.bg_weight, dtype=DTYPE)
        weights[: len(fg)] = 1.0
        ce = F.cross_entropy(logits[offset: offset + len(sel)], targets, reduction="none")
        total = total + (weights * ce).mean()

        if len(fg):
            gt_stack = torch.from_numpy(
                np.stack([ann.mask for ann in sample.annotations]).astype(np.float64)
            )
            resampled = extract_region_features(gt_stack, prop_boxes[fg], m, 1.0)
            target_px = torch.stack([
                (resampled[k, int(gt_idx)] >= 0.5).to(DTYPE) for k, gt_idx in enumerate(fg_gt)
            ])
            pred = mask_logits[fg_offset: fg_offset + len(fg)]
            total = total + F.binary_cross_entropy_with_logits(pred, target_px, reduction="mean")
            fg_offset += len(fg)
        offset += len(sel)
    return total


def loss_gt(
    model: SegModel,
    sample: MaskedSample,
    proposals,
    vocab: Vocabulary,
    table: EmbeddingTable,
    cfg: LossConfig = LossConfig(),
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Ground-truth loss for one sample (see :func:`gt_batch_loss`)."""
    return gt_batch_loss(model, [(sample, proposals)], vocab, table, cfg, generator)


# ---------------------------------------------------------------------------
# caption losses

def _xmodal_per_object(fwd: CaptionForward, caption_classes: Sequence[str], table: EmbeddingTable) -> torch.Tensor:
    """Per-object -log softmax of the true word over all caption classes.

    Normalization runs over V_C only; the background embedding is excluded.
    """
    for lab in fwd.labels:
        if lab.object not in caption_classes:
            raise ValueError(f"pseudo-label object {lab.object!r} not a caption class")
    class_matrix = torch.from_numpy(table.matrix(list(caption_classes)))
    scores = fwd.embeddings @ class_matrix.T  # (K, |V_C|)
    idx = {c: i for i, c in enumerate(caption_classes)}
    targets = torch.tensor([idx[lab.object] for lab in fwd.labels], dtype=torch.long)
    return F.cross_entropy(scores, targets, reduction="none")


def _mask_targets(fwd: CaptionForward) -> torch.Tensor:
    return torch.from_numpy(np.stack([lab.mask for lab in fwd.labels]).astype(np.float64))


def _pixel_norm(fwd: CaptionForward, cfg: LossConfig) -> float:
    m = fwd.mask_logits.shape[-1]
    return float(m * m) if cfg.normalize_mask_loss else 1.0


def _capped_variance(fwd: CaptionForward, noise_cfg: NoiseConfig) -> torch.Tensor:
    var = fwd.noise_variance
    assert bool((var.detach() > 0).all()), "noise head produced non-positive variance"
    if noise_cfg.variance_cap is not None:
        var = var.clamp(max=noise_cfg.variance_cap)
    return var


def loss_cross_modal(
    model: SegModel,
    sample: CaptionedSample,
    labels: Sequence[PseudoLabel],
    caption_classes: Sequence[str],
    table: EmbeddingTable,
) -> torch.Tensor:
    """Sum over objects of -log softmax_o over caption-class scores."""
    if not labels:
        return torch.zeros((), dtype=DTYPE)
    fwd = caption_forward(model, sample.image, labels)
    return _xmodal_per_object(fwd, caption_classes, table).sum()


def loss_mask_naive(
    model: SegModel,
    sample: CaptionedSample,
    labels: Sequence[PseudoLabel],
    cfg: LossConfig = LossConfig(),
) -> torch.Tensor:
    """Pixelwise BCE against the exact pseudo masks, summed over objects."""
    if not labels:
        return torch.zeros((), dtype=DTYPE)
    fwd = caption_forward(model, sample.image, labels)
    return _mask_naive_from_forward(fwd, cfg)


def _mask_naive_from_forward(fwd: CaptionForward, cfg: LossConfig) -> torch.Tensor:
    bce = F.binary_cross_entropy_with_logits(fwd.mask_logits, _mask_targets(fwd), reduction="none")
    return bce.sum() / _pixel_norm(fwd, cfg)


def loss_mask_noisy(
    model: SegModel,
    sample: CaptionedSample,
    labels: Sequence[PseudoLabel],
    noise_cfg: NoiseConfig,
    generator: torch.Generator,
    cfg: LossConfig = LossConfig(),
) -> torch.Tensor:
    """BCE against pseudo masks with logits corrupted by reparameterized noise.

    Per object, ``mc_samples`` standard-normal grids are drawn in label
    order from ``generator`` and epsilon = sqrt(variance) * z perturbs the
    logits, so gradients flow to the mask head and the noise head.  Each
    pixel contributes the BCE of its Monte-Carlo-averaged probability
    (-log mean_k p_k); with one draw this is exactly the BCE of the single
    corrupted logit.  Averaging probabilities rather than losses is what
    lets predicted variance absorb conflicting supervision: extra noise
    raises the expected probability of a mislabeled pixel but lowers it
    for a well-fit one, so unlearnable pseudo masks drive variance up
    instead of down.
    """
    if not labels:
        return torch.zeros((), dtype=DTYPE)
    fwd = caption_forward(model, sample.image, labels)
    return _mask_noisy_from_forward(fwd, noise_cfg, generator, cfg)


def _mask_noisy_from_forward(
    fwd: CaptionForward, noise_cfg: NoiseConfig, generator: torch.Generator, cfg: LossConfig
) -> torch.Tensor:
    var = _capped_variance(fwd, noise_cfg)
    targets = _mask_targets(fwd)
    n, m = fwd.mask_logits.shape[0], fwd.mask_logits.shape[-1]
    # one label-major draw: identical stream to per-label (K, M, M) draws
    z = torch.randn((n, noise_cfg.mc_samples, m, m), generator=generator, dtype=DTYPE)
    noisy = fwd.mask_logits.unsqueeze(1) + torch.sqrt(var).unsqueeze(1) * z
    sign = (2.0 * targets - 1.0).unsqueeze(1)  # probability assigned to the mask value
    p = torch.sigmoid(sign * noisy).mean(dim=1)
    return -torch.log(p.clamp(min=1e-300)).sum() / _pixel_norm(fwd, cfg)


def reliability(noise_map: np.ndarray | torch.Tensor, noise_cfg: NoiseConfig) -> float:
    """alpha = eta / mean pixel noise; detached scalar, never clamped above 1.

    The mean runs over the prediction-grid pixels the noise map lives on.
    """
    if isinstance(noise_map, torch.Tensor):
        noise_map = noise_map.detach().numpy()
    noise_map = np.asarray(noise_map, dtype=np.float64)
    if not np.all(noise_map > 0):
        raise ValueError("noise map must be strictly positive")
    return float(noise_cfg.eta / noise_map.mean())


AlphaFn = Callable[[SegModel, CaptionedSample, CaptionForward], list[float]]


def noise_alphas(fwd: CaptionForward, noise_cfg: NoiseConfig) -> list[float]:
    """Reliability per pseudo label from the model's own noise head (detached)."""
    var = _capped_variance(fwd, noise_cfg).detach()
    return [reliability(var[k], noise_cfg) for k in range(len(fwd.labels))]


def loss_cross_modal_reweighted(
    model: SegModel,
    sample: CaptionedSample,
    labels: Sequence[PseudoLabel],
    caption_classes: Sequence[str],
    table: EmbeddingTable,
    noise_cfg: NoiseConfig,
    alphas: Sequence[float] | None = None,
) -> torch.Tensor:
    """Cross-modal loss with per-object terms scaled by detached alpha weights."""
    if not labels:
        return torch.zeros((), dtype=DTYPE)
    fwd = caption_forward(model, sample.image, labels)
    if alphas is None:
        alphas = noise_alphas(fwd, noise_cfg)
    per_object = _xmodal_per_object(fwd, caption_classes, table)
    weights = torch.tensor(list(alphas), dtype=DTYPE)
    return (weights * per_object).sum()


# ---------------------------------------------------------------------------
# combined objective

@dataclass(frozen=True)
class StudentLossConfig:
    """Which caption-side terms are active and where alpha comes from."""

    use_xmodal: bool = True
    use_mask: bool = True
    noisy_mask: bool = True
    alpha_source: str = "noise"  # none | noise | external

    def __post_init__(self):
        if self.alpha_source not in ("none", "noise", "external"):
            raise ConfigError(f"unknown alpha source {self.alpha_source!r}")


def total_student_objective(
    model: SegModel,
    caption_batch: Sequence[tuple[CaptionedSample, Sequence[PseudoLabel]]],
    base_batch: Sequence[tuple[MaskedSample, Sequence]],
    vocab: Vocabulary,
    table: EmbeddingTable,
    noise_cfg: NoiseConfig,
    loss_cfg: LossConfig = LossConfig(),
    student_cfg: StudentLossConfig = StudentLossConfig(),
    generator: torch.Generator | None = None,
    alpha_fn: AlphaFn | None = None,
) -> LossBreakdown:
    """Sum of caption losses and ground-truth losses with a full breakdown.

    ``caption_batch`` pairs each sample with its (frozen-teacher) pseudo
    labels; ``base_batch`` pairs each masked sample with its proposals.
    ``alpha_fn`` supplies external reliability weights for the ablation
    strategies; with alpha_source="noise" the student's own noise head is
    used.  One batch may be empty, not both.
    """
    if not caption_batch and not base_batch:
        raise DataError("both caption and base batches are empty")
    if generator is None:
        generator = stream_generator(noise_cfg.seed, "noise-draws")

    caption_classes = vocab.caption_classes
    l_x = torch.zeros((), dtype=DTYPE)
    l_x_alpha = torch.zeros((), dtype=DTYPE)
    l_m = torch.zeros((), dtype=DTYPE)
    per_alpha: dict[tuple[int, str], float] = {}
    per_noise: dict[tuple[int, str], float] = {}

    forwards = caption_batch_forward(model, caption_batch) if caption_batch else []
    for i, fwd in enumerate(forwards):
        if fwd is None:
            continue
        sample, labels = caption_batch[i][0], fwd.labels
        var = _capped_variance(fwd, noise_cfg).detach()
        for k, lab in enumerate(labels):
            per_noise[(i, lab.object)] = float(var[k].mean())

        if student_cfg.alpha_source == "noise":
            alphas = noise_alphas(fwd, noise_cfg)
        elif student_cfg.alpha_source == "external":
            if alpha_fn is None:
                raise ConfigError("alpha_source='external' requires alpha_fn")
            alphas = [float(a) for a in alpha_fn(model, sample, fwd)]
        else:
            alphas = [1.0] * len(labels)
        for k, lab in enumerate(labels):
            lab.reliability = alphas[k]
            per_alpha[(i, lab.object)] = alphas[k]

        if student_cfg.use_xmodal:
            per_object = _xmodal_per_object(fwd, caption_classes, table)
            l_x = l_x + per_object.sum()
            l_x_alpha = l_x_alpha + (torch.tensor(alphas, dtype=DTYPE) * per_object).sum()
        if student_cfg.use_mask:
            if student_cfg.noisy_mask:
                l_m = l_m + _mask_noisy_from_forward(fwd, noise_cfg, generator, loss_cfg)
            else:
                l_m = l_m + _mask_naive_from_forward(fwd, loss_cfg)

    l_gt = gt_batch_loss(model, base_batch, vocab, table, loss_cfg, generator)

    total = l_gt.clone()
    if student_cfg.use_mask:
        total = total + l_m
    if student_cfg.use_xmodal:
        total = total + l_x_alpha
    return LossBreakdown(
        l_gt=float(l_gt.detach()),
        l_x=float(l_x.detach()),
        l_m=float(l_m.detach()),
        l_x_alpha=float(l_x_alpha.detach()),
        total=total,
        per_object_alpha=per_alpha,
        per_object_mean_noise=per_noise,
    )


def calibrate_eta(
    model: SegModel,
    caption_subset: Sequence[CaptionedSample],
    vocab: Vocabulary,
    table: EmbeddingTable,
    steps: int = 150,
    batch_size: int = 2,
    lr: float = 1e-3,
    momentum: float = 0.9,
    seed: int = 0,
    mc_samples: int = 4,
) -> float:
    """Smallest mean pixel noise observed while warm-training a clone.

    A copy of ``model`` runs a short pass of mask + cross-modal training on
    the subset (the original stays frozen and provides the pseudo labels);
    eta is the minimum per-label mean noise seen during the pass.
    """
    if not caption_subset:
        raise DataError("empty calibration subset")
    teacher = model
    student = clone_model(model)
    opt = torch.optim.SGD(student.parameters(), lr=lr, momentum=momentum)
    noise_cfg = NoiseConfig(eta=REFERENCE_ETA, mc_samples=mc_samples, seed=seed)
    caption_classes = vocab.caption_classes
    label_cache: dict[int, list[PseudoLabel]] = {}
    smallest = np.inf
    seen_any = False
    for step in range(steps):
        g = stream_generator(seed, "eta-batch", step)
        idx = torch.randint(0, len(caption_subset), (batch_size,), generator=g).tolist()
        for i in idx:
            if i not in label_cache:
                label_cache[i] = generate_pseudo_labels(
                    teacher, caption_subset[i], table, vocab.object_lexicon
                )
        batch = [(caption_subset[i], label_cache[i]) for i in idx]
        opt.zero_grad()
        loss = torch.zeros((), dtype=DTYPE)
        noise_g = stream_generator(seed, "eta-noise", step)
        for fwd in caption_batch_forward(student, batch):
            if fwd is None:
                continue
            var = fwd.noise_variance.detach()
            for k in range(len(fwd.labels)):
                smallest = min(smallest, float(var[k].mean()))
                seen_any = True
            loss = loss + _xmodal_per_object(fwd, caption_classes, table).sum()
            loss = loss + _mask_noisy_from_forward(fwd, noise_cfg, noise_g, LossConfig())
        if float(loss.detach()) != 0.0:
            loss.backward()
            opt.step()
    if not seen_any:
        raise DataError("calibration subset produced no pseudo labels")
    return float(smallest)
