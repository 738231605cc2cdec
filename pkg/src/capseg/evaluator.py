"""Instance-segmentation evaluation: mask IoU, greedy AP, protocol mAP.

Matching is COCO-style: detections sorted by descending confidence each
claim the unmatched ground truth of highest IoU >= 0.5; AP is the area
under the all-point-interpolated precision-recall curve.  The constrained
protocols score a single class group on its pure subset; the generalized
protocol predicts over base plus target classes jointly on mixed scenes.

Also hosts the alternative reliability estimators compared against the
noise head (class score, pixel score, dropout entropy).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .errors import ConfigError, DataError
from .model_core import (
    SegModel,
    extract_region_features,
    propose_regions,
    regions_to_array,
    stream_generator,
)
from .losses import CaptionForward
from .pseudo_labeler import PseudoLabel
from .semantic_space import EmbeddingTable, Vocabulary
from .synthetic_world import CaptionedSample, MaskedSample, tight_box

PROTOCOLS = ("constrained_base", "constrained_target", "generalized")

DETECTIONS_PER_IMAGE = 100


@dataclass
class Detection:
    class_name: str
    confidence: float
    mask: np.ndarray  # image-space bool

    def __post_init__(self):
        if not math.isfinite(self.confidence):
            raise ValueError("non-finite detection confidence")
        if not self.mask.any():
            raise ValueError("empty detection mask")


@dataclass
class EvalReport:
    protocol: str
    per_class_ap: dict[str, float]
    map_base: float | None
    map_target: float | None
    map_all: float
    n_images: int
    n_instances: int
    pr_curves: dict[str, tuple[list[float], list[float]]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "per_class_ap": dict(sorted(self.per_class_ap.items())),
            "map_base": self.map_base,
            "map_target": self.map_target,
            "map_all": self.map_all,
            "n_images": self.n_images,
            "n_instances": self.n_instances,
        }


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """|a∩b| / |a∪b| for same-shape binary masks; 0 when the union is empty."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shape mismatch: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def average_precision(
    dets: Sequence[tuple[int, float, np.ndarray]],
    gts: Sequence[tuple[int, np.ndarray]],
    iou_thr: float = 0.5,
) -> tuple[float, list[float], list[float]]:
    """AP for one class over a set of images.

    ``dets`` are (image_id, confidence, mask) triples; ``gts`` are
    (image_id, mask).  Returns (ap, recalls, precisions) where the curves
    are the raw cumulative points before interpolation.  Ties in
    confidence keep input order (stable sort).
    """
    n_gt = len(gts)
    if n_gt == 0:
        return 0.0, [], []
    order = sorted(range(len(dets)), key=lambda i: -dets[i][1])
    gt_by_image: dict[int, list[int]] = {}
    for j, (img, _) in enumerate(gts):
        gt_by_image.setdefault(img, []).append(j)
    matched = [False] * n_gt

    tp = np.zeros(len(dets))
    for rank, i in enumerate(order):
        img, _, mask = dets[i]
        best_iou, best_j = 0.0, -1
        for j in gt_by_image.get(img, []):
            if matched[j]:
                continue
            iou = mask_iou(mask, gts[j][1])
            if iou >= iou_thr and iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0:
            matched[best_j] = True
            tp[rank] = 1.0

    cum_tp = np.cumsum(tp)
    ranks = np.arange(1, len(dets) + 1)
    recalls = cum_tp / n_gt
    precisions = cum_tp / ranks

    # monotone envelope from the right, then sum recall increments
    env = precisions.copy()
    for i in range(len(env) - 2, -1, -1):
        env[i] = max(env[i], env[i + 1])
    ap = 0.0
    prev_r = 0.0
    for i in range(len(env)):
        if recalls[i] > prev_r:
            ap += (recalls[i] - prev_r) * env[i]
            prev_r = recalls[i]
    return float(ap), recalls.tolist(), precisions.tolist()


def paste_mask(mask: np.ndarray, box: tuple[float, float, float, float], height: int, width: int) -> np.ndarray:
    """Nearest-neighbor paste of an M×M binary mask into its image-space box."""
    x0, y0, x1, y1 = box
    m = mask.shape[0]
    out = np.zeros((height, width), dtype=bool)
    js = np.arange(max(0, int(math.floor(x0))), min(width, int(math.ceil(x1))))
    is_ = np.arange(max(0, int(math.floor(y0))), min(height, int(math.ceil(y1))))
    if js.size == 0 or is_.size == 0:
        return out
    sx = np.clip(((js + 0.5 - x0) * m / (x1 - x0)).astype(np.int64), 0, m - 1)
    sy = np.clip(((is_ + 0.5 - y0) * m / (y1 - y0)).astype(np.int64), 0, m - 1)
    inside_x = (js + 0.5 >= x0) & (js + 0.5 < x1)
    inside_y = (is_ + 0.5 >= y0) & (is_ + 0.5 < y1)
    patch = mask.astype(bool)[np.ix_(sy, sx)]
    patch &= inside_y[:, None] & inside_x[None, :]
    out[np.ix_(is_, js)] = patch
    return out


def run_inference(
    model: SegModel,
    image: np.ndarray,
    label_space: Sequence[str],
    table: EmbeddingTable,
    cap: int = DETECTIONS_PER_IMAGE,
) -> list[Detection]:
    """Grid proposals -> embedding argmax over the label space -> pasted masks.

    A proposal becomes a detection when its best class score exceeds the
    background score of 0; the top ``cap`` by confidence keep their masks.
    Detections whose pasted mask is empty are dropped.
    """
    h, w = image.shape[:2]
    proposals = propose_regions(h, w, "infer", cfg=model.cfg.proposals)
    boxes = regions_to_array(proposals)
    with torch.no_grad():
        feats = model.backbone_single(image)
        region_feats = extract_region_features(feats, boxes, model.cfg.roi_size, model.cfg.backbone_stride)
        emb = model.embed(region_feats).numpy()
    scores = emb @ table.matrix(list(label_space)).T  # (N, |space|)
    best_idx = scores.argmax(axis=1)
    best_score = scores[np.arange(len(proposals)), best_idx]
    keep = np.flatnonzero(best_score > 0.0)
    if keep.size == 0:
        return []
    # stable sort by descending confidence, proposal index breaks ties
    keep = keep[np.argsort(-best_score[keep], kind="stable")][:cap]
    with torch.no_grad():
        mask_logits = model.mask_logits(region_feats[keep]).numpy()
    detections = []
    for row, i in enumerate(keep):
        binary = mask_logits[row] >= 0
        pasted = paste_mask(binary, proposals[i].as_tuple(), h, w)
        if not pasted.any():
            continue
        detections.append(
            Detection(class_name=label_space[best_idx[i]], confidence=float(best_score[i]), mask=pasted)
        )
    return detections


_PROTOCOL_SUBSET = {
    "constrained_base": "pure_base",
    "constrained_target": "pure_target",
    "generalized": "mixed",
}


def protocol_label_space(protocol: str, vocab: Vocabulary) -> tuple[str, ...]:
    if protocol == "constrained_base":
        return vocab.base_classes
    if protocol == "constrained_target":
        return vocab.target_classes
    if protocol == "generalized":
        return vocab.base_classes + vocab.target_classes
    raise ConfigError(f"unknown protocol {protocol!r} (choose from {PROTOCOLS})")


def evaluate(
    model: SegModel,
    test_set: Sequence[MaskedSample],
    protocol: str,
    vocab: Vocabulary,
    table: EmbeddingTable,
    use_boxes: bool = False,
    detections_fn=None,
) -> EvalReport:
    """Per-class AP and group mAPs for one protocol.

    ``use_boxes`` switches matching to tight boxes of masks (detection-style
    mAP); ``detections_fn(image) -> list[Detection]`` substitutes the model
    inference path, e.g. for oracle test doubles.
    """
    label_space = protocol_label_space(protocol, vocab)
    subset_tag = _PROTOCOL_SUBSET[protocol]
    subset = [s for s in test_set if s.subset == subset_tag]
    if not subset:
        raise DataError(f"no test images tagged {subset_tag!r} for protocol {protocol}")

    per_class_dets: dict[str, list[tuple[int, float, np.ndarray]]] = {c: [] for c in label_space}
    per_class_gts: dict[str, list[tuple[int, np.ndarray]]] = {c: [] for c in label_space}
    n_instances = 0
    for img_id, sample in enumerate(subset):
        if detections_fn is not None:
            dets = detections_fn(sample.image)
        else:
            dets = run_inference(model, sample.image, label_space, table)
        for det in dets:
            mask = det.mask
            if use_boxes:
                mask = _box_mask(det.mask)
            per_class_dets[det.class_name].append((img_id, det.confidence, mask))
        for ann in sample.annotations:
            if ann.label in per_class_gts:
                mask = _box_mask(ann.mask) if use_boxes else ann.mask
                per_class_gts[ann.label].append((img_id, mask))
                n_instances += 1

    per_class_ap = {}
    pr_curves = {}
    for cls in label_space:
        ap, recalls, precisions = average_precision(per_class_dets[cls], per_class_gts[cls])
        per_class_ap[cls] = ap
        pr_curves[cls] = (recalls, precisions)

    base_set = set(vocab.base_classes)
    target_set = set(vocab.target_classes)
    base_aps = [per_class_ap[c] for c in label_space if c in base_set]
    target_aps = [per_class_ap[c] for c in label_space if c in target_set]
    return EvalReport(
        protocol=protocol,
        per_class_ap=per_class_ap,
        map_base=float(np.mean(base_aps)) if base_aps else None,
        map_target=float(np.mean(target_aps)) if target_aps else None,
        map_all=float(np.mean(list(per_class_ap.values()))),
        n_images=len(subset),
        n_instances=n_instances,
        pr_curves=pr_curves,
    )


def _box_mask(mask: np.ndarray) -> np.ndarray:
    x0, y0, x1, y1 = tight_box(mask)
    out = np.zeros_like(mask, dtype=bool)
    out[y0:y1, x0:x1] = True
    return out


# ---------------------------------------------------------------------------
# alternative reliability strategies (ablation against the noise head)

ALT_STRATEGIES = ("class_score", "pixel_score", "dropout_entropy")

DROPOUT_PASSES = 8
DROPOUT_RATE = 0.1


def alt_reliability(
    strategy: str,
    model: SegModel,
    sample: CaptionedSample,
    label: PseudoLabel,
    caption_classes: Sequence[str],
    table: EmbeddingTable,
    generator: torch.Generator | None = None,
    dropout_rate: float = DROPOUT_RATE,
) -> float:
    """Reliability weight from prediction confidence instead of learned noise.

    class_score: softmax probability of the object over caption classes.
    pixel_score: mean over pixels of max(p, 1-p) of the mask probability.
    dropout_entropy: 1 - H/H_max where H is the entropy of the mean class
    distribution (one-hot argmax votes) over 8 dropout passes on the
    embedding-head input; identical passes (rate 0) give H = 0, alpha = 1.
    """
    if strategy not in ALT_STRATEGIES:
        raise ConfigError(f"unknown reliability strategy {strategy!r}")
    with torch.no_grad():
        feats = model.backbone_single(sample.image)
        region = extract_region_features(
            feats, regions_to_array([label.region]), model.cfg.roi_size, model.cfg.backbone_stride
        )
        if strategy == "class_score":
            scores = model.embed(region).numpy()[0] @ table.matrix(list(caption_classes)).T
            probs = _softmax(scores)
            return float(probs[list(caption_classes).index(label.object)])
        if strategy == "pixel_score":
            p = torch.sigmoid(model.mask_logits(region))[0].numpy()
            return float(np.maximum(p, 1.0 - p).mean())
        if generator is None:
            generator = stream_generator(0, "dropout-entropy")
        votes = np.zeros(len(caption_classes))
        class_matrix = table.matrix(list(caption_classes))
        for _ in range(DROPOUT_PASSES):
            keep = (torch.rand(region.shape, generator=generator, dtype=region.dtype) >= dropout_rate)
            dropped = region * keep / (1.0 - dropout_rate)
            scores = model.embed(dropped).numpy()[0] @ class_matrix.T
            votes[int(np.argmax(scores))] += 1.0
        dist = votes / votes.sum()
        h = float(-(dist[dist > 0] * np.log(dist[dist > 0])).sum())
        return 1.0 - h / math.log(len(caption_classes))


def make_alpha_fn(
    strategy: str,
    caption_classes: Sequence[str],
    table: EmbeddingTable,
    seed: int = 0,
):
    """Closure adapting alt_reliability to the objective's alpha_fn slot."""
    counter = {"calls": 0}

    def fn(model: SegModel, sample: CaptionedSample, fwd: CaptionForward) -> list[float]:
        counter["calls"] += 1
        g = stream_generator(seed, "alt-alpha", counter["calls"])
        return [
            alt_reliability(strategy, model, sample, lab, caption_classes, table, generator=g)
            for lab in fwd.labels
        ]

    return fn


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max()
    e = np.exp(z)
    return e / e.sum()
