"""Turn caption-image pairs plus a frozen teacher into pseudo labels.

For every object noun in a caption, the proposal maximizing the inner
product between the noun's word embedding and the teacher's region
embedding becomes the aligned region; the teacher's mask logits there,
binarized at logit >= 0, become the pseudo mask.  The argmax is
unconditional: no background thresholding, exactly one region per object
word.  Teacher inference never samples noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch

from .model_core import (
    Region,
    SegModel,
    extract_region_features,
    propose_regions,
    regions_to_array,
)
from .semantic_space import EmbeddingTable
from .synthetic_world import CaptionedSample, extract_object_nouns
from .io_formats import rle_encode


@dataclass
class PseudoLabel:
    """One caption word grounded to a region with a binarized teacher mask."""

    object: str
    region: Region
    mask: np.ndarray  # M×M, values {0,1}
    teacher_logits: np.ndarray  # M×M
    alignment_score: float
    reliability: float | None = None


def binarize(logits: np.ndarray) -> np.ndarray:
    """Pixel -> 1 iff logit >= 0 (the boundary case maps to 1), else 0."""
    logits = np.asarray(logits)
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    return (logits >= 0).astype(np.uint8)


def proposal_embeddings(
    model: SegModel,
    image: np.ndarray,
    proposals: Sequence[Region] | None = None,
) -> tuple[torch.Tensor, list[Region], torch.Tensor]:
    """Region features + embeddings for every proposal of an image.

    Returns (region features (N,C,S,S), proposals, (N, d) embeddings);
    runs without gradient tracking.
    """
    h, w = image.shape[:2]
    if proposals is None:
        proposals = propose_regions(h, w, "infer", cfg=model.cfg.proposals)
    if len(proposals) == 0:
        raise ValueError("empty proposal set")
    with torch.no_grad():
        feats = model.backbone_single(image)
        region_feats = extract_region_features(
            feats, regions_to_array(proposals), model.cfg.roi_size, model.cfg.backbone_stride
        )
        emb = model.embed(region_feats)
    return region_feats, list(proposals), emb


def align_objects(
    teacher: SegModel,
    image: np.ndarray,
    objects: Sequence[str],
    table: EmbeddingTable,
    proposals: Sequence[Region] | None = None,
) -> dict[str, tuple[Region, float]]:
    """Aligned region per object word: unconditional argmax of v_o . emb(f_r).

    Ties break toward the lowest proposal index; distinct objects may map
    to the same region.  An empty object list yields an empty map.
    """
    if len(objects) == 0:
        return {}
    _, proposals, emb = proposal_embeddings(teacher, image, proposals)
    scores = emb.numpy() @ table.matrix(list(objects)).T  # (N, K)
    out: dict[str, tuple[Region, float]] = {}
    for k, obj in enumerate(objects):
        idx = int(np.argmax(scores[:, k]))
        out[obj] = (proposals[idx], float(scores[idx, k]))
    return out


def generate_pseudo_labels(
    teacher: SegModel,
    sample: CaptionedSample,
    table: EmbeddingTable,
    lexicon: frozenset[str] | set[str],
) -> list[PseudoLabel]:
    """Object nouns -> aligned regions -> binarized teacher masks.

    Pure function of (teacher params, image, tokens, config); one label
    per object noun, in caption order.
    """
    objects = extract_object_nouns(sample.tokens, lexicon)
    if not objects:
        return []
    region_feats, proposals, emb = proposal_embeddings(teacher, sample.image)
    scores = emb.numpy() @ table.matrix(list(objects)).T
    best = [int(np.argmax(scores[:, k])) for k in range(len(objects))]
    with torch.no_grad():
        logits = teacher.mask_logits(region_feats[best]).numpy()
    labels = []
    for k, obj in enumerate(objects):
        labels.append(
            PseudoLabel(
                object=obj,
                region=proposals[best[k]],
                mask=binarize(logits[k]),
                teacher_logits=logits[k],
                alignment_score=float(scores[best[k], k]),
            )
        )
    return labels


def pseudo_label_record(
    sample_id: str,
    labels: Sequence[PseudoLabel],
    noise_maps: Mapping[str, np.ndarray] | None = None,
    alphas: Mapping[str, float] | None = None,
) -> dict:
    """JSON-serializable dump record for one sample (masks RLE-encoded)."""
    objects = []
    for lab in labels:
        entry = {
            "object": lab.object,
            "box": [float(v) for v in lab.region.as_tuple()],
            "alignment_score": lab.alignment_score,
            "mask_shape": list(lab.mask.shape),
            "mask_rle": rle_encode(lab.mask),
        }
        if noise_maps is not None and lab.object in noise_maps:
            noise = np.asarray(noise_maps[lab.object], dtype=np.float64)
            entry["mean_noise"] = float(noise.mean())
            entry["noise_map"] = [[round(float(v), 5) for v in row] for row in noise]
        if alphas is not None and lab.object in alphas:
            entry["alpha"] = float(alphas[lab.object])
        objects.append(entry)
    return {"id": sample_id, "objects": objects}
