"""Shared differentiable architecture for teacher and student.

One model owns a small strided-convolution backbone (stride 4), an
embedding head mapping region features into the word-embedding space, a
class-agnostic mask head, and a noise head predicting per-pixel variances.
Everything runs in float64 on CPU so analytic gradients can be checked
against central finite differences tightly.

Region proposals come from a deterministic multi-scale grid rather than a
learned network; in train mode, seeded jittered copies of ground-truth
boxes are appended.  The grid is a pure function of (image size, config),
so teacher and student always see the same proposals at inference.

Checkpoints are a UTF-8 JSON header line (entry names, shapes, model
config, seed, iteration) followed by a little-endian float64 payload laid
out in header order.  Optimizer momentum buffers ride along as
``momentum/<param>`` entries so an interrupted run resumes exactly.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DataError

DTYPE = torch.float64

CHECKPOINT_FORMAT = "capseg-checkpoint-v1"


def stable_hash(*parts) -> int:
    """Deterministic 63-bit hash of the given parts, stable across runs."""
    text = "/".join(str(p) for p in parts)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") & (2**63 - 1)


def stream_generator(seed: int, stream: str, step: int = 0) -> torch.Generator:
    """Fresh torch generator for one (seed, stream, step) triple.

    Per-step randomness is derived statelessly so resumed runs replay the
    exact same draws without serializing generator state.
    """
    g = torch.Generator()
    g.manual_seed(stable_hash(seed, stream, step))
    return g


@dataclass(frozen=True)
class Region:
    """Half-open pixel box: 0 <= x0 < x1 <= W, 0 <= y0 < y1 <= H."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate region {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0


def regions_to_array(regions: Sequence[Region]) -> np.ndarray:
    return np.array([r.as_tuple() for r in regions], dtype=np.float64).reshape(len(regions), 4)


def box_iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of two (N,4) / (M,4) half-open box arrays."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    ix0 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy0 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix1 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy1 = np.minimum(a[:, None, 3], b[None, :, 3])
    iw = np.clip(ix1 - ix0, 0.0, None)
    ih = np.clip(iy1 - iy0, 0.0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-300), 0.0)


@dataclass(frozen=True)
class ProposalConfig:
    """Multi-scale sliding grid: len(scales) x len(ratios) boxes per center."""

    scales: tuple[float, ...] = (12.0, 18.0, 26.0)
    ratios: tuple[float, ...] = (1.0, 2.0)
    stride: int = 8
    gt_jitter: float = 0.1
    jitters_per_gt: int = 4


_GRID_CACHE: dict[tuple, tuple[Region, ...]] = {}


def grid_count(height: int, width: int, cfg: ProposalConfig) -> int:
    ny = len(np.arange(cfg.stride / 2.0, height, cfg.stride))
    nx = len(np.arange(cfg.stride / 2.0, width, cfg.stride))
    return ny * nx * len(cfg.scales) * len(cfg.ratios)


def propose_regions(
    height: int,
    width: int,
    mode: str = "infer",
    gt_boxes: Sequence[tuple] | None = None,
    cfg: ProposalConfig = ProposalConfig(),
    generator: torch.Generator | None = None,
) -> list[Region]:
    """Deterministic grid proposals, plus jittered GT copies in train mode.

    Infer mode is a pure function of (image size, cfg); order is row-major
    over centers, then scales, then ratios.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown proposal mode {mode!r}")
    key = (height, width, cfg)
    if key not in _GRID_CACHE:
        boxes = []
        centers_y = np.arange(cfg.stride / 2.0, height, cfg.stride)
        centers_x = np.arange(cfg.stride / 2.0, width, cfg.stride)
        for cy in centers_y:
            for cx in centers_x:
                for scale in cfg.scales:
                    for ratio in cfg.ratios:
                        w = scale * math.sqrt(ratio)
                        h = scale / math.sqrt(ratio)
                        x0 = max(0.0, cx - w / 2.0)
                        y0 = max(0.0, cy - h / 2.0)
                        x1 = min(float(width), cx + w / 2.0)
                        y1 = min(float(height), cy + h / 2.0)
                        if x1 - x0 >= 1.0 and y1 - y0 >= 1.0:
                            boxes.append(Region(x0, y0, x1, y1))
        _GRID_CACHE[key] = tuple(boxes)
    regions = list(_GRID_CACHE[key])

    if mode == "train" and gt_boxes:
        if generator is None:
            generator = torch.Generator()
            generator.manual_seed(0)
        j = cfg.gt_jitter
        for box in gt_boxes:
            x0, y0, x1, y1 = (float(v) for v in box)
            w, h = x1 - x0, y1 - y0
            offsets = (torch.rand((cfg.jitters_per_gt, 4), generator=generator, dtype=DTYPE) * 2 - 1) * j
            for dx0, dy0, dx1, dy1 in offsets.tolist():
                nx0 = min(max(0.0, x0 + dx0 * w), width - 1.0)
                ny0 = min(max(0.0, y0 + dy0 * h), height - 1.0)
                nx1 = max(min(float(width), x1 + dx1 * w), nx0 + 1.0)
                ny1 = max(min(float(height), y1 + dy1 * h), ny0 + 1.0)
                regions.append(Region(nx0, ny0, nx1, ny1))
    return regions


def extract_region_features(
    features: torch.Tensor,
    boxes: np.ndarray,
    out_size: int,
    stride: float,
    batch_idx: np.ndarray | None = None,
) -> torch.Tensor:
    """Bilinear crop-and-resize of backbone features to (N, C, S, S).

    ``features`` is (C, Hf, Wf), or (B, C, Hf, Wf) with ``batch_idx``
    mapping each box to its feature map.  Sample points sit at the centers
    of an S x S grid inside each box (image coordinates); feature pixel
    (i, j) has its center at image coordinate ((j + 0.5) * stride,
    (i + 0.5) * stride).  Differentiable with respect to ``features``; box
    coordinates are constants.
    """
    if features.dim() == 3:
        features = features.unsqueeze(0)
        batch_idx = None
    elif features.dim() != 4:
        raise ValueError(f"expected (C, Hf, Wf) or (B, C, Hf, Wf) features, got {tuple(features.shape)}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if np.any(boxes[:, 2] - boxes[:, 0] <= 0) or np.any(boxes[:, 3] - boxes[:, 1] <= 0):
        raise ValueError("degenerate region after clipping")
    b, c, hf, wf = features.shape
    n = boxes.shape[0]
    s = out_size
    offsets = np.zeros(n, dtype=np.int64) if batch_idx is None else np.asarray(batch_idx, dtype=np.int64) * (hf * wf)

    steps = (np.arange(s, dtype=np.float64) + 0.5) / s
    ux = boxes[:, 0:1] + steps[None, :] * (boxes[:, 2:3] - boxes[:, 0:1])  # (N, S)
    uy = boxes[:, 1:2] + steps[None, :] * (boxes[:, 3:4] - boxes[:, 1:2])
    fx = np.clip(ux / stride - 0.5, 0.0, wf - 1.0)
    fy = np.clip(uy / stride - 0.5, 0.0, hf - 1.0)

    x0 = np.minimum(np.floor(fx), wf - 2).astype(np.int64) if wf > 1 else np.zeros_like(fx, dtype=np.int64)
    y0 = np.minimum(np.floor(fy), hf - 2).astype(np.int64) if hf > 1 else np.zeros_like(fy, dtype=np.int64)
    tx = torch.from_numpy(fx - x0)  # (N, S)
    ty = torch.from_numpy(fy - y0)

    # flat gather indices for the four corners, (N, S, S)
    y0g = y0[:, :, None] * wf + offsets[:, None, None]
    x0g = x0[:, None, :]
    idx00 = torch.from_numpy(y0g + x0g)
    idx01 = idx00 + (1 if wf > 1 else 0)
    idx10 = idx00 + (wf if hf > 1 else 0)
    idx11 = idx10 + (1 if wf > 1 else 0)

    flat = features.permute(1, 0, 2, 3).reshape(c, b * hf * wf)

    def gather(idx: torch.Tensor) -> torch.Tensor:
        return flat.index_select(1, idx.reshape(-1)).reshape(c, n, s, s)

    wy1 = ty[:, :, None]  # (N, S, 1)
    wy0 = 1.0 - wy1
    wx1 = tx[:, None, :]  # (N, 1, S)
    wx0 = 1.0 - wx1
    out = (
        gather(idx00) * (wy0 * wx0)
        + gather(idx01) * (wy0 * wx1)
        + gather(idx10) * (wy1 * wx0)
        + gather(idx11) * (wy1 * wx1)
    )
    return out.permute(1, 0, 2, 3)


def extract_region_feature(features: torch.Tensor, region: Region, out_size: int, stride: float) -> torch.Tensor:
    """Single-region convenience wrapper returning (C, S, S)."""
    return extract_region_features(features, regions_to_array([region]), out_size, stride)[0]


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    backbone_channels: tuple[int, int, int] = (8, 16, 24)
    backbone_stride: int = 4  # fixed by the two stride-2 convolutions
    embed_hidden: int = 64
    embed_dim: int = 24
    roi_size: int = 7
    mask_size: int = 28
    head_channels: int = 16
    proposals: ProposalConfig = field(default_factory=ProposalConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        d["proposals"]["scales"] = list(self.proposals.scales)
        d["proposals"]["ratios"] = list(self.proposals.ratios)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        p = dict(d.pop("proposals"))
        p["scales"] = tuple(p["scales"])
        p["ratios"] = tuple(p["ratios"])
        d["backbone_channels"] = tuple(d["backbone_channels"])
        return cls(proposals=ProposalConfig(**p), **d)


class SegModel(nn.Module):
    """Backbone + embedding head + class-agnostic mask head + noise head.

    Same shape serves as teacher and student; only the student exercises
    the noise head during training.  Activations are softplus throughout
    so every loss is smooth in the parameters.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c1, c2, c3 = cfg.backbone_channels
        self.conv1 = nn.Conv2d(3, c1, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(c2, c3, 3, stride=1, padding=1)
        flat = c3 * cfg.roi_size * cfg.roi_size
        self.embed_fc1 = nn.Linear(flat, cfg.embed_hidden)
        self.embed_fc2 = nn.Linear(cfg.embed_hidden, cfg.embed_dim)
        hc = cfg.head_channels
        self.mask_conv1 = nn.Conv2d(c3, hc, 3, padding=1)
        self.mask_conv2 = nn.Conv2d(hc, hc, 3, padding=1)
        self.mask_out = nn.Conv2d(hc, 1, 1)
        self.noise_conv1 = nn.Conv2d(c3, hc, 3, padding=1)
        self.noise_conv2 = nn.Conv2d(hc, hc, 3, padding=1)
        self.noise_out = nn.Conv2d(hc, 1, 1)
        self.double()

    @property
    def feature_channels(self) -> int:
        return self.cfg.backbone_channels[-1]

    def backbone(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) in [0,1] -> (B, C, H/4, W/4) features."""
        if not torch.isfinite(images).all():
            raise ValueError("non-finite image input")
        x = F.softplus(self.conv1(images))
        x = F.softplus(self.conv2(x))
        return F.softplus(self.conv3(x))

    def backbone_single(self, image: np.ndarray) -> torch.Tensor:
        """H×W×3 numpy image -> (C, Hf, Wf) features."""
        t = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).to(DTYPE)
        return self.backbone(t.unsqueeze(0))[0]

    def embed(self, region_features: torch.Tensor) -> torch.Tensor:
        """(N, C, S, S) -> (N, d) visual embeddings."""
        x = region_features.reshape(region_features.shape[0], -1)
        return self.embed_fc2(F.softplus(self.embed_fc1(x)))

    def _head(self, region_features: torch.Tensor, conv1, conv2, out) -> torch.Tensor:
        x = F.softplus(conv1(region_features))
        x = F.softplus(conv2(x))
        m = self.cfg.mask_size
        x = F.interpolate(x, size=(m, m), mode="bilinear", align_corners=False)
        return out(x)[:, 0]

    def mask_logits(self, region_features: torch.Tensor) -> torch.Tensor:
        """(N, C, S, S) -> (N, M, M) mask logits, class-agnostic."""
        return self._head(region_features, self.mask_conv1, self.mask_conv2, self.mask_out)

    def noise_variance(self, region_features: torch.Tensor) -> torch.Tensor:
        """(N, C, S, S) -> (N, M, M) strictly positive per-pixel variances."""
        raw = self._head(region_features, self.noise_conv1, self.noise_conv2, self.noise_out)
        return torch.exp(torch.clamp(raw, -12.0, 12.0))

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        """Named parameters bucketed by functional group."""
        groups: dict[str, list[tuple[str, nn.Parameter]]] = {
            "backbone": [], "embed_head": [], "mask_head": [], "noise_head": [],
        }
        for name, p in self.named_parameters():
            if name.startswith("conv"):
                groups["backbone"].append((name, p))
            elif name.startswith("embed"):
                groups["embed_head"].append((name, p))
            elif name.startswith("mask"):
                groups["mask_head"].append((name, p))
            else:
                groups["noise_head"].append((name, p))
        return groups


def init_parameters(model: SegModel, generator: torch.Generator) -> None:
    """Seeded fan-in uniform init; biases zero.  Order fixed by registration.

    The noise head's output bias starts at -3 (variance ~0.05) so predicted
    variances begin near their trained operating range instead of at 1.0;
    otherwise reliability weights spend a long ramp far below their
    calibrated scale while the global variance level settles.
    """
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                fan_in = p.shape[1] * (p.shape[2] * p.shape[3] if p.dim() == 4 else 1)
                bound = 1.0 / math.sqrt(fan_in)
                p.copy_((torch.rand(p.shape, generator=generator, dtype=DTYPE) * 2 - 1) * bound)
        model.noise_out.bias.fill_(-3.0)


def build_model(cfg: ModelConfig, seed: int) -> SegModel:
    model = SegModel(cfg)
    init_parameters(model, stream_generator(seed, "model-init"))
    return model


def clone_model(model: SegModel) -> SegModel:
    copy = SegModel(model.cfg)
    copy.load_state_dict({k: v.clone() for k, v in model.state_dict().items()})
    return copy


@dataclass
class Checkpoint:
    model_config: ModelConfig
    seed: int
    iteration: int
    params: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray]
    extra: dict

    def build_model(self) -> SegModel:
        model = SegModel(self.model_config)
        state = {name: torch.from_numpy(arr.copy()) for name, arr in self.params.items()}
        model.load_state_dict(state)
        return model


def save_checkpoint(
    path,
    model: SegModel,
    seed: int,
    iteration: int,
    momentum: dict[str, np.ndarray] | None = None,
    extra: dict | None = None,
) -> None:
    entries: list[tuple[str, np.ndarray]] = []
    for name, p in model.named_parameters():
        entries.append((name, p.detach().numpy()))
    for name in sorted(momentum or {}):
        entries.append((f"momentum/{name}", np.asarray(momentum[name], dtype=np.float64)))
    header = {
        "format": CHECKPOINT_FORMAT,
        "config": model.cfg.to_dict(),
        "seed": int(seed),
        "iteration": int(iteration),
        "extra": extra or {},
        "entries": [[name, list(arr.shape)] for name, arr in entries],
    }
    payload = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in entries)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(payload)


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            header_line = fh.readline()
            payload = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"corrupt checkpoint header in {path}") from exc
    if header.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"unsupported checkpoint format {header.get('format')!r}")
    expected = sum(int(np.prod(shape)) for _, shape in header["entries"])
    if len(payload) != expected * 8:
        raise DataError(
            f"checkpoint payload length mismatch: {len(payload)} bytes, want {expected * 8}"
        )
    params: dict[str, np.ndarray] = {}
    momentum: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in header["entries"]:
        count = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += count * 8
        if name.startswith("momentum/"):
            momentum[name[len("momentum/"):]] = arr
        else:
            params[name] = arr
    return Checkpoint(
        model_config=ModelConfig.from_dict(header["config"]),
        seed=int(header["seed"]),
        iteration=int(header["iteration"]),
        params=params,
        momentum=momentum,
        extra=header.get("extra", {}),
    )
