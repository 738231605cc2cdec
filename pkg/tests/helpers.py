"""Shared test fixtures: tiny worlds, tiny models, finite-difference checks."""

from __future__ import annotations

import numpy as np
import torch

from capseg.config import RunConfig
from capseg.model_core import ModelConfig, ProposalConfig, SegModel, build_model
from capseg.semantic_space import EmbeddingTable, Vocabulary
from capseg.synthetic_world import build_vocabulary, generate_base_dataset, generate_caption_dataset

TINY_PROPOSALS = ProposalConfig(scales=(8.0, 12.0, 18.0), ratios=(1.0, 2.0), stride=8)

TINY_MODEL = ModelConfig(
    image_size=32,
    backbone_channels=(4, 6, 8),
    embed_hidden=16,
    embed_dim=20,
    roi_size=4,
    mask_size=8,
    head_channels=6,
    proposals=TINY_PROPOSALS,
)


def tiny_run_config(**overrides) -> RunConfig:
    base = dict(
        seed=3,
        n_base_classes=4,
        n_caption_only_classes=3,
        n_target_classes=2,
        d_attr=16,
        d_noise=4,
        n_base_images=12,
        n_caption_images=12,
        n_test_images=8,
        image_size=32,
        backbone_channels=(4, 6, 8),
        embed_hidden=16,
        roi_size=4,
        mask_size=8,
        head_channels=6,
        proposal_scales=(8.0, 12.0, 18.0),
        proposal_ratios=(1.0, 2.0),
        proposal_stride=8,
        teacher_iterations=4,
        student_iterations=3,
        base_batch_size=2,
        caption_batch_size=2,
        eta_calibration_steps=2,
        eta_calibration_images=4,
    )
    base.update(overrides)
    return RunConfig(**base)


def tiny_world(seed: int = 3, n_base: int = 10, n_caption: int = 10, noise_rate: float = 0.3):
    vocab, table = build_vocabulary(4, 3, 2, d_attr=16, d_noise=4, seed=seed)
    base = generate_base_dataset(vocab, n_base, seed=seed + 1, image_size=32)
    caption = generate_caption_dataset(vocab, n_caption, seed=seed + 2,
                                       caption_noise_rate=noise_rate, image_size=32)
    return vocab, table, base, caption


def tiny_model(seed: int = 0) -> SegModel:
    return build_model(TINY_MODEL, seed)


def random_table(classes, dim, seed=0) -> EmbeddingTable:
    rng = np.random.default_rng(seed)
    return EmbeddingTable(dim, {c: rng.normal(size=dim) for c in classes})


def flat_vocab(names, base_count) -> Vocabulary:
    split = {}
    for i, name in enumerate(names):
        split[name] = "base" if i < base_count else "caption_only"
    return Vocabulary(classes=tuple(names), split=split)


def finite_difference(loss_fn, param: torch.Tensor, coords, step: float = 1e-3) -> list[float]:
    """Central finite differences of ``loss_fn()`` w.r.t. given coordinates."""
    grads = []
    flat = param.data.view(-1)
    for coord in coords:
        original = float(flat[coord])
        flat[coord] = original + step
        with torch.no_grad():
            up = float(loss_fn())
        flat[coord] = original - step
        with torch.no_grad():
            down = float(loss_fn())
        flat[coord] = original
        grads.append((up - down) / (2 * step))
    return grads


def gradcheck_params(loss_fn, model: SegModel, coords_per_param: int = 3,
                     rel_tol: float = 1e-4, seed: int = 0, step: float = 1e-3):
    """Compare autograd against central differences on sampled coordinates.

    Checks every parameter tensor of ``model``; returns the worst relative
    error seen.  ``loss_fn`` must be a pure function of the parameters.
    """
    rng = np.random.default_rng(seed)
    model.zero_grad()
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    for name, p in model.named_parameters():
        n = p.numel()
        coords = rng.choice(n, size=min(coords_per_param, n), replace=False)
        analytic = p.grad.view(-1) if p.grad is not None else torch.zeros(n, dtype=p.dtype)
        numeric = finite_difference(loss_fn, p, coords, step=step)
        for coord, fd in zip(coords, numeric):
            an = float(analytic[coord])
            denom = max(abs(an), abs(fd), 1e-6)
            rel = abs(an - fd) / denom
            worst = max(worst, rel)
            assert rel <= rel_tol, (
                f"gradient mismatch at {name}[{coord}]: analytic {an:.3e} vs fd {fd:.3e} (rel {rel:.2e})"
            )
    model.zero_grad()
    return worst
