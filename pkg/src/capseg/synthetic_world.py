"""Desk-scale synthetic benchmark: shape scenes, captions, and embeddings.

Classes are (shape family, color family, size band) attribute tuples named
like ``small_red_disk``.  Embeddings concatenate an attribute indicator
block with a seeded random block, so classes sharing an attribute share
indicator coordinates and similarity in embedding space carries visual
meaning.  Target classes reuse attribute values covered by base or
caption-only classes, which is what makes generalization to them possible
at all.

Scenes are painter's-algorithm rasterizations of up to six instances over
a seeded textured background.  Caption samples keep their ground truth as
``hidden_truth`` for diagnostics only; training code reads image + tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError
from .semantic_space import BASE, CAPTION_ONLY, TARGET, EmbeddingTable, Vocabulary

SHAPE_FAMILIES = ("disk", "square", "triangle", "ring", "frame", "cross", "diamond", "bar")
COLOR_FAMILIES = ("red", "green", "blue", "yellow", "magenta", "cyan")
SIZE_BANDS = ("small", "large")

COLOR_RGB = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.15, 0.75, 0.20),
    "blue": (0.20, 0.30, 0.85),
    "yellow": (0.88, 0.85, 0.15),
    "magenta": (0.80, 0.20, 0.80),
    "cyan": (0.15, 0.80, 0.80),
}

SIZE_RANGES = {"small": (6.0, 10.0), "large": (14.0, 20.0)}

# attribute indicator layout inside the embedding's leading block
_N_ATTR = len(SHAPE_FAMILIES) + len(COLOR_FAMILIES) + len(SIZE_BANDS)

# magnitude of the seeded random block; indicators are 0/1.  Kept well
# below the indicator scale: per-class random directions let a classifier
# satisfy caption supervision without learning the shared attribute map,
# and that shortcut is exactly what kills transfer to unseen classes.
EMBED_NOISE_SCALE = 0.1

FILLER_TOKENS = ("a", "the", "scene", "with", "shows", "and", "near", "some", "one", "photo", "of", "beside")

MAX_INSTANCES = 6


def class_name(size_band: str, color: str, shape: str) -> str:
    return f"{size_band}_{color}_{shape}"


def parse_class_name(name: str) -> tuple[str, str, str]:
    """Split a class name back into (size_band, color, shape)."""
    size_band, color, shape = name.split("_")
    if size_band not in SIZE_BANDS or color not in COLOR_FAMILIES or shape not in SHAPE_FAMILIES:
        raise ValueError(f"unparseable class name {name!r}")
    return size_band, color, shape


def attribute_indicator(name: str, d_attr: int) -> np.ndarray:
    size_band, color, shape = parse_class_name(name)
    vec = np.zeros(d_attr, dtype=np.float64)
    vec[SHAPE_FAMILIES.index(shape)] = 1.0
    vec[len(SHAPE_FAMILIES) + COLOR_FAMILIES.index(color)] = 1.0
    vec[len(SHAPE_FAMILIES) + len(COLOR_FAMILIES) + SIZE_BANDS.index(size_band)] = 1.0
    return vec


def build_vocabulary(
    n_base: int,
    n_caption_only: int,
    n_target: int,
    d_attr: int = _N_ATTR,
    d_noise: int = 8,
    seed: int = 0,
) -> tuple[Vocabulary, EmbeddingTable]:
    """Construct the class splits and their attribute-structured embeddings.

    Classes are distinct (shape, color) pairs with a size band, so no two
    classes rely on the size band alone to be told apart.  Caption-only
    classes extend shape coverage beyond the base shapes, and target
    classes draw every attribute value from ones covered by base or
    caption-only classes (picking novel combinations of seen attributes).
    """
    if min(n_base, n_caption_only, n_target) < 1:
        raise ConfigError("all class counts must be >= 1")
    if d_attr < _N_ATTR:
        raise ConfigError(f"d_attr={d_attr} too small for the attribute space (need >= {_N_ATTR})")
    if d_noise < 0:
        raise ConfigError("d_noise must be >= 0")
    n_total = n_base + n_caption_only + n_target
    n_pairs = len(SHAPE_FAMILIES) * len(COLOR_FAMILIES)
    if n_total > n_pairs:
        raise ConfigError(
            f"attribute space too small: {n_total} classes requested, "
            f"{n_pairs} distinct (shape, color) pairs available"
        )

    rng = np.random.default_rng(seed)

    n_base_shapes = max(int(math.ceil(n_base / len(COLOR_FAMILIES))), round(len(SHAPE_FAMILIES) * 0.6))
    n_base_shapes = min(n_base_shapes, len(SHAPE_FAMILIES))
    shape_order = list(rng.permutation(len(SHAPE_FAMILIES)))
    base_shapes = [SHAPE_FAMILIES[i] for i in shape_order[:n_base_shapes]]
    extra_shapes = [SHAPE_FAMILIES[i] for i in shape_order[n_base_shapes:]]

    def draw_pairs(pool: list[tuple[str, str]], count: int) -> list[tuple[str, str]]:
        if count > len(pool):
            raise ConfigError("attribute space too small for the requested split sizes")
        idx = rng.choice(len(pool), size=count, replace=False)
        chosen = [pool[i] for i in sorted(idx)]
        for p in chosen:
            pool.remove(p)
        return chosen

    free_pairs = [(s, c) for s in SHAPE_FAMILIES for c in COLOR_FAMILIES]
    base_pool = [p for p in free_pairs if p[0] in base_shapes]
    base_pairs = draw_pairs(base_pool, n_base)
    free_pairs = [p for p in free_pairs if p not in base_pairs]

    # caption-only classes cover the shapes base never sees (as many as fit)
    caption_pairs: list[tuple[str, str]] = []
    for shape in extra_shapes[: min(len(extra_shapes), n_caption_only)]:
        pool = [p for p in free_pairs if p[0] == shape]
        caption_pairs += draw_pairs(pool, 1)
        free_pairs = [p for p in free_pairs if p not in caption_pairs]
    remaining = n_caption_only - len(caption_pairs)
    if remaining:
        pool = list(free_pairs)
        caption_pairs += draw_pairs(pool, remaining)
        free_pairs = [p for p in free_pairs if p not in caption_pairs]

    seen_shapes = {p[0] for p in base_pairs} | {p[0] for p in caption_pairs}
    covered_extras = [s for s in extra_shapes if s in seen_shapes]

    # targets alternate between caption-covered novel shapes and base shapes
    cand_extra = [p for p in free_pairs if p[0] in covered_extras]
    cand_base = [p for p in free_pairs if p[0] in base_shapes]
    rng.shuffle(cand_extra)
    rng.shuffle(cand_base)
    target_pairs: list[tuple[str, str]] = []
    for k in range(n_target):
        primary, fallback = (cand_extra, cand_base) if k % 2 == 0 else (cand_base, cand_extra)
        pool = primary if primary else fallback
        if not pool:
            raise ConfigError("attribute space too small: no covered pairs left for target classes")
        target_pairs.append(pool.pop())

    def with_sizes(pairs: list[tuple[str, str]], allowed: Sequence[str]) -> list[str]:
        return [class_name(allowed[rng.integers(len(allowed))], c, s) for s, c in pairs]

    base_names = with_sizes(base_pairs, SIZE_BANDS)
    caption_names = with_sizes(caption_pairs, SIZE_BANDS)
    seen_sizes = sorted({parse_class_name(n)[0] for n in base_names + caption_names})
    target_names = with_sizes(target_pairs, seen_sizes)

    classes = tuple(base_names + caption_names + target_names)
    split = {n: BASE for n in base_names}
    split.update({n: CAPTION_ONLY for n in caption_names})
    split.update({n: TARGET for n in target_names})
    vocab = Vocabulary(classes=classes, split=split, object_lexicon=frozenset(classes))

    dim = d_attr + d_noise
    vectors = {}
    for name in classes:
        noise = rng.normal(0.0, EMBED_NOISE_SCALE, size=d_noise)
        vectors[name] = np.concatenate([attribute_indicator(name, d_attr), noise])
    table = EmbeddingTable(dim, vectors)
    return vocab, table


@dataclass
class ShapeInstance:
    """One object to rasterize: class attributes plus pose and paint order."""

    class_name: str
    center: tuple[float, float]
    size: float
    rotation: float = 0.0
    color: tuple[float, float, float] = (0.5, 0.5, 0.5)
    z_order: int = 0

    def __post_init__(self):
        if self.size < 4:
            raise ValueError(f"instance size {self.size} below the 4px minimum")


@dataclass
class Annotation:
    mask: np.ndarray  # H×W bool, visible pixels only
    box: tuple[int, int, int, int]  # tight half-open (x0, y0, x1, y1)
    label: str


@dataclass
class MaskedSample:
    """Image plus instance annotations (the mask-supervised sample kind)."""

    image: np.ndarray  # H×W×3 float in [0,1]
    annotations: list[Annotation]
    subset: str = ""


@dataclass(frozen=True)
class HiddenInstance:
    """Label and box of an instance in a caption image, diagnostics only."""

    label: str
    box: tuple[int, int, int, int]


@dataclass
class CaptionedSample:
    """Image plus caption tokens; ground truth retained for diagnostics only.

    Training code must consume only ``image`` and ``tokens``.
    ``hidden_truth`` exists so experiments can score pseudo-label quality
    after the fact; nothing on a training path reads it.
    """

    image: np.ndarray
    tokens: tuple[str, ...]
    hidden_truth: list[HiddenInstance] = field(default_factory=list)

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("caption tokens must be nonempty")


def rasterize(shape: ShapeInstance, height: int, width: int) -> np.ndarray:
    """Full (un-occluded) boolean raster of one instance.

    Pixel (i, j) is covered when its center (j+0.5, i+0.5) lies inside the
    rotated shape.  Box-like families use half-open extents so an
    axis-aligned square of integer size s covers exactly s*s pixels.
    """
    _, _, family = parse_class_name(shape.class_name)
    cx, cy = shape.center
    ys, xs = np.mgrid[0:height, 0:width]
    dx = (xs + 0.5) - cx
    dy = (ys + 0.5) - cy
    c, s = math.cos(shape.rotation), math.sin(shape.rotation)
    dxr = c * dx + s * dy
    dyr = -s * dx + c * dy
    h = shape.size / 2.0
    if family == "disk":
        mask = dxr**2 + dyr**2 <= h**2
    elif family == "square":
        mask = (-h <= dxr) & (dxr < h) & (-h <= dyr) & (dyr < h)
    elif family == "triangle":
        mask = (-h <= dyr) & (dyr < h) & (np.abs(dxr) <= (dyr + h) / 2.0)
    elif family == "ring":
        r2 = dxr**2 + dyr**2
        mask = ((h / 2.0) ** 2 <= r2) & (r2 <= h**2)
    elif family == "frame":
        m = np.maximum(np.abs(dxr), np.abs(dyr))
        mask = (m < h) & (m >= h / 2.0)
    elif family == "cross":
        third = shape.size / 6.0
        mask = ((np.abs(dxr) < third) & (np.abs(dyr) < h)) | ((np.abs(dyr) < third) & (np.abs(dxr) < h))
    elif family == "diamond":
        mask = np.abs(dxr) + np.abs(dyr) <= h
    elif family == "bar":
        mask = (np.abs(dxr) < h) & (np.abs(dyr) < shape.size / 6.0)
    else:  # pragma: no cover - parse_class_name already validates
        raise ValueError(family)
    return mask


def render_scene(
    shapes: Sequence[ShapeInstance],
    height: int,
    width: int,
    bg_seed: int = 0,
    pixel_noise: float = 0.02,
) -> tuple[np.ndarray, list[tuple[int, np.ndarray]]]:
    """Painter's-algorithm composite of ``shapes`` over a textured background.

    Returns the image and ``(input_index, visible_mask)`` pairs; instances
    whose every pixel is occluded are dropped.  Paint order is ascending
    (z_order, input index), so higher z_order is on top.
    """
    if not 1 <= len(shapes) <= MAX_INSTANCES:
        raise ValueError(f"scene must contain 1..{MAX_INSTANCES} shapes, got {len(shapes)}")
    rng = np.random.default_rng(bg_seed)
    level = rng.uniform(0.18, 0.38)
    image = level + rng.uniform(-0.06, 0.06, size=(height, width, 3))

    order = sorted(range(len(shapes)), key=lambda i: (shapes[i].z_order, i))
    rasters = {i: rasterize(shapes[i], height, width) for i in order}
    visible: list[tuple[int, np.ndarray]] = []
    for pos, i in enumerate(order):
        mask = rasters[i].copy()
        for j in order[pos + 1:]:
            mask &= ~rasters[j]
        if mask.any():
            visible.append((i, mask))
        image[rasters[i]] = shapes[i].color

    if pixel_noise > 0:
        image = image + rng.normal(0.0, pixel_noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    visible.sort(key=lambda t: t[0])
    return image, visible


def tight_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Half-open (x0, y0, x1, y1) bounding box of a nonempty mask."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("empty mask has no bounding box")
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1


def _sample_instance(rng: np.random.Generator, name: str, z: int, height: int, width: int) -> ShapeInstance:
    size_band, color, _ = parse_class_name(name)
    lo, hi = SIZE_RANGES[size_band]
    size = float(rng.uniform(lo, hi))
    margin = size * 0.4
    cx = float(rng.uniform(margin, width - margin))
    cy = float(rng.uniform(margin, height - margin))
    rotation = float(rng.uniform(-0.26, 0.26))
    base_rgb = np.array(COLOR_RGB[color])
    rgb = tuple(np.clip(base_rgb + rng.uniform(-0.08, 0.08, size=3), 0.0, 1.0))
    return ShapeInstance(name, (cx, cy), size, rotation, rgb, z)


def _sample_scene(
    rng: np.random.Generator,
    pool: Sequence[str],
    height: int,
    width: int,
    n_min: int,
    n_max: int,
) -> tuple[np.ndarray, list[Annotation]]:
    count = int(rng.integers(n_min, n_max + 1))
    names = [pool[int(i)] for i in rng.integers(0, len(pool), size=count)]
    shapes = [_sample_instance(rng, name, z, height, width) for z, name in enumerate(names)]
    bg_seed = int(rng.integers(0, 2**31 - 1))
    image, visible = render_scene(shapes, height, width, bg_seed=bg_seed)
    annotations = [
        Annotation(mask=mask, box=tight_box(mask), label=shapes[i].class_name) for i, mask in visible
    ]
    return image, annotations


def generate_base_dataset(
    vocab: Vocabulary,
    n: int,
    seed: int,
    image_size: int = 64,
    min_instances: int = 1,
    max_instances: int = 4,
) -> list[MaskedSample]:
    """n mask-annotated scenes drawn only from base classes."""
    pool = vocab.base_classes
    samples = []
    for child in np.random.SeedSequence(seed).spawn(n):
        rng = np.random.default_rng(child)
        image, anns = _sample_scene(rng, pool, image_size, image_size, min_instances, max_instances)
        samples.append(MaskedSample(image=image, annotations=anns, subset="base"))
    return samples


def generate_caption_dataset(
    vocab: Vocabulary,
    n: int,
    seed: int,
    caption_noise_rate: float = 0.0,
    image_size: int = 64,
    min_instances: int = 1,
    max_instances: int = 4,
) -> list[CaptionedSample]:
    """n caption-annotated scenes from base plus caption-only classes.

    With probability ``caption_noise_rate`` a sample's caption additionally
    names one class absent from the scene, modeling caption words the
    image cannot ground.  The absent class is drawn from those sharing the
    fewest attribute values with the scene: a word sharing shape and color
    with a visible object is nearly groundable, while an ungroundable word
    is semantically far from everything in the image.
    """
    if not 0.0 <= caption_noise_rate <= 1.0:
        raise ConfigError(f"caption_noise_rate must be in [0, 1], got {caption_noise_rate}")
    pool = vocab.caption_classes
    samples = []
    for child in np.random.SeedSequence(seed).spawn(n):
        rng = np.random.default_rng(child)
        image, anns = _sample_scene(rng, pool, image_size, image_size, min_instances, max_instances)
        present = list(dict.fromkeys(a.label for a in anns))
        object_tokens = list(present)
        if rng.random() < caption_noise_rate:
            scene_attrs = set()
            for name in present:
                scene_attrs.update(parse_class_name(name))
            absent = [c for c in pool if c not in present]
            overlap = [len(set(parse_class_name(c)) & scene_attrs) for c in absent]
            least = [c for c, o in zip(absent, overlap) if o == min(overlap)]
            object_tokens.insert(int(rng.integers(0, len(object_tokens) + 1)), least[int(rng.integers(len(least)))])
        tokens: list[str] = [FILLER_TOKENS[int(i)] for i in rng.integers(0, len(FILLER_TOKENS), size=2)]
        for tok in object_tokens:
            tokens.append(tok)
            tokens.append(FILLER_TOKENS[int(rng.integers(0, len(FILLER_TOKENS)))])
        hidden = [HiddenInstance(label=a.label, box=a.box) for a in anns]
        samples.append(CaptionedSample(image=image, tokens=tuple(tokens), hidden_truth=hidden))
    return samples


def generate_test_dataset(
    vocab: Vocabulary,
    n: int,
    seed: int,
    image_size: int = 64,
) -> list[MaskedSample]:
    """Evaluation scenes: half mixed base+target, a quarter each pure subset.

    The mixed subset serves the generalized protocol; the pure-base and
    pure-target subsets serve the constrained protocols.
    """
    base_pool = vocab.base_classes
    target_pool = vocab.target_classes
    mixed_pool = base_pool + target_pool
    n_pure_base = n // 4
    n_pure_target = n // 4
    n_mixed = n - n_pure_base - n_pure_target
    plan = [("mixed", mixed_pool, 2, 5)] * n_mixed
    plan += [("pure_base", base_pool, 1, 4)] * n_pure_base
    plan += [("pure_target", target_pool, 1, 4)] * n_pure_target
    samples = []
    for child, (subset, pool, n_min, n_max) in zip(np.random.SeedSequence(seed).spawn(len(plan)), plan):
        rng = np.random.default_rng(child)
        image, anns = _sample_scene(rng, pool, image_size, image_size, n_min, n_max)
        samples.append(MaskedSample(image=image, annotations=anns, subset=subset))
    return samples


def extract_object_nouns(tokens: Iterable[str], lexicon: frozenset[str] | set[str]) -> tuple[str, ...]:
    """Tokens that are object nouns, deduplicated, first occurrence first."""
    seen: dict[str, None] = {}
    for tok in tokens:
        if tok in lexicon and tok not in seen:
            seen[tok] = None
    return tuple(seen)
