"""Class vocabularies, word embeddings, and embedding-space scoring.

Classes are recognized by the inner product between their word embedding
and a region's visual embedding.  The background is a fixed all-zero
embedding, so the background score of any region is exactly 0 and a region
is background when every class score falls below 0.

Both structures are read-only after construction and safe to share across
threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

BASE = "base"
CAPTION_ONLY = "caption_only"
TARGET = "target"

_SPLITS = (BASE, CAPTION_ONLY, TARGET)


@dataclass(frozen=True)
class Vocabulary:
    """Ordered class names partitioned into base / caption-only / target.

    The caption class set is ``base | caption_only``: caption images may
    mention base classes too.  ``object_lexicon`` is the token set that
    counts as an object noun when parsing captions.
    """

    classes: tuple[str, ...]
    split: dict[str, str]
    object_lexicon: frozenset[str] = field(default=frozenset())

    def __post_init__(self):
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("duplicate class names in vocabulary")
        if set(self.split) != set(self.classes):
            raise ValueError("split must assign every class exactly once")
        bad = {c: s for c, s in self.split.items() if s not in _SPLITS}
        if bad:
            raise ValueError(f"unknown split labels: {bad}")
        if not self.object_lexicon:
            object.__setattr__(self, "object_lexicon", frozenset(self.classes))

    def _members(self, *splits: str) -> tuple[str, ...]:
        return tuple(c for c in self.classes if self.split[c] in splits)

    @property
    def base_classes(self) -> tuple[str, ...]:
        return self._members(BASE)

    @property
    def caption_classes(self) -> tuple[str, ...]:
        """V_C = base plus caption-only, in vocabulary order."""
        return self._members(BASE, CAPTION_ONLY)

    @property
    def target_classes(self) -> tuple[str, ...]:
        return self._members(TARGET)

    def index(self, name: str) -> int:
        return self.classes.index(name)

    def ordered(self, names: Iterable[str]) -> tuple[str, ...]:
        """Return ``names`` sorted into vocabulary order."""
        wanted = set(names)
        unknown = wanted - set(self.classes)
        if unknown:
            raise KeyError(f"not in vocabulary: {sorted(unknown)}")
        return tuple(c for c in self.classes if c in wanted)


class EmbeddingTable:
    """Per-class embedding vectors of a fixed dimensionality.

    The background embedding is the all-zero vector and is not stored per
    class; ``background`` materializes it.
    """

    def __init__(self, dim: int, vectors: dict[str, np.ndarray]):
        if dim <= 0:
            raise ValueError("embedding dimensionality must be positive")
        self.dim = int(dim)
        self.vectors: dict[str, np.ndarray] = {}
        for name, vec in vectors.items():
            arr = np.asarray(vec, dtype=np.float64)
            if arr.shape != (self.dim,):
                raise ValueError(f"embedding for {name!r} has shape {arr.shape}, want ({self.dim},)")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"embedding for {name!r} has non-finite entries")
            arr.flags.writeable = False
            self.vectors[name] = arr

    @property
    def background(self) -> np.ndarray:
        return np.zeros(self.dim, dtype=np.float64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.vectors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.vectors

    def matrix(self, classes: Sequence[str]) -> np.ndarray:
        """Stack embeddings for ``classes`` into a (len(classes), dim) array."""
        return np.stack([self.vectors[c] for c in classes], axis=0)

    def save_text(self, path) -> None:
        """One record per class: name followed by whitespace-separated floats.

        The background row is omitted (implied zero).  Class names must not
        contain whitespace.
        """
        lines = []
        for name in sorted(self.vectors):
            if any(ch.isspace() for ch in name):
                raise ValueError(f"class name {name!r} contains whitespace")
            floats = " ".join(repr(float(x)) for x in self.vectors[name])
            lines.append(f"{name} {floats}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load_text(cls, path) -> "EmbeddingTable":
        vectors = {}
        dim = None
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                parts = line.split()
                name, values = parts[0], parts[1:]
                if not values:
                    raise ValueError(f"{path}:{lineno}: record has no values")
                vec = np.array([float(v) for v in values], dtype=np.float64)
                if dim is None:
                    dim = vec.size
                elif vec.size != dim:
                    raise ValueError(f"{path}:{lineno}: inconsistent dimensionality")
                vectors[name] = vec
        if dim is None:
            raise ValueError(f"{path}: empty embedding file")
        return cls(dim, vectors)


def class_score(v_o: np.ndarray, e: np.ndarray) -> float:
    """Inner-product score of a class embedding against a region embedding.

    No normalization is applied; a zero class vector (background) scores 0
    against anything.
    """
    v_o = np.asarray(v_o, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    if v_o.shape != e.shape or v_o.ndim != 1:
        raise ValueError(f"dimension mismatch: {v_o.shape} vs {e.shape}")
    return float(v_o @ e)


def score_all(e: np.ndarray, classes: Sequence[str], table: EmbeddingTable) -> tuple[np.ndarray, float]:
    """Score every class in ``classes`` against ``e``.

    Returns (scores aligned with ``classes``, background score).  The
    background score is exactly 0 by construction.
    """
    if len(classes) == 0:
        raise ValueError("empty class subset")
    e = np.asarray(e, dtype=np.float64)
    if e.shape != (table.dim,):
        raise ValueError(f"region embedding has shape {e.shape}, want ({table.dim},)")
    scores = table.matrix(classes) @ e
    return scores, 0.0

BACKGROUND = "__background__"


def predict_class(e: np.ndarray, classes: Sequence[str], table: EmbeddingTable) -> tuple[str, float]:
    """Argmax class if its score beats the background score of 0, else background.

    Ties between classes break toward the earlier entry of ``classes``
    (callers pass vocabulary-ordered subsets); a tie with the background at
    exactly 0 resolves to background.
    """
    scores, bg = score_all(e, classes, table)
    best = int(np.argmax(scores))  # np.argmax returns the first maximal index
    if scores[best] > bg:
        return classes[best], float(scores[best])
    return BACKGROUND, bg
