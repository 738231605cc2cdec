"""Caption-driven pseudo-mask distillation for open-vocabulary instance segmentation.

A teacher trained on base-class masks labels objects named in captions by
aligning word embeddings with region features; a robust student distills
those pseudo masks while estimating per-pixel noise to down-weight
unreliable supervision.
"""

__version__ = "0.1.0"
