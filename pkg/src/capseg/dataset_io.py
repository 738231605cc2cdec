"""Dataset tree on disk: PPM images, PGM masks, one JSON manifest.

Layout under a dataset directory::

    manifest.json     UTF-8 JSON: files, boxes, labels, tokens, splits, seeds
    embeddings.txt    per-class embedding rows (background implied zero)
    images/*.ppm      P6, 8-bit
    masks/*.pgm       P5, 0/255

Regenerating with the same seed reproduces the tree bit-identically;
``manifest_digest`` hashes the canonical manifest for quick comparison.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import DataError
from .io_formats import read_pgm, read_ppm, write_pgm, write_ppm
from .semantic_space import EmbeddingTable, Vocabulary
from .synthetic_world import Annotation, CaptionedSample, HiddenInstance, MaskedSample

MANIFEST_FORMAT = "capseg-dataset-v1"


@dataclass
class DatasetBundle:
    vocab: Vocabulary
    table: EmbeddingTable
    base: list[MaskedSample]
    caption: list[CaptionedSample]
    test: list[MaskedSample]
    seed: int
    generator: dict


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def manifest_digest(manifest: dict) -> str:
    return hashlib.sha256(canonical_json(manifest).encode("utf-8")).hexdigest()


def write_dataset(out_dir, bundle: DatasetBundle) -> dict:
    """Write the full tree and return the manifest dict."""
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    bundle.table.save_text(root / "embeddings.txt")

    images = []
    for split, samples in (("base", bundle.base), ("caption", bundle.caption), ("test", bundle.test)):
        for k, sample in enumerate(samples):
            sid = f"{split}_{k:05d}"
            rel_img = f"images/{sid}.ppm"
            write_ppm(root / rel_img, sample.image)
            record = {"id": sid, "split": split, "file": rel_img}
            if isinstance(sample, CaptionedSample):
                record["tokens"] = list(sample.tokens)
                record["hidden_truth"] = [
                    {"label": h.label, "box": list(h.box)} for h in sample.hidden_truth
                ]
            else:
                record["subset"] = sample.subset
                anns = []
                for a, ann in enumerate(sample.annotations):
                    rel_mask = f"masks/{sid}_{a:02d}.pgm"
                    write_pgm(root / rel_mask, ann.mask)
                    anns.append({"mask_file": rel_mask, "box": list(ann.box), "label": ann.label})
                record["annotations"] = anns
            images.append(record)

    manifest = {
        "format": MANIFEST_FORMAT,
        "seed": bundle.seed,
        "generator": bundle.generator,
        "classes": list(bundle.vocab.classes),
        "split": dict(bundle.vocab.split),
        "lexicon": sorted(bundle.vocab.object_lexicon),
        "embeddings_file": "embeddings.txt",
        "images": images,
    }
    with open(root / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return manifest


def load_dataset(data_dir) -> DatasetBundle:
    root = Path(data_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise DataError(f"no manifest.json under {root}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != MANIFEST_FORMAT:
        raise DataError(f"unsupported manifest format {manifest.get('format')!r}")

    vocab = Vocabulary(
        classes=tuple(manifest["classes"]),
        split=dict(manifest["split"]),
        object_lexicon=frozenset(manifest["lexicon"]),
    )
    table = EmbeddingTable.load_text(root / manifest["embeddings_file"])

    base: list[MaskedSample] = []
    caption: list[CaptionedSample] = []
    test: list[MaskedSample] = []
    for record in manifest["images"]:
        image = read_ppm(root / record["file"])
        if record["split"] == "caption":
            hidden = [
                HiddenInstance(label=h["label"], box=tuple(h["box"]))
                for h in record.get("hidden_truth", [])
            ]
            caption.append(CaptionedSample(image=image, tokens=tuple(record["tokens"]), hidden_truth=hidden))
            continue
        anns = []
        for a in record["annotations"]:
            mask = read_pgm(root / a["mask_file"])
            anns.append(Annotation(mask=mask, box=tuple(a["box"]), label=a["label"]))
        sample = MaskedSample(image=image, annotations=anns, subset=record.get("subset", ""))
        (base if record["split"] == "base" else test).append(sample)

    return DatasetBundle(
        vocab=vocab,
        table=table,
        base=base,
        caption=caption,
        test=test,
        seed=manifest["seed"],
        generator=manifest["generator"],
    )
