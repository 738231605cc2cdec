"""Batch entry points: data generation, training, labeling, evaluation.

Every command validates its config (unknown keys rejected), runs
deterministically for a given seed, and writes its outputs plus a
metadata record (config digest, seed, code version) under the output
directory.  Report commands render figures next to their CSV/JSON output.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import torch

from . import __version__
from .config import RunConfig, STRATEGIES
from .dataset_io import DatasetBundle, load_dataset, manifest_digest, write_dataset
from .errors import ConfigError, DataError, DivergenceError
from .evaluator import PROTOCOLS, evaluate
from .figures import (
    save_ablation_chart,
    save_pr_curves,
    save_pseudo_label_panel,
    save_training_curves,
)
from .io_formats import rle_decode
from .losses import REFERENCE_ETA, NoiseConfig, reliability
from .model_core import (
    load_checkpoint,
    regions_to_array,
    extract_region_features,
    save_checkpoint,
    stable_hash,
)
from .pseudo_labeler import generate_pseudo_labels, pseudo_label_record
from .synthetic_world import (
    build_vocabulary,
    generate_base_dataset,
    generate_caption_dataset,
    generate_test_dataset,
)
from .trainer import LOG_COLUMNS, train_student, train_teacher, variant_factory

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


def build_world(cfg: RunConfig) -> DatasetBundle:
    """Vocabulary, embeddings, and all three splits for one run seed."""
    vocab, table = build_vocabulary(
        cfg.n_base_classes, cfg.n_caption_only_classes, cfg.n_target_classes,
        d_attr=cfg.d_attr, d_noise=cfg.d_noise, seed=stable_hash(cfg.seed, "vocab"),
    )
    base = generate_base_dataset(
        vocab, cfg.n_base_images, seed=stable_hash(cfg.seed, "base-data"), image_size=cfg.image_size
    )
    caption = generate_caption_dataset(
        vocab, cfg.n_caption_images, seed=stable_hash(cfg.seed, "caption-data"),
        caption_noise_rate=cfg.caption_noise_rate, image_size=cfg.image_size,
    )
    test = generate_test_dataset(
        vocab, cfg.n_test_images, seed=stable_hash(cfg.seed, "test-data"), image_size=cfg.image_size
    )
    return DatasetBundle(
        vocab=vocab, table=table, base=base, caption=caption, test=test,
        seed=cfg.seed, generator=cfg.to_dict(),
    )


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _write_metadata(out_dir: Path, command: str, cfg: RunConfig | None, inputs: dict) -> None:
    record = {
        "command": command,
        "version": __version__,
        "inputs": {k: str(v) for k, v in inputs.items()},
    }
    if cfg is not None:
        record["seed"] = cfg.seed
        record["config_digest"] = cfg.digest()
        record["config"] = cfg.to_dict()
    _write_json(out_dir / "metadata.json", record)


class _CsvLogger:
    def __init__(self, path: Path, resume: bool):
        new_file = not (resume and path.exists() and path.stat().st_size > 0)
        self.fh = open(path, "w" if new_file else "a", encoding="utf-8", newline="")
        self.writer = csv.DictWriter(self.fh, fieldnames=LOG_COLUMNS)
        if new_file:
            self.writer.writeheader()
        self.rows: list[dict] = []

    def __call__(self, row: dict) -> None:
        self.writer.writerow(row)
        self.rows.append(row)

    def close(self) -> None:
        self.fh.close()


def cmd_gen_data(args) -> int:
    cfg = RunConfig.from_file(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bundle = build_world(cfg)
    manifest = write_dataset(out, bundle)
    digest = manifest_digest(manifest)
    _write_metadata(out, "gen-data", cfg, {"config": args.config})
    _write_json(out / "digest.json", {
        "manifest_digest": digest,
        "counts": {"base": len(bundle.base), "caption": len(bundle.caption), "test": len(bundle.test)},
    })
    print(f"wrote dataset to {out} (manifest digest {digest[:16]}…)")
    return EXIT_OK


def _load_bundle(data_dir) -> DatasetBundle:
    return load_dataset(data_dir)


def cmd_train_teacher(args) -> int:
    cfg = RunConfig.from_file(args.config)
    bundle = _load_bundle(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start_model, start_iter, momentum = None, 0, None
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        start_model, start_iter, momentum = ckpt.build_model(), ckpt.iteration, ckpt.momentum
    log = _CsvLogger(out / "teacher_log.csv", resume=bool(args.resume))
    try:
        model, buffers = train_teacher(
            cfg, bundle.vocab, bundle.table, bundle.base,
            start_model=start_model, start_iteration=start_iter,
            momentum_buffers=momentum, log_fn=log,
        )
    finally:
        log.close()
    save_checkpoint(out / "teacher.ckpt", model, seed=cfg.seed,
                    iteration=cfg.teacher_iterations, momentum=buffers)
    save_training_curves(log.rows, out / "teacher_loss.png", title="teacher")
    _write_metadata(out, "train-teacher", cfg, {"config": args.config, "data": args.data})
    print(f"teacher checkpoint: {out / 'teacher.ckpt'}")
    return EXIT_OK


def cmd_train_student(args) -> int:
    cfg = RunConfig.from_file(args.config)
    bundle = _load_bundle(args.data)
    teacher = load_checkpoint(args.teacher).build_model()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start_model, start_iter, momentum, eta = None, 0, None, None
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        start_model, start_iter, momentum = ckpt.build_model(), ckpt.iteration, ckpt.momentum
        eta = ckpt.extra.get("eta")
    log = _CsvLogger(out / "student_log.csv", resume=bool(args.resume))
    try:
        student, buffers, eta = train_student(
            cfg, teacher, bundle.vocab, bundle.table, bundle.base, bundle.caption,
            eta=eta, start_model=start_model, start_iteration=start_iter,
            momentum_buffers=momentum, log_fn=log,
        )
    finally:
        log.close()
    save_checkpoint(out / "student.ckpt", student, seed=cfg.seed,
                    iteration=cfg.student_iterations, momentum=buffers,
                    extra={"eta": eta, "strategy": cfg.strategy})
    save_training_curves(log.rows, out / "student_loss.png", title=f"student ({cfg.strategy})")
    _write_metadata(out, "train-student", cfg, {
        "config": args.config, "data": args.data, "teacher": args.teacher,
    })
    print(f"student checkpoint: {out / 'student.ckpt'} (eta={eta:.6g})")
    return EXIT_OK


def cmd_pseudo_label(args) -> int:
    bundle = _load_bundle(args.data)
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    eta = args.eta if args.eta else ckpt.extra.get("eta") or REFERENCE_ETA
    noise_cfg = NoiseConfig(eta=eta)
    samples = bundle.caption[: args.limit] if args.limit else bundle.caption
    n_records = 0
    with open(out / "pseudo_labels.jsonl", "w", encoding="utf-8") as fh:
        for k, sample in enumerate(samples):
            labels = generate_pseudo_labels(model, sample, bundle.table, bundle.vocab.object_lexicon)
            noise_maps, alphas = {}, {}
            if labels:
                with torch.no_grad():
                    feats = model.backbone_single(sample.image)
                    var = model.noise_variance(extract_region_features(
                        feats, regions_to_array([lab.region for lab in labels]),
                        model.cfg.roi_size, model.cfg.backbone_stride,
                    )).numpy()
                for j, lab in enumerate(labels):
                    noise_maps[lab.object] = var[j]
                    alphas[lab.object] = reliability(var[j], noise_cfg)
            record = pseudo_label_record(f"caption_{k:05d}", labels, noise_maps, alphas)
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            n_records += len(record["objects"])
            if k < args.figures:
                for entry in record["objects"]:
                    entry["mask"] = rle_decode(entry["mask_rle"], tuple(entry["mask_shape"]))
                save_pseudo_label_panel(
                    sample.image, record["objects"], out / f"panel_{k:05d}.png",
                    title=" ".join(sample.tokens),
                )
    _write_metadata(out, "pseudo-label", None, {
        "checkpoint": args.checkpoint, "data": args.data, "eta": eta,
    })
    print(f"dumped {n_records} pseudo labels across {len(samples)} samples")
    return EXIT_OK


def cmd_eval(args) -> int:
    bundle = _load_bundle(args.data)
    model = load_checkpoint(args.checkpoint).build_model()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate(model, bundle.test, args.protocol, bundle.vocab, bundle.table,
                      use_boxes=args.boxes)
    _write_json(out / "report.json", report.to_dict())
    pr_dir = out / "pr_curves"
    pr_dir.mkdir(exist_ok=True)
    for cls, (recalls, precisions) in sorted(report.pr_curves.items()):
        with open(pr_dir / f"{cls}.csv", "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["recall", "precision"])
            writer.writerows(zip(recalls, precisions))
    save_pr_curves(report.pr_curves, out / "pr_curves.png", title=args.protocol)
    _write_metadata(out, "eval", None, {
        "checkpoint": args.checkpoint, "data": args.data, "protocol": args.protocol,
    })
    print(json.dumps(report.to_dict(), sort_keys=True, indent=1))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = RunConfig.from_file(args.config)
    bundle = _load_bundle(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    strategies = args.strategies.split(",") if args.strategies else list(STRATEGIES)
    for s in strategies:
        variant_factory(s)  # validate before the expensive part

    teacher, _ = train_teacher(cfg, bundle.vocab, bundle.table, bundle.base)
    rows = []
    for strategy in strategies:
        run_cfg = cfg.replace(strategy=strategy)
        student, _, eta = train_student(
            run_cfg, teacher, bundle.vocab, bundle.table, bundle.base, bundle.caption
        )
        report = evaluate(student, bundle.test, "generalized", bundle.vocab, bundle.table)
        rows.append({
            "strategy": strategy,
            "eta": eta,
            "map_base": report.map_base,
            "map_target": report.map_target,
            "map_all": report.map_all,
        })
        print(f"{strategy:>16s}: base {report.map_base:.3f}  target {report.map_target:.3f}  "
              f"all {report.map_all:.3f}")
    with open(out / "ablation.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["strategy", "eta", "map_base", "map_target", "map_all"])
        writer.writeheader()
        writer.writerows(rows)
    _write_json(out / "ablation.json", {"rows": rows})
    save_ablation_chart(rows, out / "ablation.png")
    _write_metadata(out, "ablate", cfg, {"config": args.config, "data": args.data})
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="capseg",
        description="Caption-driven pseudo-mask distillation: data, training, evaluation.",
    )
    parser.add_argument("--jobs", type=int, default=0, metavar="N",
                        help="cap worker threads (0 keeps the runtime default)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset tree")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-teacher", help="train the teacher on base masks")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(fn=cmd_train_teacher)

    p = sub.add_parser("train-student", help="self-train the robust student")
    p.add_argument("--config", required=True)
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    p.set_defaults(fn=cmd_train_student)

    p = sub.add_parser("pseudo-label", help="dump pseudo labels with noise maps")
    p.add_argument("--checkpoint", required=True,
                   help="model checkpoint (a student checkpoint gives meaningful noise)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--eta", type=float, default=0.0,
                   help="reliability reference level (default: checkpoint's, else 0.01)")
    p.add_argument("--limit", type=int, default=0, help="only label the first N samples")
    p.add_argument("--figures", type=int, default=4, help="render panels for the first N samples")
    p.set_defaults(fn=cmd_pseudo_label)

    p = sub.add_parser("eval", help="evaluate a checkpoint under one protocol")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--protocol", required=True, choices=PROTOCOLS)
    p.add_argument("--out", required=True)
    p.add_argument("--boxes", action="store_true", help="box-mAP over tight boxes of masks")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare reweighting strategies")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strategies", default="",
                   help=f"comma-separated subset of {','.join(STRATEGIES)}")
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    if args.jobs > 0:
        torch.set_num_threads(args.jobs)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
