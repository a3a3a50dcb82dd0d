"""Batch command line: tile | split | train | eval | synth | report.

Every command is deterministic given its config and seed; each one writes
its fully resolved config beside its outputs so a rerun from that file is
byte-identical. Relative output paths are resolved against the
RUMEXDA_OUT_ROOT environment variable when it is set.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import config as cfgmod
from .adaptation import AdaptationConfig, read_history_jsonl
from .errors import ConfigError, DataError, ShapeError
from .evaluation import (
    confusion_from_predictions,
    format_report_table,
    report_from_counts,
    select_model_epoch,
    sigma_epochs,
)
from .experiment import run_strategy
from .nn import ModelConfig, load_checkpoint, save_checkpoint
from .synthdata import default_benchmark, generate, read_corpus_domains, write_corpus
from .tiling import (
    ManifestEntry,
    SplitManifest,
    build_splits,
    label_counts,
    image_files,
    read_annotations,
    read_manifest,
    read_pnm,
    tile_image,
    write_manifest,
)

ERRORS = (ConfigError, DataError, ShapeError, OSError)


def _out_path(path: str) -> Path:
    p = Path(path)
    root = os.environ.get("RUMEXDA_OUT_ROOT")
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _load_config(args) -> cfgmod.RunConfig:
    if getattr(args, "config", None):
        return cfgmod.read_config(args.config)
    return cfgmod.RunConfig()


def _apply_overrides(config: cfgmod.RunConfig, args, mapping: dict[str, tuple[str, str]]) -> None:
    for arg_name, (section, attr) in mapping.items():
        value = getattr(args, arg_name, None)
        if value is not None:
            setattr(getattr(config, section), attr, value)


# ----------------------------------------------------------------------
# tile


def _domain_lookup(args) -> dict[str, str]:
    if args.domain_map:
        table = {}
        with open(args.domain_map, newline="") as fh:
            for row in csv.reader(fh):
                if len(row) != 2:
                    raise DataError(f"{args.domain_map}: expected image_id,domain_id rows")
                table[row[0].strip()] = row[1].strip()
        return table
    return {}


def cmd_tile(args) -> int:
    config = _load_config(args)
    _apply_overrides(config, args, {
        "tile_size": ("tiling", "tile_size"),
        "r_threshold": ("tiling", "r_threshold"),
        "positive_class": ("tiling", "positive_class"),
        "combine": ("tiling", "combine"),
    })
    tc = config.tiling
    boxes = read_annotations(args.annotations)
    positives = [b for b in boxes if b.class_name == tc.positive_class]
    by_image: dict[str, list] = {}
    for b in positives:
        by_image.setdefault(b.image_id, []).append(b)

    images = image_files(args.images_dir)
    if not images:
        print(f"error: no PGM/PPM images under {args.images_dir}", file=sys.stderr)
        return 1
    known_ids = {image_id for image_id, _ in images}
    missing = sorted({b.image_id for b in positives} - known_ids)
    failures = list(missing)
    for image_id in missing:
        print(f"error: annotation references missing image {image_id!r}", file=sys.stderr)

    domain_map = _domain_lookup(args)

    def tile_one(item):
        image_id, path = item
        try:
            image = read_pnm(path)
            height, width = image.shape[:2]
            records = tile_image(
                image_id, width, height, by_image.get(image_id, []),
                side=tc.tile_size, r_th=tc.r_threshold, combine=tc.combine,
            )
            return image_id, records, None
        except Exception as exc:  # per-image failure keeps the run going
            return image_id, [], f"{type(exc).__name__}: {exc}"

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(tile_one, images))
    else:
        results = [tile_one(item) for item in images]

    entries = []
    for image_id, records, error in sorted(results, key=lambda r: r[0]):
        if error is not None:
            failures.append(image_id)
            print(f"error: {image_id}: {error}", file=sys.stderr)
            continue
        domain = domain_map.get(image_id, args.domain)
        entries.extend(ManifestEntry(rec, "none", domain) for rec in records)

    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_manifest(SplitManifest(entries), out)
    cfgmod.write_config(config, out.with_suffix(out.suffix + ".config.txt"))
    counts = label_counts(e.record for e in entries)
    print(
        f"tiled {len(results) - len([f for f in failures if f not in missing])} images -> "
        f"{len(entries)} tiles (background={counts[0]} rumex={counts[1]} unclear={counts[2]})"
    )
    return 1 if failures else 0


# ----------------------------------------------------------------------
# split


def cmd_split(args) -> int:
    config = _load_config(args)
    _apply_overrides(config, args, {
        "mode": ("split", "mode"),
        "val_fraction": ("split", "val_fraction"),
        "seed": ("split", "seed"),
        "positive_class": ("tiling", "positive_class"),
    })
    sc = config.split
    manifest = read_manifest(args.manifest)
    boxes = [
        b for b in read_annotations(args.annotations)
        if b.class_name == config.tiling.positive_class
    ]
    by_image: dict[str, list] = {}
    for b in boxes:
        by_image.setdefault(b.image_id, []).append(b)

    from .tiling import TileRecord, overlap_ratio

    records = []
    subset_of = {}
    for e in manifest.entries:
        r = e.record
        plants = sorted(
            {
                b.plant_id
                for b in by_image.get(r.image_id, [])
                if b.plant_id and overlap_ratio(b, r.x, r.y, r.side) > 0.0
            }
        )
        records.append(TileRecord(r.image_id, r.x, r.y, r.side, r.label, r.overlap,
                                  r.pass_corner, tuple(plants)))
        subset_of[r.image_id] = e.domain_id

    split_manifest = build_splits(records, subset_of, sc.val_fraction, sc.mode, sc.seed)
    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_manifest(split_manifest, out)
    cfgmod.write_config(config, out.with_suffix(out.suffix + ".config.txt"))
    n_val = sum(1 for e in split_manifest.entries if e.split == "val")
    print(f"split {len(split_manifest)} tiles: {len(split_manifest) - n_val} train, {n_val} val")
    return 0


# ----------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    config = _load_config(args)
    _apply_overrides(config, args, {
        "sources": ("synth", "sources"),
        "dim": ("synth", "dim"),
        "samples": ("synth", "samples"),
        "positive_fraction": ("synth", "positive_fraction"),
        "target_shift": ("synth", "target_shift"),
        "noise_sigma": ("synth", "noise_sigma"),
        "val_fraction": ("synth", "val_fraction"),
        "seed": ("synth", "seed"),
    })
    sc = config.synth
    source_specs, target_spec = default_benchmark(
        n_sources=sc.sources,
        dim=sc.dim,
        n_samples=sc.samples,
        positive_fraction=sc.positive_fraction,
        target_shift=sc.target_shift,
        noise_sigma=sc.noise_sigma,
    )
    corpus = generate(source_specs, target_spec, seed=sc.seed, val_fraction=sc.val_fraction)
    out = _out_path(args.out)
    write_corpus(corpus, out)
    cfgmod.write_config(config, out / "config.txt")
    print(
        f"wrote corpus with {len(corpus.sources)} sources x {sc.samples} samples "
        f"(dim={sc.dim}) to {out}"
    )
    return 0


# ----------------------------------------------------------------------
# train


def _model_config_from(config: cfgmod.RunConfig, seed: int) -> ModelConfig:
    m = config.model
    return ModelConfig(
        input_dim=m.input_dim,
        hidden_dims=tuple(m.hidden_dims),
        feature_dim=m.feature_dim,
        unfreeze=m.unfreeze,
        adaptation=m.adaptation,
        lora_rank=m.lora_rank,
        lora_alpha=m.lora_alpha,
        dropout=m.dropout,
        seed=seed,
    )


def _training_config_from(config: cfgmod.RunConfig) -> AdaptationConfig:
    t = config.training
    return AdaptationConfig(
        strategy=t.strategy,
        lam=t.lam,
        epochs=t.epochs,
        warmup=t.warmup,
        batch_size=t.batch_size,
        lr=t.lr,
        optimizer=t.optimizer,
        seed=t.seed,
        class_weights=t.class_weights,
    )


def cmd_train(args) -> int:
    config = _load_config(args)
    _apply_overrides(config, args, {
        "strategy": ("training", "strategy"),
        "lam": ("training", "lam"),
        "epochs": ("training", "epochs"),
        "warmup": ("training", "warmup"),
        "batch_size": ("training", "batch_size"),
        "lr": ("training", "lr"),
        "optimizer": ("training", "optimizer"),
        "seed": ("training", "seed"),
        "input_dim": ("model", "input_dim"),
        "feature_dim": ("model", "feature_dim"),
        "unfreeze": ("model", "unfreeze"),
        "adaptation": ("model", "adaptation"),
        "lora_rank": ("model", "lora_rank"),
    })
    if args.hidden_dims is not None:
        config.model.hidden_dims = tuple(int(v) for v in args.hidden_dims.split(","))
    if config.model.adaptation == "lora" and args.unfreeze is None:
        config.model.unfreeze = 0  # LoRA freezes the base; only an explicit flag conflicts

    sources, targets = read_corpus_domains(args.corpus)
    if len(targets) != 1:
        raise ConfigError(f"training expects exactly one target domain, found {len(targets)}")
    target = targets[0]
    train_cfg = _training_config_from(config)
    train_cfg.validate()
    if train_cfg.strategy == "m3sda_beta" and len(sources) < 2:
        raise ConfigError(
            f"m3sda_beta needs at least 2 source domains, corpus has {len(sources)}"
        )
    if train_cfg.epochs <= train_cfg.warmup:
        raise ConfigError(
            f"epochs={train_cfg.epochs} must exceed the warmup of {train_cfg.warmup} "
            "for model selection"
        )
    dim = target.dim
    if config.model.input_dim != dim:
        config.model.input_dim = dim  # resolved config records the actual dim
    model_cfg = _model_config_from(config, seed=train_cfg.seed)

    bundle, history = run_strategy(
        sources, target, model_cfg, train_cfg, eval_targets=[target], keep_snapshots=True
    )
    selected = select_model_epoch(history.val_f1_series(), train_cfg.warmup)
    bundle.restore(history.snapshots[selected - 1])

    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.write_config(config, out / "config.txt")
    history.to_jsonl(out / "history.jsonl")
    save_checkpoint(bundle, out / "checkpoint.json")
    rec = history.records[selected - 1]
    print(
        f"trained {train_cfg.strategy} for {train_cfg.epochs} epochs; "
        f"selected epoch {selected} (val F1={rec.source_val_f1:.4f}, "
        f"median target F1={rec.median_target_f1:.4f})"
    )
    return 0


# ----------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    config = _load_config(args)
    bundle = load_checkpoint(args.checkpoint)
    sources, targets = read_corpus_domains(args.corpus)
    flights = targets if not args.include_sources else sources + targets
    dim = flights[0].dim
    if bundle.config.input_dim != dim:
        raise ShapeError(
            f"checkpoint expects input_dim={bundle.config.input_dim} "
            f"but the corpus has dim={dim}"
        )
    from .adaptation import predict_labels

    counts = {
        ds.domain_id: confusion_from_predictions(ds.labels, predict_labels(bundle, ds.features))
        for ds in flights
    }
    report = report_from_counts(counts)

    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.write_config(config, out / "config.txt")
    (out / "report.txt").write_text(format_report_table(report))
    with open(out / "flights.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["domain_id", "tp", "fp", "fn", "tn", "precision", "recall", "f1", "included"])
        for fl in report.flights:
            c = fl.counts
            writer.writerow([
                fl.domain_id, c.tp, c.fp, c.fn, c.tn,
                repr(fl.precision), repr(fl.recall), repr(fl.f1), int(fl.included),
            ])
    from .nn import trainable_parameter_count

    summary = {
        "median_f1": report.median_f1,
        "mean_f1": report.mean_f1,
        "sigma_flights": report.sigma_f1,
        "trainable_parameters": trainable_parameter_count(bundle),
        "strategy_pairs": bundle.config.classifier_pairs,
    }
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True) + "\n")
    print(format_report_table(report), end="")
    return 0


# ----------------------------------------------------------------------
# report


def cmd_report(args) -> int:
    config = _load_config(args)
    if args.window is not None:
        config.evaluation.window = args.window
    if args.warmup is not None:
        config.training.warmup = args.warmup
    history = read_history_jsonl(args.history)
    if not history.records:
        raise DataError(f"{args.history}: empty history")
    selected = select_model_epoch(history.val_f1_series(), config.training.warmup)
    sigma = sigma_epochs(history.median_target_series(), config.evaluation.window)
    rec = history.records[selected - 1]

    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.write_config(config, out / "config.txt")
    with open(out / "f1_vs_epoch.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "domain_id", "f1"])
        for r in history.records:
            for domain_id in sorted(r.target_f1):
                writer.writerow([r.epoch, domain_id, repr(r.target_f1[domain_id])])
    with open(out / "f1_vs_params.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["trainable_parameters", "strategy", "median_f1", "sigma_epochs"])
        writer.writerow([
            history.trainable_count, history.strategy,
            repr(rec.median_target_f1) if rec.median_target_f1 is not None else "none",
            repr(sigma),
        ])
    lines = [
        f"selected_epoch = {selected}",
        f"source_val_f1 = {rec.source_val_f1}",
        f"median_target_f1 = {rec.median_target_f1}",
        f"sigma_epochs = {sigma} (window={config.evaluation.window})",
    ]
    (out / "selection.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


# ----------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rumexda", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tile", help="convert box annotations into a tile manifest")
    p.add_argument("--annotations", required=True)
    p.add_argument("--images-dir", required=True)
    p.add_argument("--out", required=True, help="manifest file to write")
    p.add_argument("--config")
    p.add_argument("--tile-size", dest="tile_size", type=int)
    p.add_argument("--r-threshold", dest="r_threshold", type=float)
    p.add_argument("--positive-class", dest="positive_class")
    p.add_argument("--combine", choices=["max", "union"])
    p.add_argument("--domain", default="d0", help="domain id for images not in --domain-map")
    p.add_argument("--domain-map", help="csv of image_id,domain_id pairs")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("split", help="assign leakage-safe train/val splits to a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--mode", choices=["pooled", "per_subset"])
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--positive-class", dest="positive_class")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("synth", help="generate a synthetic covariate-shift corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--sources", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--positive-fraction", dest="positive_fraction", type=float)
    p.add_argument("--target-shift", dest="target_shift", type=float)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one strategy on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--strategy", choices=["vanilla", "m2s2da", "m3sda_beta"])
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=["sgd", "adam"])
    p.add_argument("--seed", type=int)
    p.add_argument("--hidden-dims", dest="hidden_dims")
    p.add_argument("--input-dim", dest="input_dim", type=int)
    p.add_argument("--feature-dim", dest="feature_dim", type=int)
    p.add_argument("--unfreeze", type=int)
    p.add_argument("--adaptation", choices=["none", "lora"])
    p.add_argument("--lora-rank", dest="lora_rank", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint per target flight")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--include-sources", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="model selection and plot records from a history log")
    p.add_argument("--history", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--window", type=int)
    p.add_argument("--warmup", type=int)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
