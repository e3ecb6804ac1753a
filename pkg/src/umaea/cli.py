"""Command-line interface.

Subcommands: prepare (parse raw files into a canonical dataset directory),
gen-umvm (image-availability split manifests), train (staged pipeline),
eval (metrics report from a checkpoint), sweep (train + eval across
rates), report (merge reports into a CSV).

Run configuration is a flat ``key = value`` text file ('#' comments);
unknown keys are rejected. A single global seed fans out into fixed
sub-streams: split = seed+1, imputation = seed+2, init = seed+3,
training = seed+4.

Heavy imports happen inside the command handlers so the UMAEA_THREADS
cap can land before the numerics stack loads.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from pathlib import Path

# config keys: name -> (default, parser, help). Paths and mode flags ride
# alongside the training hyperparameters; None defaults are required keys.
def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_promote(text: str) -> float:
    return math.inf if text.strip().lower() in ("inf", "infinity") else float(text)


CONFIG_SPEC: dict[str, tuple] = {
    "data_dir": (None, str, "prepared dataset directory (required)"),
    "out_dir": (None, str, "run output directory (required)"),
    "split_manifest": ("", str, "optional image-availability split manifest"),
    "dataset_name": ("custom", str, "label recorded in reports"),
    "seed": (0, int, "global seed; sub-streams derive at fixed offsets"),
    "precision": ("float32", str, "float32 (training) or float64 (verification)"),
    "dim": (300, int, "shared embedding dimension"),
    "relation_bow_dim": (1000, int, "relation bag-of-words width"),
    "attribute_bow_dim": (1000, int, "attribute bag-of-words width"),
    "gat_layers": (2, int, "graph attention layers"),
    "gat_heads": (2, int, "graph attention heads"),
    "leaky_slope": (0.2, float, "attention score leaky-relu slope"),
    "mhca_heads": (1, int, "cross-modal attention heads"),
    "ffn_multiplier": (4, int, "feed-forward inner width multiplier"),
    "temperature": (0.1, float, "contrastive temperature"),
    "stage1_epochs": (250, int, "stage-1 epochs"),
    "stage2_1_epochs": (50, int, "stage-2-1 epochs (imagination module trains)"),
    "stage2_2_epochs": (100, int, "stage-2-2 epochs (main model refines)"),
    "batch_size": (3500, int, "pairs per batch"),
    "learning_rate": (5e-4, float, "peak learning rate"),
    "weight_decay": (0.01, float, "decoupled weight decay"),
    "warmup_fraction": (0.15, float, "fraction of steps spent warming up"),
    "grad_accumulation": (1, int, "micro-batches per optimizer step"),
    "holdout_fraction": (0.05, float, "train-seed slice watched for early stopping"),
    "early_stop_patience": (20, int, "stale holdout checks before stopping (0 = off)"),
    "iterative": (False, _parse_bool, "enable probation bootstrapping"),
    "propose_every": (5, int, "epochs between proposal rounds"),
    "promote_after": (10.0, _parse_promote, "consecutive rounds before promotion ('inf' disables)"),
    "detach_confidence": (False, _parse_bool, "block gradients through pair confidences"),
    "mse_reconstruction": (False, _parse_bool, "squared error instead of absolute"),
}


def _config_help() -> str:
    lines = ["config file keys (key = value per line, '#' comments):"]
    for key, (default, _, help_text) in CONFIG_SPEC.items():
        shown = "required" if default is None else f"default {default}"
        lines.append(f"  {key:<22} {help_text} ({shown})")
    return "\n".join(lines)


class ConfigError(ValueError):
    pass


def parse_config_file(path: str | Path) -> dict:
    values = {key: default for key, (default, _, _) in CONFIG_SPEC.items()}
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, raw = stripped.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in CONFIG_SPEC:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            if key in seen:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            seen.add(key)
            parser = CONFIG_SPEC[key][1]
            try:
                values[key] = parser(raw)
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    for key in ("data_dir", "out_dir"):
        if values[key] is None:
            raise ConfigError(f"{path}: missing required key {key!r}")
    return values


def _train_config(values: dict):
    from .trainer import TrainConfig
    return TrainConfig(
        d=values["dim"], d_r=values["relation_bow_dim"],
        d_a=values["attribute_bow_dim"], gat_layers=values["gat_layers"],
        gat_heads=values["gat_heads"], leaky_slope=values["leaky_slope"],
        mhca_heads=values["mhca_heads"], ffn_multiplier=values["ffn_multiplier"],
        tau=values["temperature"], stage1_epochs=values["stage1_epochs"],
        stage2_1_epochs=values["stage2_1_epochs"],
        stage2_2_epochs=values["stage2_2_epochs"],
        batch_size=values["batch_size"], learning_rate=values["learning_rate"],
        weight_decay=values["weight_decay"],
        warmup_fraction=values["warmup_fraction"],
        grad_accumulation=values["grad_accumulation"],
        holdout_fraction=values["holdout_fraction"],
        early_stop_patience=values["early_stop_patience"],
        iterative=values["iterative"], propose_every=values["propose_every"],
        promote_after=values["promote_after"],
        detach_confidence=values["detach_confidence"],
        mse_reconstruction=values["mse_reconstruction"],
        rng_seed=values["seed"], precision=values["precision"])


# ---------------------------------------------------------------------------
# commands

def _content_hash(paths: list[Path]) -> str:
    digest = hashlib.sha256()
    for p in sorted(paths):
        digest.update(p.name.encode())
        digest.update(p.read_bytes())
    return digest.hexdigest()


def cmd_prepare(args) -> int:
    from .kgdata import (load_kg_pair, load_pairs, load_visual_features,
                         split_seeds, write_kg_files, write_pairs,
                         write_visual_features)

    kg1, kg2 = load_kg_pair((args.kg1_triples, args.kg2_triples),
                            (args.kg1_attrs, args.kg2_attrs),
                            (args.kg1_mask, args.kg2_mask))
    x_v1, _ = load_visual_features(args.kg1_features, kg1)
    x_v2, _ = load_visual_features(args.kg2_features, kg2)
    if x_v1.shape[1] != x_v2.shape[1]:
        raise ConfigError(f"visual dimensions differ between sides: "
                          f"{x_v1.shape[1]} vs {x_v2.shape[1]}")
    pairs = load_pairs(args.pairs)
    for a, b in pairs:
        if not (0 <= a < kg1.num_entities and 0 <= b < kg2.num_entities):
            raise ConfigError(f"alignment pair ({a},{b}) out of entity range")
    seeds = split_seeds(pairs, args.rsa, args.seed + 1)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_kg_files(kg1, out / "kg1.triples", out / "kg1.attrs", out / "kg1.mask")
    write_kg_files(kg2, out / "kg2.triples", out / "kg2.attrs", out / "kg2.mask")
    write_visual_features(x_v1, kg1.image_mask, out / "kg1.features")
    write_visual_features(x_v2, kg2.image_mask, out / "kg2.features")
    write_pairs(pairs, out / "pairs.all")
    write_pairs(seeds.train_pairs, out / "pairs.train")
    write_pairs(seeds.test_pairs, out / "pairs.test")

    data_files = sorted(out.glob("kg*.*")) + sorted(out.glob("pairs.*"))
    n_total = kg1.num_entities + kg2.num_entities
    n_imaged = int(kg1.image_mask.sum() + kg2.image_mask.sum())
    manifest = {
        "name": args.name,
        "entities": [kg1.num_entities, kg2.num_entities],
        "triples": [len(kg1.triples), len(kg2.triples)],
        "d_v": int(x_v1.shape[1]),
        "raw_image_ratio": n_imaged / n_total,
        "seed_ratio": args.rsa,
        "seed": args.seed,
        "train_pairs": len(seeds.train_pairs),
        "test_pairs": len(seeds.test_pairs),
        "content_hash": _content_hash(data_files),
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    print(f"prepared {out} (hash {manifest['content_hash'][:12]})")
    return 0


def cmd_gen_umvm(args) -> int:
    from .kgdata import load_kg_pair
    from .umvm import generate_umvm_split, standard_grid

    data = Path(args.data)
    kg1, kg2 = load_kg_pair((data / "kg1.triples", data / "kg2.triples"),
                            (data / "kg1.attrs", data / "kg2.attrs"),
                            (data / "kg1.mask", data / "kg2.mask"))
    if args.grid:
        rates = standard_grid(args.dataset)
    elif args.rimg:
        rates = [float(r) for r in args.rimg.split(",")]
    else:
        raise ConfigError("one of --rimg or --grid is required")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for rate in rates:
        manifest = generate_umvm_split((kg1, kg2),
                                       (kg1.image_mask, kg2.image_mask),
                                       rate, args.seed, dataset_name=args.dataset)
        path = out / f"umvm_{rate:g}.json"
        manifest.save(path)
        written.append(path)
    print(f"wrote {len(written)} split manifest(s) to {out}")
    return 0


def _load_split(path_text: str):
    from .umvm import SplitManifest
    return SplitManifest.load(path_text) if path_text else None


def _report_meta(values: dict, split, stage: str) -> dict:
    return {
        "dataset": values["dataset_name"],
        "r_img": split.realized_ratio if split is not None else None,
        "stage": stage,
        "seed": values["seed"],
    }


def cmd_train(args) -> int:
    from .trainer import (STAGE1, STAGE2_1, STAGE2_2, StageOrderError,
                          Trainer, load_training_data)

    values = parse_config_file(args.config)
    if args.iterative:
        values["iterative"] = True
    config = _train_config(values)
    split = _load_split(values["split_manifest"])
    data = load_training_data(values["data_dir"], config, split)
    trainer = Trainer(data, config)
    out = Path(values["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    extras = {"paths": {"data_dir": values["data_dir"],
                        "split_manifest": values["split_manifest"],
                        "dataset_name": values["dataset_name"]}}

    history: list[dict] = []
    want_stage1 = args.stage in ("1", "all")
    want_stage2 = args.stage in ("2", "all")
    last_stage = STAGE1

    if want_stage1:
        if args.resume and (out / STAGE1 / "params.txt").exists():
            trainer.load_stage(out / STAGE1)
        else:
            history += trainer.run_stage1()
            trainer.save_stage(STAGE1, out, history, extras)
    if want_stage2:
        if not trainer.stage_done.get(STAGE1):
            if (out / STAGE1 / "params.txt").exists():
                trainer.load_stage(out / STAGE1)
            else:
                raise StageOrderError(
                    f"stage 2 needs a stage-1 checkpoint under {out / STAGE1}")
        stage2_history = trainer.run_stage2()
        history += stage2_history
        trainer.save_stage(STAGE2_1, out,
                           [h for h in stage2_history if h["stage"] == STAGE2_1],
                           extras)
        trainer.save_stage(STAGE2_2, out,
                           [h for h in stage2_history if h["stage"] == STAGE2_2],
                           extras)
        last_stage = STAGE2_2

    with open(out / "epochs.jsonl", "w", encoding="utf-8") as fh:
        for record in trainer.epoch_log:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    report = trainer.final_report(_report_meta(values, split, last_stage))
    report.save(out / "report.json")
    print(f"trained through {last_stage}; report at {out / 'report.json'}")
    return 0


def cmd_eval(args) -> int:
    from .trainer import Trainer, load_training_data

    ckpt = Path(args.checkpoint)
    manifest = json.loads((ckpt / "manifest.json").read_text(encoding="utf-8"))
    raw = dict(manifest["config"])
    if raw.get("promote_after") == "inf":
        raw["promote_after"] = math.inf
    from .trainer import TrainConfig
    config = TrainConfig(**raw)
    paths = manifest.get("paths", {})
    split_path = args.split if args.split else paths.get("split_manifest", "")
    split = _load_split(split_path)
    data = load_training_data(paths["data_dir"], config, split)
    trainer = Trainer(data, config)
    trainer.load_stage(ckpt)
    values = {"dataset_name": paths.get("dataset_name", "custom"),
              "seed": config.rng_seed}
    report = trainer.final_report(_report_meta(values, split, manifest["stage"]))
    report.save(args.out)
    print(f"report at {args.out}")
    return 0


def cmd_sweep(args) -> int:
    from .kgdata import load_kg_pair
    from .trainer import SEED_SPLIT
    from .umvm import generate_umvm_split, standard_grid

    values = parse_config_file(args.config)
    if args.grid:
        rates = standard_grid(values["dataset_name"])
    elif args.rates:
        rates = [float(r) for r in args.rates.split(",")]
    else:
        raise ConfigError("one of --rates or --grid is required")

    data_dir = Path(values["data_dir"])
    kg1, kg2 = load_kg_pair((data_dir / "kg1.triples", data_dir / "kg2.triples"),
                            (data_dir / "kg1.attrs", data_dir / "kg2.attrs"),
                            (data_dir / "kg1.mask", data_dir / "kg2.mask"))
    out_root = Path(args.out)
    reports = []
    for rate in rates:
        split = generate_umvm_split((kg1, kg2), (kg1.image_mask, kg2.image_mask),
                                    rate, values["seed"] + SEED_SPLIT,
                                    dataset_name=values["dataset_name"])
        rate_dir = out_root / f"r{rate:g}"
        rate_dir.mkdir(parents=True, exist_ok=True)
        split_path = rate_dir / "split.json"
        split.save(split_path)
        rate_values = dict(values)
        rate_values["split_manifest"] = str(split_path)
        rate_values["out_dir"] = str(rate_dir)
        cfg_path = rate_dir / "run.cfg"
        with open(cfg_path, "w", encoding="utf-8") as fh:
            for key, value in rate_values.items():
                if value is None:
                    continue
                fh.write(f"{key} = {value}\n")
        train_args = argparse.Namespace(config=str(cfg_path), stage=args.stage,
                                        iterative=args.iterative, resume=False)
        cmd_train(train_args)
        reports.append(rate_dir / "report.json")
    print(f"swept {len(rates)} rate(s); reports: "
          + " ".join(str(r) for r in reports))
    return 0


def cmd_report(args) -> int:
    from .evaluation import CSV_HEADER, MetricsReport, report_csv_rows

    rows = [CSV_HEADER]
    for run in args.runs:
        rows.extend(report_csv_rows(MetricsReport.load(run)))
    Path(args.csv).write_text("\n".join(rows) + "\n", encoding="utf-8")
    print(f"wrote {len(rows) - 1} rows to {args.csv}")
    return 0


# ---------------------------------------------------------------------------
# wiring

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(
        prog="umaea",
        description="multi-modal entity alignment pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", formatter_class=fmt,
                       help="parse raw files into a canonical dataset directory")
    p.add_argument("--kg1-triples", required=True)
    p.add_argument("--kg2-triples", required=True)
    p.add_argument("--kg1-attrs", required=True)
    p.add_argument("--kg2-attrs", required=True)
    p.add_argument("--kg1-features", required=True)
    p.add_argument("--kg2-features", required=True)
    p.add_argument("--kg1-mask", required=True)
    p.add_argument("--kg2-mask", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--rsa", type=float, default=0.3,
                   help="train fraction of the aligned pairs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default="custom", help="dataset label")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("gen-umvm", formatter_class=fmt,
                       help="emit image-availability split manifests")
    p.add_argument("--data", required=True, help="prepared dataset directory")
    p.add_argument("--dataset", default="synthetic",
                   help="dataset name (required for --grid)")
    p.add_argument("--rimg", default="", help="comma-separated rates")
    p.add_argument("--grid", action="store_true",
                   help="use the dataset's standard rate grid")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_umvm)

    p = sub.add_parser("train", formatter_class=fmt,
                       help="run the staged training pipeline",
                       epilog=_config_help())
    p.add_argument("--config", required=True, help="run configuration file")
    p.add_argument("--stage", choices=("1", "2", "all"), default="all")
    p.add_argument("--iterative", action="store_true",
                   help="force iterative mode on")
    p.add_argument("--resume", action="store_true",
                   help="reuse existing stage checkpoints in out_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", formatter_class=fmt,
                       help="evaluate a stage checkpoint")
    p.add_argument("--checkpoint", required=True, help="stage directory")
    p.add_argument("--split", default="", help="override split manifest")
    p.add_argument("--out", required=True, help="report JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", formatter_class=fmt,
                       help="train + eval across availability rates")
    p.add_argument("--config", required=True)
    p.add_argument("--rates", default="", help="comma-separated rates")
    p.add_argument("--grid", action="store_true")
    p.add_argument("--stage", choices=("1", "2", "all"), default="all")
    p.add_argument("--iterative", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", formatter_class=fmt,
                       help="merge metric reports into a CSV")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--csv", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def _apply_thread_cap() -> None:
    cap = os.environ.get("UMAEA_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def main(argv=None) -> int:
    _apply_thread_cap()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surfaced with file/line context where available
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
