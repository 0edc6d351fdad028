"""Operator command line: generation, training, evaluation, prediction,
attention export.

Exit codes: 0 success, 1 validation failure (bad flags, bad config, bad
data), 2 runtime failure.  Primary outputs go to files or stdout; logs go
to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path


from .config import ABLATION_CHOICES, ConfigError, POOLING_CHOICES, RunConfig
from .data import DatasetError, load_dataset, split_dataset, write_dataset
from .graphs import GraphValidationError
from .model import (
    CheckpointError,
    EmissionModel,
    ForwardRecord,
    fit_normalization,
    load_checkpoint,
    prepare_dataset,
    refresh_region_cache,
    save_checkpoint,
)
from .synth import SynthParams, generate_synthetic
from .tensor import no_grad
from .train import evaluate, train

logger = logging.getLogger("roadcarbon")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

VALIDATION_ERRORS = (
    ConfigError,
    DatasetError,
    GraphValidationError,
    CheckpointError,
    ValueError,
)


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage by default; the contract here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_VALIDATION)


def build_parser() -> _Parser:
    parser = _Parser(
        prog="roadcarbon",
        description="Regional on-road carbon emission regression over "
        "hierarchical road/OD graphs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", help="generate a synthetic dataset directory")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--regions", type=int, default=8)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--grid-side", type=int, default=4)
    g.add_argument("--communities", type=int, default=8)
    g.add_argument("--noise-std", type=float, default=0.1)
    g.add_argument("--gravity-gamma", type=float, default=2.0)
    g.add_argument("--k-nearest", type=int, default=4)
    g.add_argument("--extent-km", type=float, default=20.0)
    g.add_argument("--deletion-frac", type=float, default=0.2)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True, help="flat key=value config file")
    t.add_argument("--ablation", choices=ABLATION_CHOICES)
    t.add_argument("--data", dest="data_dir", help="override data_dir")
    t.add_argument("--out", dest="out_dir", help="override out_dir")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--hidden", type=int)
    t.add_argument("--layers", type=int)
    t.add_argument("--layers-road", type=int, dest="layers_road")
    t.add_argument("--pooling", choices=POOLING_CHOICES)

    e = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "val", "test"), required=True)

    p = sub.add_parser("predict", help="write per-region predictions as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    d = sub.add_parser(
        "dump-attention", help="export per-region fusion weights as CSV"
    )
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--out", required=True)
    return parser


def _fmt(x: float) -> str:
    return repr(float(x))


def cmd_gen_synth(args) -> int:
    params = SynthParams(
        n_regions=args.regions,
        grid_side=args.grid_side,
        communities=args.communities,
        gravity_gamma=args.gravity_gamma,
        k_nearest_regions=args.k_nearest,
        region_extent_km=args.extent_km,
        edge_deletion_frac=args.deletion_frac,
        noise_std=args.noise_std,
        seed=args.seed,
    )
    params.validate()
    dataset = generate_synthetic(params)
    out = Path(args.out)
    write_dataset(dataset, out)
    lines = []
    for f in fields(SynthParams):
        value = getattr(params, f.name)
        if isinstance(value, dict):
            continue
        lines.append(f"{f.name}={_fmt(value) if isinstance(value, float) else value}")
    (out / "synth_params.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info("wrote %d regions to %s", params.n_regions, out)
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = {
        key: getattr(args, key)
        for key in (
            "ablation",
            "data_dir",
            "out_dir",
            "seed",
            "epochs",
            "patience",
            "lr",
            "batch_size",
            "hidden",
            "layers",
            "layers_road",
            "pooling",
        )
    }
    config = RunConfig.from_file(args.config).with_overrides(**overrides).validate()
    if not config.data_dir:
        raise ConfigError("data_dir must be set (config file or --data)")

    dataset = load_dataset(config.data_dir)
    splits = split_dataset(dataset, config.fractions, config.seed)
    stats = fit_normalization(dataset, splits[0])
    model = EmissionModel(config, stats)
    prepared = prepare_dataset(dataset, stats, config.min_flow, hops=config.layers)
    result = train(model, prepared, splits, config)

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config.to_file(out_dir / "config.txt")
    with open(out_dir / "metrics.jsonl", "w", encoding="utf-8") as fh:
        for entry in result.epoch_log:
            fh.write(json.dumps(entry) + "\n")
    save_checkpoint(model, out_dir / "checkpoint.json")
    summary = {
        "best_epoch": result.best_epoch,
        "best_val_r2": result.best_val_r2,
        "epochs_run": len(result.epoch_log),
        "steps": result.steps,
        "cache_refreshes": result.cache_refreshes,
    }
    (out_dir / "train_summary.json").write_text(json.dumps(summary), encoding="utf-8")
    print(json.dumps(summary))
    return EXIT_OK


def _load_for_inference(checkpoint_path: str, data_dir: str):
    model = load_checkpoint(checkpoint_path)
    if model.stats is None:
        raise CheckpointError("checkpoint carries no normalization statistics")
    dataset = load_dataset(data_dir)
    prepared = prepare_dataset(dataset, model.stats, model.config.min_flow, hops=model.config.layers)
    cache = refresh_region_cache(model, prepared, epoch=0) if model.use_region else None
    return model, dataset, prepared, cache


def cmd_eval(args) -> int:
    model, dataset, prepared, cache = _load_for_inference(args.checkpoint, args.data)
    splits = split_dataset(dataset, model.config.fractions, model.config.seed)
    region_ids = dict(zip(("train", "val", "test"), splits))[args.split]
    norm, raw = evaluate(model, prepared, region_ids, cache)
    payload = {
        "split": args.split,
        "n_regions": len(region_ids),
        "r2": norm.r2,
        "mae": norm.mae,
        "rmse": norm.rmse,
        "raw_r2": raw.r2,
        "raw_mae": raw.mae,
        "raw_rmse": raw.rmse,
    }
    print(json.dumps(payload))
    return EXIT_OK


def cmd_predict(args) -> int:
    model, dataset, prepared, cache = _load_for_inference(args.checkpoint, args.data)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["region_id", "prediction_raw", "prediction_normalized"])
        with no_grad():
            for region_id in prepared.region_ids:
                z = float(model.predict_region(prepared, region_id, cache).values[0, 0])
                writer.writerow(
                    [region_id, _fmt(prepared.stats.denormalize_label(z)), _fmt(z)]
                )
    logger.info("wrote predictions for %d regions to %s", len(prepared.region_ids), args.out)
    return EXIT_OK


def _beta_columns(records, tags_present) -> dict[str, float]:
    """Average fusion weights per tag over layers and nodes of one site."""
    sums = {tag: 0.0 for tag in tags_present}
    count = 0
    for rec in records:
        beta = rec.fusion.beta
        for j, tag in enumerate(rec.fusion.tags):
            sums[tag] += float(beta[:, j].mean())
        count += 1
    if count == 0:
        return {}
    return {tag: sums[tag] / count for tag in tags_present}


def cmd_dump_attention(args) -> int:
    model, dataset, prepared, cache = _load_for_inference(args.checkpoint, args.data)
    header = [
        "region_id",
        "beta_rn_community",
        "beta_od_community",
        "beta_rn_region",
        "beta_od_region",
        "beta_intra",
        "beta_inter",
    ]
    tags = []
    if model.use_spatial:
        tags.append("rn")
    if model.use_od:
        tags.append("od")

    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        with no_grad():
            for region_id in prepared.region_ids:
                record = ForwardRecord()
                model.predict_region(prepared, region_id, cache, record)
                row = {key: "" for key in header}
                row["region_id"] = region_id

                community = _beta_columns(record.community, tags)
                for tag, value in community.items():
                    row[f"beta_{tag}_community"] = _fmt(value)

                if record.region:
                    t = record.region_target_idx
                    sums = {tag: 0.0 for tag in tags}
                    for rec in record.region:
                        for j, tag in enumerate(rec.fusion.tags):
                            sums[tag] += float(rec.fusion.beta[t, j])
                    for tag in tags:
                        row[f"beta_{tag}_region"] = _fmt(sums[tag] / len(record.region))

                if record.final is not None:
                    beta = record.final.beta[0]
                    row["beta_intra"] = _fmt(beta[0])
                    row["beta_inter"] = _fmt(beta[1])
                elif not model.use_region:
                    row["beta_intra"] = _fmt(1.0)
                    row["beta_inter"] = _fmt(0.0)

                writer.writerow([row[key] for key in header])
    logger.info("wrote attention weights to %s", args.out)
    return EXIT_OK


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "dump-attention": cmd_dump_attention,
}


def main(argv=None) -> int:
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_VALIDATION
    try:
        return COMMANDS[args.command](args)
    except VALIDATION_ERRORS as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_VALIDATION
    except Exception as exc:  # anything unexpected is a runtime failure
        logger.exception("runtime failure: %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
