"""Command-line pipeline driver.

Subcommands map to the pipeline stages and chain through checkpoint files
in the output directory. Every run is seeded; identical config and seed
reproduce identical artifacts byte for byte.

Exit codes: 0 success, 2 configuration or I/O problem, 3 checkpoint
produced under different settings, 4 sample generation infeasible.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from typing import Dict, List, Optional

import numpy as np

from . import data as datamod
from . import gate as gatemod
from . import generator as genmod
from . import metrics, viz
from .config import (
    ConfigError,
    PipelineConfig,
    config_hash,
    load_config,
    resolve_data,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CHECKPOINT = 3
EXIT_GENERATION = 4

DISC_FILE = "discriminator.json"
GEN_FILE = "generator.json"
GATE_FILE = "gate.json"

LOSS_FLAGS = ("ad", "ar", "au", "av", "g", "r")


def _parse_losses(raw: Optional[str]) -> Optional[frozenset]:
    if raw is None:
        return None
    flags = frozenset(tok.strip() for tok in raw.split(",") if tok.strip())
    unknown = flags - set(LOSS_FLAGS)
    if unknown:
        raise ConfigError(
            f"unknown loss flag(s) {sorted(unknown)}; choose from {','.join(LOSS_FLAGS)}")
    return flags


def _effective_generator_hp(hp: genmod.GeneratorHyperparams,
                            losses: Optional[frozenset]) -> genmod.GeneratorHyperparams:
    """Zero out the weights of any loss left off the ablation list; dropping
    the pretraining loss skips pretraining entirely."""
    if losses is None:
        return hp
    changes: dict = {}
    for flag, field in (("ar", "lambda_ar"), ("av", "lambda_av"), ("au", "lambda_au"),
                        ("r", "lambda_r"), ("g", "lambda_g")):
        if flag not in losses:
            changes[field] = 0.0
    if "ad" not in losses:
        changes["pretrain_epochs"] = 0
    return dataclasses.replace(hp, **changes) if changes else hp


def _stage_rng(stage: int, seed: int) -> np.random.Generator:
    return np.random.default_rng([stage, seed])


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_json(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"checkpoint {path} is not valid JSON: {exc}") from None


def _expect_config_hash(payload: dict, expected: str, path: str) -> None:
    if payload.get("config_hash") != expected:
        raise genmod.CheckpointMismatch(
            f"{path} was produced under a different configuration")


def _materialize(cfg: PipelineConfig, losses: Optional[frozenset]):
    matrix, train, test = resolve_data(cfg)
    chash = config_hash(cfg, datamod.matrix_fingerprint(matrix), losses)
    return matrix, train, test, chash


def _out(cfg: PipelineConfig, name: str) -> str:
    return os.path.join(cfg.out_dir, name)


def cmd_synth(cfg: PipelineConfig) -> int:
    if not cfg.is_synthetic:
        raise ConfigError("synth requires a config with a synthetic data block")
    matrix, train, test = resolve_data(cfg)
    datamod.save_dataset_csv(_out(cfg, "train.csv"), train)
    datamod.save_dataset_csv(_out(cfg, "test.csv"), test)
    datamod.save_attribute_matrix(_out(cfg, "attributes.csv"), matrix)
    _write_json(_out(cfg, "split.json"), {
        "group": "synthetic",
        "seen": [int(c) for c in matrix.seen_ids],
        "unseen": [int(c) for c in matrix.unseen_ids],
    })
    print(f"wrote synthetic benchmark to {cfg.out_dir}: "
          f"{train.n_samples} train / {test.n_samples} test samples, "
          f"{matrix.n_classes} classes ({len(matrix.unseen_ids)} unseen)")
    return EXIT_OK


def cmd_pretrain(cfg: PipelineConfig, losses: Optional[frozenset]) -> int:
    matrix, train, _, chash = _materialize(cfg, losses)
    hp = _effective_generator_hp(cfg.generator, losses)
    model = genmod.build_model(train.n_features, matrix, hp, seed=cfg.seed)
    history = genmod.pretrain_aid_discriminator(model, train, matrix,
                                                _stage_rng(0, cfg.seed))
    payload = model.to_dict(config_hash=chash)
    payload["stage"] = "pretrained"
    _write_json(_out(cfg, DISC_FILE), payload)
    _write_json(_out(cfg, "pretrain_log.json"), {"l_ad": history})
    viz.save_loss_curves({"l_ad": history}, _out(cfg, "pretrain_loss.png"),
                         title="aid-discriminator pretraining")
    last = f", final loss {history[-1]:.4f}" if history else " (skipped; 0 epochs)"
    print(f"pretrained backbone for {len(history)} epochs{last}")
    return EXIT_OK


def _epoch_rows(log: genmod.TrainingLog, hp: genmod.GeneratorHyperparams,
                updates_per_epoch: int) -> List[Dict[str, float]]:
    """Per-epoch means of the weighted loss components; columns sum to total."""
    weights = {"ar": hp.lambda_ar, "av": hp.lambda_av, "au": hp.lambda_au,
               "r": hp.lambda_r, "g": hp.lambda_g}
    rows = []
    for start in range(0, len(log.generator), updates_per_epoch):
        chunk = log.generator[start:start + updates_per_epoch]
        row = {name: weights[name] * float(np.mean([u[name] for u in chunk]))
               for name in weights}
        row["total"] = float(np.mean([u["total"] for u in chunk]))
        rows.append(row)
    return rows


def cmd_train_generator(cfg: PipelineConfig, losses: Optional[frozenset]) -> int:
    matrix, train, _, chash = _materialize(cfg, losses)
    payload = _load_json(_out(cfg, DISC_FILE))
    _expect_config_hash(payload, chash, DISC_FILE)
    model = genmod.GeneratorModel.from_dict(payload, matrix)
    model.hyperparams = _effective_generator_hp(cfg.generator, losses)
    log = genmod.train_kss_g(model, train, matrix, _stage_rng(1, cfg.seed))

    out_payload = model.to_dict(config_hash=chash)
    out_payload["stage"] = "trained"
    _write_json(_out(cfg, GEN_FILE), out_payload)

    upe = genmod.batches_per_epoch(train, matrix, model.hyperparams)
    rows = _epoch_rows(log, model.hyperparams, upe)
    disc_per_epoch = []
    if log.discriminator:
        per = model.hyperparams.disc_steps_per_gen * upe
        disc_per_epoch = [float(np.mean(log.discriminator[s:s + per]))
                          for s in range(0, len(log.discriminator), per)]
    _write_json(_out(cfg, "generator_log.json"),
                {"epochs": rows, "discriminator": disc_per_epoch,
                 "gen_updates": log.gen_updates, "disc_updates": log.disc_updates})
    curves = {name: [r[name] for r in rows] for name in ("ar", "av", "au", "r", "g", "total")}
    if disc_per_epoch:
        curves["disc"] = disc_per_epoch
    viz.save_loss_curves(curves, _out(cfg, "generator_loss.png"),
                         title="generator training")
    final = rows[-1]["total"] if rows else float("nan")
    print(f"trained generator: {log.gen_updates} updates, final loss {final:.4f}")
    return EXIT_OK


def cmd_train_gate(cfg: PipelineConfig, losses: Optional[frozenset],
                   skip_generator: bool) -> int:
    matrix, train, _, chash = _materialize(cfg, losses)
    gen = None
    if not skip_generator:
        payload = _load_json(_out(cfg, GEN_FILE))
        _expect_config_hash(payload, chash, GEN_FILE)
        gen = genmod.GeneratorModel.from_dict(payload, matrix)
    model = gatemod.train_gate(gen, train, matrix, cfg.gate, _stage_rng(2, cfg.seed))
    counts = genmod.default_generation_counts(train, matrix)
    payload = model.to_dict(config_hash=chash)
    payload["stage"] = "gate"
    payload["skip_generator"] = skip_generator
    payload["generation_counts"] = {str(c): int(n) for c, n in sorted(counts.items())}
    _write_json(_out(cfg, GATE_FILE), payload)
    mode = "without" if skip_generator else "with"
    print(f"trained gate {mode} generated samples: {len(model.gmms)} seen-class "
          f"mixtures, {len(matrix.unseen_ids)} unseen classes")
    return EXIT_OK


def cmd_diagnose(cfg: PipelineConfig, losses: Optional[frozenset]) -> int:
    matrix, _, test, chash = _materialize(cfg, losses)
    payload = _load_json(_out(cfg, GATE_FILE))
    _expect_config_hash(payload, chash, GATE_FILE)
    model = gatemod.GateModel.from_dict(payload, matrix)

    labels, paths = gatemod.diagnose(model, test.samples)
    with open(_out(cfg, "predictions.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_index", "true_label", "predicted_label", "path"])
        for i, (t, p, tag) in enumerate(zip(test.labels, labels, paths)):
            writer.writerow([i, int(t), int(p), tag])

    report = metrics.build_report(test.labels, labels, matrix, paths,
                                  config_hash=chash)
    metrics.export_report(report, _out(cfg, "report.json"), "json")
    metrics.export_projections(model.ap2, test.samples, test.labels,
                               _out(cfg, "projections.csv"))

    viz.save_confusion_heatmap(report, _out(cfg, "confusion.png"))
    viz.save_accuracy_bars(report, matrix.seen_ids, _out(cfg, "accuracy.png"))
    z = model.ap2.predict(test.samples) if test.n_samples else \
        np.zeros((0, matrix.n_attributes))
    viz.save_projection_scatter(z, test.labels, _out(cfg, "projections.png"))

    print(f"diagnosed {test.n_samples} samples: "
          f"acc_s={report.acc_s:.4f} acc_u={report.acc_u:.4f} har={report.har:.4f} "
          f"paths={report.path_counts}")
    return EXIT_OK


def cmd_e2e(cfg: PipelineConfig, losses: Optional[frozenset],
            skip_generator: bool) -> int:
    if not skip_generator:
        cmd_pretrain(cfg, losses)
        cmd_train_generator(cfg, losses)
    cmd_train_gate(cfg, losses, skip_generator)
    return cmd_diagnose(cfg, losses)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="path to the JSON config")
    common.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    common.add_argument("--out", default=None,
                        help="override the config output directory")
    common.add_argument("--losses", default=None, metavar="LIST",
                        help=f"comma list of losses to keep "
                             f"({','.join(LOSS_FLAGS)}); others are disabled")
    common.add_argument("--skip-generator", action="store_true",
                        help="train the gate on real data only (ablation)")

    parser = argparse.ArgumentParser(
        prog="kss-diag",
        description="Generalized zero-shot fault diagnosis pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("pretrain", "pretrain the multi-head backbone on real seen data"),
        ("train-generator", "adversarially train the sample generator"),
        ("train-gate", "fit projectors, mixtures, limits and the unseen fallback"),
        ("diagnose", "label the test set and write report, tables and figures"),
        ("synth", "write the synthetic benchmark dataset to files"),
        ("e2e", "run the whole pipeline in one command"),
    ):
        sub.add_parser(name, parents=[common], help=help_text)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed, args.out)
        os.makedirs(cfg.out_dir, exist_ok=True)
        losses = _parse_losses(args.losses)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "pretrain":
            return cmd_pretrain(cfg, losses)
        if args.command == "train-generator":
            return cmd_train_generator(cfg, losses)
        if args.command == "train-gate":
            return cmd_train_gate(cfg, losses, args.skip_generator)
        if args.command == "diagnose":
            return cmd_diagnose(cfg, losses)
        return cmd_e2e(cfg, losses, args.skip_generator)
    except genmod.DonorUnavailable as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GENERATION
    except genmod.CheckpointMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (ConfigError, datamod.DataFormatError, datamod.SplitError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
