"""Pipeline configuration: one JSON document drives every command.

A config either embeds a synthetic benchmark recipe or points at CSV files
plus a seen/unseen split. Hyperparameter blocks are partial: anything not
given keeps its default. The seed is mandatory so no run is unseeded.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from typing import Optional, Tuple

from . import data as datamod
from .gate import GateHyperparams
from .generator import GeneratorHyperparams


class ConfigError(ValueError):
    """Configuration unreadable, incomplete or inconsistent."""


@dataclass(frozen=True)
class PipelineConfig:
    seed: int
    out_dir: str
    generator: GeneratorHyperparams
    gate: GateHyperparams
    synthetic: Optional[datamod.SyntheticSpec]
    train_csv: Optional[str]
    test_csv: Optional[str]
    attributes_csv: Optional[str]
    split: Optional[datamod.SplitSpec]
    standardize: bool = False

    @property
    def is_synthetic(self) -> bool:
        return self.synthetic is not None


_TOP_KEYS = {"seed", "out_dir", "standardize", "generator", "gate", "data"}
_CSV_KEYS = {"train_csv", "test_csv", "attributes_csv", "split"}


def _parse_split(raw) -> datamod.SplitSpec:
    if isinstance(raw, str):
        return datamod.BUILTIN_SPLITS.get(raw.upper()) or _bad_group(raw)
    if isinstance(raw, dict):
        if set(raw) - {"seen", "unseen", "group"}:
            raise ConfigError(f"unknown split key(s): {sorted(set(raw) - {'seen', 'unseen', 'group'})}")
        if "seen" not in raw or "unseen" not in raw:
            raise ConfigError("an explicit split needs both 'seen' and 'unseen' lists")
        return datamod.SplitSpec(str(raw.get("group", "custom")),
                                 tuple(int(c) for c in raw["seen"]),
                                 tuple(int(c) for c in raw["unseen"]))
    raise ConfigError("split must be a group name or an object with seen/unseen lists")


def _bad_group(raw):
    raise ConfigError(f"unknown split group {raw!r}")


def load_config(path: str, seed_override: Optional[int] = None,
                out_override: Optional[str] = None) -> PipelineConfig:
    """Parse and validate a config file; overrides substitute seed/out_dir."""
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(payload, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(payload) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config key(s): {sorted(unknown)}")

    seed = seed_override if seed_override is not None else payload.get("seed")
    if seed is None:
        raise ConfigError("a seed is required (config 'seed' or --seed)")
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed must be an integer")

    out_dir = out_override if out_override is not None else payload.get("out_dir")
    if not out_dir:
        raise ConfigError("an output directory is required (config 'out_dir' or --out)")

    try:
        gen_hp = GeneratorHyperparams.from_dict(payload.get("generator", {}))
        gate_hp = GateHyperparams.from_dict(payload.get("gate", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad hyperparameters: {exc}") from None

    block = payload.get("data")
    if not isinstance(block, dict):
        raise ConfigError("a 'data' object is required")
    if "synthetic" in block:
        extra = set(block) - {"synthetic"}
        if extra:
            raise ConfigError(f"synthetic data takes no other key(s): {sorted(extra)}")
        try:
            spec = datamod.SyntheticSpec(**block["synthetic"])
        except TypeError as exc:
            raise ConfigError(f"bad synthetic block: {exc}") from None
        synthetic, train_csv, test_csv, attributes_csv, split = spec, None, None, None, None
    else:
        unknown = set(block) - _CSV_KEYS
        if unknown:
            raise ConfigError(f"unknown data key(s): {sorted(unknown)}")
        missing = sorted(_CSV_KEYS - set(block))
        if missing:
            raise ConfigError(f"data block is missing {missing}")
        base = os.path.dirname(os.path.abspath(path))
        train_csv, test_csv, attributes_csv = (
            os.path.join(base, str(block[k])) if not os.path.isabs(str(block[k]))
            else str(block[k])
            for k in ("train_csv", "test_csv", "attributes_csv"))
        absent = [p for p in (train_csv, test_csv, attributes_csv)
                  if not os.path.isfile(p)]
        if absent:
            raise ConfigError(f"referenced file(s) do not exist: {absent}")
        split = _parse_split(block["split"])
        synthetic = None

    return PipelineConfig(
        seed=int(seed),
        out_dir=str(out_dir),
        generator=gen_hp,
        gate=gate_hp,
        synthetic=synthetic,
        train_csv=train_csv,
        test_csv=test_csv,
        attributes_csv=attributes_csv,
        split=split,
        standardize=bool(payload.get("standardize", False)),
    )


def resolve_data(config: PipelineConfig):
    """Materialize (matrix, train, test) from the config, deterministically."""
    if config.is_synthetic:
        return datamod.synth_generate(config.synthetic, config.seed)
    matrix = datamod.load_attribute_matrix(config.attributes_csv)
    seen, unseen = datamod.make_split(config.split, matrix.class_ids)
    matrix = matrix.with_split(seen, unseen)
    train = datamod.load_dataset_csv(config.train_csv, matrix, "train",
                                     preprocess=datamod.denoise)
    test = datamod.load_dataset_csv(config.test_csv, matrix, "test",
                                    preprocess=datamod.denoise, allow_empty=True)
    if config.standardize:
        stats = datamod.zscore_fit(train)
        train = datamod.zscore_apply(stats, train)
        test = datamod.zscore_apply(stats, test)
    return matrix, train, test


def config_hash(config: PipelineConfig, matrix_hash: str,
                losses: Optional[frozenset] = None) -> str:
    """Hash of everything that must agree for checkpoints to interoperate:
    both hyperparameter blocks, the data recipe, any loss ablation, and the
    attribute matrix. The seed stays out; a different seed changes the data
    or model states, which the matrix hash and determinism already pin."""
    if config.is_synthetic:
        recipe = {"synthetic": dataclasses.asdict(config.synthetic)}
    else:
        recipe = {"split": {"seen": list(config.split.seen),
                            "unseen": list(config.split.unseen)}}
    payload = {
        "generator": config.generator.to_dict(),
        "gate": config.gate.to_dict(),
        "standardize": config.standardize,
        "recipe": recipe,
        "losses": "all" if losses is None else sorted(losses),
        "matrix": matrix_hash,
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()
