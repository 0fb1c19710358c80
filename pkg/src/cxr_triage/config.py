"""Run configuration: YAML file + defaults + command-line overrides.

Precedence is flags > file > defaults.  Validation reports every problem
at once through :class:`ConfigError`.
"""

from __future__ import annotations

import copy
import os
import zlib
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from .classes import BACTERIAL, CLASS_MODES, NORMAL, VIRAL, ClassConfig, parse_ratio
from .dataset import PreprocessSpec
from .model import ClassifierSpec
from .saliency import MaskSpec
from .trainer import StageConfig, plan_for

OUTPUT_ENV = "CXR_TRIAGE_OUTPUT"

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "class_mode": "four_class",
    "sampling_ratio": None,
    "output_dir": "runs/default",
    "num_workers": 0,
    "data": {"covid_dir": None, "covid_metadata": None, "pneumonia_dir": None, "manifest": None},
    "split": {"test_fraction": 0.2, "val_count": 10, "keep_source_splits": False},
    "preprocess": {"target_size": 224, "hflip_prob": 0.5},
    "model": {"backbone": "densenet121", "init_weights": None, "weights_sha256": None},
    # batch_size null means one ratio unit (16 for 5:5:5:1, 15 for 7:7:1)
    "stage1": {"batch_size": None, "max_epochs": 30, "lr": 1e-4, "betas": [0.9, 0.999]},
    "stage2": {"batch_size": 8, "max_epochs": 10, "lr": 1e-4, "betas": [0.9, 0.999]},
    "metrics": {"bootstrap_resamples": 100, "bootstrap_size": 100},
    "saliency": {"num_masks": 1000, "grid_size": 7, "keep_probability": 0.5, "batch_size": 50},
}


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


def substream_seed(seed: int, name: str) -> int:
    """Deterministic per-component seed derived from the global seed."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


def _merge(base: dict, override: Mapping, problems: list, prefix=""):
    for key, value in override.items():
        if key not in base:
            problems.append(f"unknown key {prefix}{key}")
            continue
        if isinstance(base[key], dict):
            if value is None:
                continue
            if not isinstance(value, Mapping):
                problems.append(f"{prefix}{key} must be a mapping")
                continue
            _merge(base[key], value, problems, prefix=f"{prefix}{key}.")
        else:
            base[key] = value


class RunConfig:
    """Fully-defaulted, validated view over the run configuration."""

    def __init__(self, raw: Mapping | None = None, overrides: Mapping | None = None, base_dir=None):
        problems: list[str] = []
        data = copy.deepcopy(DEFAULTS)
        _merge(data, raw or {}, problems)
        _merge(data, overrides or {}, problems)
        if os.environ.get(OUTPUT_ENV) and not (overrides or {}).get("output_dir"):
            data["output_dir"] = os.environ[OUTPUT_ENV]
        self.base_dir = Path(base_dir) if base_dir else Path.cwd()
        self.data = data
        self._validate(problems)
        if problems:
            raise ConfigError(problems)

    @classmethod
    def load(cls, path, overrides: Mapping | None = None) -> "RunConfig":
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError([f"cannot read config {path}: {exc}"]) from exc
        if not isinstance(raw, Mapping):
            raise ConfigError([f"{path}: top level must be a mapping"])
        return cls(raw, overrides, base_dir=path.parent)

    def _validate(self, problems: list) -> None:
        d = self.data
        if d["class_mode"] not in CLASS_MODES:
            problems.append(f"class_mode must be one of {sorted(CLASS_MODES)}, got {d['class_mode']!r}")
        else:
            try:
                ClassConfig.from_mode(d["class_mode"], None if d["sampling_ratio"] is None
                                      else parse_ratio(d["sampling_ratio"]))
            except ValueError as exc:
                problems.append(f"sampling_ratio: {exc}")
        for stage in (1, 2):
            try:
                scfg = self.stage_config(stage)
                if d["class_mode"] in CLASS_MODES:
                    plan_for(self.class_config(), scfg.batch_size)
            except (TypeError, ValueError) as exc:
                problems.append(f"stage{stage}: {exc}")
        for key, factory in (("preprocess", self.preprocess_spec), ("saliency", self.mask_spec),
                             ("model", self.classifier_spec)):
            try:
                factory()
            except (TypeError, ValueError) as exc:
                problems.append(f"{key}: {exc}")
        tf = d["split"]["test_fraction"]
        if not isinstance(tf, (int, float)) or not 0 < tf < 1:
            problems.append(f"split.test_fraction must be in (0, 1), got {tf!r}")
        if not isinstance(d["split"]["val_count"], int) or d["split"]["val_count"] < 0:
            problems.append("split.val_count must be a non-negative integer")
        m = d["metrics"]
        if not isinstance(m["bootstrap_resamples"], int) or m["bootstrap_resamples"] < 0:
            problems.append("metrics.bootstrap_resamples must be a non-negative integer")
        if not isinstance(m["bootstrap_size"], int) or m["bootstrap_size"] < 1:
            problems.append("metrics.bootstrap_size must be a positive integer")
        if not isinstance(d["seed"], int):
            problems.append("seed must be an integer")

    def require_paths(self, *keys: str) -> None:
        """Check that the named ``data.*`` (or ``model.*``) paths exist."""
        problems = []
        for key in keys:
            section, name = key.split(".")
            value = self.data[section][name]
            if value is None:
                problems.append(f"{key} is required for this command")
            elif not self.resolve(value).exists():
                problems.append(f"{key}: {self.resolve(value)} does not exist")
        if problems:
            raise ConfigError(problems)

    def resolve(self, p) -> Path:
        p = Path(p).expanduser()
        return p if p.is_absolute() else self.base_dir / p

    # ------------------------------------------------------------------ #

    @property
    def seed(self) -> int:
        return self.data["seed"]

    @property
    def output_dir(self) -> Path:
        return self.resolve(self.data["output_dir"])

    @property
    def manifest_path(self) -> Path:
        m = self.data["data"]["manifest"]
        return self.resolve(m) if m else self.output_dir / "manifest.csv"

    def class_config(self) -> ClassConfig:
        ratio = self.data["sampling_ratio"]
        return ClassConfig.from_mode(self.data["class_mode"], None if ratio is None else parse_ratio(ratio))

    def preprocess_spec(self) -> PreprocessSpec:
        p = self.data["preprocess"]
        return PreprocessSpec(target_size=int(p["target_size"]), hflip_prob=float(p["hflip_prob"]))

    def classifier_spec(self) -> ClassifierSpec:
        m = self.data["model"]
        cc = CLASS_MODES.get(self.data["class_mode"], CLASS_MODES["four_class"])
        weights = self.resolve(m["init_weights"]) if m["init_weights"] else None
        return ClassifierSpec(num_classes=len(cc["classes"]), backbone=m["backbone"],
                              init_weights=None if weights is None else str(weights),
                              weights_sha256=m["weights_sha256"], seed=substream_seed(self.seed, "init"))

    def stage_config(self, stage: int) -> StageConfig:
        s = self.data[f"stage{stage}"]
        batch = s["batch_size"]
        if batch is None:
            batch = sum(self.class_config().sampling_ratio)
        return StageConfig(stage=stage, batch_size=int(batch), max_epochs=int(s["max_epochs"]),
                           lr=float(s["lr"]), betas=tuple(float(b) for b in s["betas"]),
                           seed=substream_seed(self.seed, f"stage{stage}"))

    def mask_spec(self, num_masks: int | None = None) -> MaskSpec:
        s = self.data["saliency"]
        return MaskSpec(num_masks=int(num_masks or s["num_masks"]), grid_size=int(s["grid_size"]),
                        keep_probability=float(s["keep_probability"]),
                        seed=substream_seed(self.seed, "saliency"), batch_size=int(s["batch_size"]))

    def keep_labels(self) -> set[str]:
        """Labels whose source-folder split is kept (pneumonia collection)."""
        return {NORMAL, BACTERIAL, VIRAL} if self.data["split"]["keep_source_splits"] else set()

    def split_seed(self) -> int:
        return substream_seed(self.seed, "split")

    def to_yaml(self) -> str:
        # absolute paths so the echo can be re-run from any directory
        d = copy.deepcopy(self.data)
        d["output_dir"] = str(self.output_dir.resolve())
        for key, value in d["data"].items():
            if value is not None:
                d["data"][key] = str(self.resolve(value).resolve())
        if d["model"]["init_weights"]:
            d["model"]["init_weights"] = str(self.resolve(d["model"]["init_weights"]).resolve())
        return yaml.safe_dump(d, sort_keys=True)

    def echo(self, path=None) -> Path:
        """Write the effective config into the output directory."""
        path = Path(path) if path else self.output_dir / "effective_config.yaml"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_yaml(), encoding="utf-8")
        return path
