"""Run configuration: one YAML document drives a whole experiment.

Sections: ``dataset``, ``normalization``, ``backends``, ``fusion``, ``training``,
``evaluation``.  Unknown keys are rejected with the offending key named.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

import yaml

from .encoders import BRANCHES, PAD_WIDTH, build_registry, check_branch
from .errors import ConfigError
from .featurestore import CACHE_ENV
from .fusion import ModelSpec
from .textnorm import DEFAULT_ABBREVIATIONS, NormPolicy
from .training import STAGES, TrainConfig, default_config

SECTIONS = ("dataset", "normalization", "backends", "fusion", "training", "evaluation")

DATASET_KEYS = {"manifest", "corpus", "val_fraction", "test_fraction", "split_seed", "folds",
                "fold_seed", "cache_dir"}
NORM_KEYS = {"user_placeholder", "url_placeholder", "emoji_mode", "emoji_placeholder",
             "punctuation_canonicalization", "abbreviations"}
FUSION_KEYS = {"head", "pad_width", "mlp_hidden", "layers", "heads", "ffn_dim", "layer_dropout",
               "adapters"}
TRAINING_KEYS = {"stage", "learning_rate", "batch_size", "max_epochs", "patience", "seed", "dropout",
                 "weight_decay", "tolerance", "early_stopping", "pretrain"}
_TRAIN_TYPES = {"learning_rate": float, "dropout": float, "weight_decay": float, "tolerance": float,
                "batch_size": int, "max_epochs": int, "patience": int, "seed": int, "early_stopping": bool}
EVAL_KEYS = {"ablation", "ablate_branches", "protocol", "part", "f1"}


def _check_keys(section: str, data: Any, allowed: set[str]) -> dict:
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be a mapping", key=section)
    for k in data:
        if k not in allowed:
            raise ConfigError(f"unknown config key {section}.{k}", key=f"{section}.{k}")
    return data


@dataclass
class RunConfig:
    path: Path
    raw: dict
    dataset: dict
    normalization: NormPolicy
    backends: dict
    fusion: dict
    training: dict
    evaluation: dict
    hash: str = ""

    @property
    def base_dir(self) -> Path:
        return self.path.parent

    @property
    def corpus(self) -> str:
        return self.dataset.get("corpus", "mvsa")

    @property
    def manifest_path(self) -> Path:
        if "manifest" not in self.dataset:
            raise ConfigError("dataset.manifest is required", key="dataset.manifest")
        p = Path(self.dataset["manifest"])
        return p if p.is_absolute() else self.base_dir / p

    @property
    def cache_dir(self) -> Path | None:
        env = os.environ.get(CACHE_ENV)
        if env:
            return Path(env)
        if "cache_dir" in self.dataset:
            p = Path(self.dataset["cache_dir"])
            return p if p.is_absolute() else self.base_dir / p
        return None

    @property
    def seed(self) -> int:
        return int(self.training.get("seed", 0))

    def registry(self):
        return build_registry(self.backends, self.base_dir)

    def backend_versions(self) -> dict[str, str]:
        return {name: b.descriptor.version for name, b in self.registry().items()}

    def train_config(self) -> TrainConfig:
        stage = self.training.get("stage", "multimodal")
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}", key="training.stage")
        base = default_config(stage, self.corpus, self.seed)
        overrides = {}
        for k, v in self.training.items():
            if k in ("stage", "pretrain"):
                continue
            try:
                overrides[k] = _TRAIN_TYPES[k](v)
            except (TypeError, ValueError):
                raise ConfigError(f"training.{k} has invalid value {v!r}", key=f"training.{k}") from None
        return replace(base, **overrides)

    def pretrain_configs(self) -> dict[str, TrainConfig]:
        if self.training.get("stage", "multimodal") != "multimodal" or not self.training.get("pretrain", True):
            return {}
        return {s: default_config(s, self.corpus, self.seed) for s in ("single_modal_image", "single_modal_text")}

    def model_spec(self, dims: tuple[int, ...], num_classes: int) -> ModelSpec:
        f = self.fusion
        ablated = tuple(self.evaluation.get("ablation", []) or [])
        for name in ablated:
            check_branch(name)
        kwargs = dict(
            input_dims=dims,
            num_classes=num_classes,
            head=f.get("head", "mlp"),
            adapters=tuple(f.get("adapters", ("text_main", "image_main"))),
            ablated=ablated,
            pad_width=int(f.get("pad_width", PAD_WIDTH)),
            mlp_hidden=tuple(f.get("mlp_hidden", (1024, 256))),
            layers=int(f.get("layers", 3)),
            heads=int(f.get("heads", 8)),
            ffn_dim=f.get("ffn_dim"),
            dropout=float(self.train_config().dropout),
            layer_dropout=float(f.get("layer_dropout", 0.0)),
        )
        return ModelSpec(**kwargs)

    def describe(self) -> dict:
        return {"config_hash": self.hash, "path": str(self.path)}


def _policy(data: dict) -> NormPolicy:
    data = dict(data)
    abbrev = data.pop("abbreviations", None)
    if abbrev is True:
        abbrev = DEFAULT_ABBREVIATIONS
    elif abbrev is False:
        abbrev = None
    elif abbrev is not None and not isinstance(abbrev, dict):
        raise ConfigError("normalization.abbreviations must be a bool or a mapping",
                          key="normalization.abbreviations")
    try:
        return NormPolicy(abbreviations=abbrev, **data)
    except ValueError as exc:
        raise ConfigError(str(exc), key="normalization") from None


def config_hash(raw: dict) -> str:
    return hashlib.sha256(json.dumps(raw, sort_keys=True, default=str).encode("utf-8")).hexdigest()[:16]


def parse_config(raw: dict, path: Path) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping")
    for k in raw:
        if k not in SECTIONS:
            raise ConfigError(f"unknown config key {k}", key=k)
    backends = raw.get("backends") or {}
    if not isinstance(backends, dict):
        raise ConfigError("section 'backends' must be a mapping", key="backends")
    for name in backends:
        if name not in BRANCHES:
            raise ConfigError(f"unknown config key backends.{name}", key=f"backends.{name}")
    missing = [b for b in BRANCHES if b not in backends]
    if missing:
        raise ConfigError(f"backends section lacks {', '.join(missing)}", key=f"backends.{missing[0]}")
    evaluation = _check_keys("evaluation", raw.get("evaluation"), EVAL_KEYS)
    if evaluation.get("protocol", "split") not in ("split", "cv"):
        raise ConfigError("evaluation.protocol must be 'split' or 'cv'", key="evaluation.protocol")
    if evaluation.get("part", "test") not in ("train", "val", "test"):
        raise ConfigError("evaluation.part must be train, val or test", key="evaluation.part")
    if evaluation.get("f1", "weighted") not in ("weighted", "macro"):
        raise ConfigError("evaluation.f1 must be 'weighted' or 'macro'", key="evaluation.f1")
    cfg = RunConfig(
        path=path,
        raw=raw,
        dataset=_check_keys("dataset", raw.get("dataset"), DATASET_KEYS),
        normalization=_policy(_check_keys("normalization", raw.get("normalization"), NORM_KEYS)),
        backends={k: dict(v or {}) for k, v in backends.items()},
        fusion=_check_keys("fusion", raw.get("fusion"), FUSION_KEYS),
        training=_check_keys("training", raw.get("training"), TRAINING_KEYS),
        evaluation=evaluation,
        hash=config_hash(raw),
    )
    cfg.train_config()
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from None
    return parse_config(raw or {}, path.resolve())


def example_config(manifest: str = "manifest.jsonl", planted: str | None = "face",
                   dims: int = 16) -> dict:
    """A small stub-backed configuration (used by ``vtsent init-demo`` and the tests)."""
    backends = {}
    for name in BRANCHES:
        spec: dict[str, Any] = {"kind": "stub", "version": "stub-1", "output_dim": dims}
        if name == planted:
            spec.update(planted=True, signal=6.0)
        elif name in ("object", "ocr"):
            spec["presence"] = 0.8 if name == "object" else 0.25
        elif name == "face":
            spec["presence"] = 0.5
        backends[name] = spec
    return {
        "dataset": {"manifest": manifest, "corpus": "mvsa", "val_fraction": 0.1, "test_fraction": 0.1,
                    "split_seed": 0, "folds": 10},
        "normalization": {"user_placeholder": "@USER", "url_placeholder": "HTTPURL",
                          "emoji_mode": "textual-alias"},
        "backends": backends,
        "fusion": {"head": "mlp"},
        "training": {"stage": "multimodal", "learning_rate": 1e-3, "seed": 0, "pretrain": True},
        "evaluation": {"ablation": [], "protocol": "split", "part": "test"},
    }

