"""Two-stage training: single-modal probes, then end-to-end multimodal fusion.

Early stopping watches validation loss; the kept parameters are those of the
epoch with the highest validation F1.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .encoders import BRANCH_INDEX, BRANCHES, FeatureBundle
from .errors import ConfigError, DataError, VtsentError
from .fusion import (Checkpoint, FusionModel, ModelSpec, ProbeSpec, build_model, load_checkpoint,
                     save_checkpoint)
from .metrics import compute_metrics

logger = logging.getLogger(__name__)

STAGES = ("single_modal_image", "single_modal_text", "multimodal")
STAGE_BRANCH = {"single_modal_image": "image_main", "single_modal_text": "text_main"}


class TrainingDivergedError(VtsentError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "multimodal"
    learning_rate: float = 5e-6
    batch_size: int = 16
    max_epochs: int = 30
    patience: int = 3
    dropout: float = 0.5
    seed: int = 0
    weight_decay: float = 0.01
    tolerance: float = 0.0
    early_stopping: bool = True

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}", key="training.stage")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive", key="training.learning_rate")
        if self.patience < 1:
            raise ConfigError("patience must be at least 1", key="training.patience")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be at least 1", key="training.max_epochs")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1", key="training.batch_size")


def _corpus_family(corpus: str) -> str:
    c = corpus.lower()
    if c in ("mvsa", "mvsa-single", "mvsa-multiple"):
        return "mvsa"
    if c == "tumemo":
        return "tumemo"
    raise ConfigError(f"unknown corpus {corpus!r}", key="dataset.corpus")


def default_config(stage: str, corpus: str = "mvsa", seed: int = 0) -> TrainConfig:
    family = _corpus_family(corpus)
    if stage == "single_modal_image":
        return TrainConfig(stage, 1e-4, 32, 20, seed=seed, early_stopping=False)
    if stage == "single_modal_text":
        return TrainConfig(stage, 5e-5, 64, 20, seed=seed, early_stopping=False)
    if stage == "multimodal":
        lr = 5e-6 if family == "mvsa" else 1e-5
        return TrainConfig(stage, lr, 16, 30, patience=3, dropout=0.5, seed=seed)
    raise ConfigError(f"unknown stage {stage!r}", key="training.stage")


def should_stop(val_losses: Sequence[float], patience: int = 3, tolerance: float = 0.0) -> bool:
    """True once each of the last ``patience`` epochs failed to beat the running minimum.

    An epoch improves only if its loss is below the best earlier loss by more than
    ``tolerance``; a plateau counts as no improvement.
    """
    if not val_losses:
        raise ValueError("should_stop needs at least one validation loss")
    if len(val_losses) <= patience:
        return False
    best = val_losses[0]
    stale = 0
    for loss in val_losses[1:]:
        if loss < best - tolerance:
            stale = 0
        else:
            stale += 1
        best = min(best, loss)
    return stale >= patience


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    val_f1: float

    def to_dict(self) -> dict:
        return asdict(self)


def select_checkpoint(history: Sequence[EpochRecord] | Sequence[float]) -> int:
    """1-based epoch with the highest validation F1; the earliest wins ties."""
    if not history:
        raise ValueError("empty history")
    scores = [h.val_f1 if isinstance(h, EpochRecord) else float(h) for h in history]
    return int(np.argmax(scores)) + 1


@dataclass
class TrainResult:
    history: list[EpochRecord]
    best_epoch: int
    stopped_early: bool
    best_state: dict[str, torch.Tensor] = field(repr=False)
    checkpoint: Path | None = None

    @property
    def best(self) -> EpochRecord:
        return self.history[self.best_epoch - 1]


@dataclass
class FeatureTable:
    """Column-wise features for a set of samples, ready for batching."""

    ids: list[str]
    features: list[np.ndarray]
    presence: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_bundles(cls, bundles: Sequence[FeatureBundle], labels: Sequence[int]) -> "FeatureTable":
        if len(bundles) != len(labels):
            raise DataError("bundles and labels differ in length")
        if not bundles:
            raise DataError("cannot build a feature table from zero samples")
        feats = [np.stack([b.records[i].vector for b in bundles]) for i in range(len(BRANCHES))]
        presence = np.stack([b.presence for b in bundles])
        return cls([b.sample_id for b in bundles], feats, presence, np.asarray(labels, dtype=np.int64))

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(f.shape[1] for f in self.features)

    def subset(self, idx: Sequence[int]) -> "FeatureTable":
        idx = np.asarray(idx, dtype=np.int64)
        return FeatureTable([self.ids[i] for i in idx], [f[idx] for f in self.features],
                            self.presence[idx], self.labels[idx])

    def select(self, ids: Sequence[str]) -> "FeatureTable":
        pos = {sid: i for i, sid in enumerate(self.ids)}
        return self.subset([pos[s] for s in ids])

    def tensors(self, idx: Sequence[int] | None = None, dtype: torch.dtype = torch.float32):
        idx = np.arange(len(self)) if idx is None else np.asarray(idx)
        feats = [torch.from_numpy(f[idx]).to(dtype) for f in self.features]
        return feats, torch.from_numpy(self.presence[idx]), torch.from_numpy(self.labels[idx])


def _dtype_of(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def evaluate_model(model: nn.Module, data: FeatureTable, batch_size: int = 256) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and predictions in eval mode."""
    model.eval()
    dtype = _dtype_of(model)
    total, preds = 0.0, []
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            feats, pres, y = data.tensors(np.arange(start, min(start + batch_size, len(data))), dtype)
            logits = model(feats, pres)
            total += float(F.cross_entropy(logits, y, reduction="sum"))
            preds.append(logits.argmax(dim=1).numpy())
    return total / len(data), np.concatenate(preds)


Evaluator = Callable[[nn.Module, FeatureTable], tuple[float, np.ndarray]]


def train_stage(model: nn.Module, train: FeatureTable, val: FeatureTable, config: TrainConfig,
                num_classes: int, evaluator: Evaluator | None = None,
                log_path: str | Path | None = None, checkpoint_path: str | Path | None = None,
                meta: dict | None = None) -> TrainResult:
    """Run one training stage and leave ``model`` holding the best-F1 parameters.

    Deterministic for a fixed ``config.seed``: the shuffle order comes from a
    seeded generator and dropout from torch's seeded global stream.
    """
    if len(train) == 0:
        raise DataError("empty training set")
    if len(val) == 0:
        raise DataError("empty validation set")
    evaluator = evaluator or evaluate_model
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=config.learning_rate,
                            weight_decay=config.weight_decay)
    dtype = _dtype_of(model)
    log = Path(log_path).open("w", encoding="utf-8") if log_path else None
    history: list[EpochRecord] = []
    best_f1, best_state, stopped = -1.0, None, False
    try:
        for epoch in range(1, config.max_epochs + 1):
            model.train()
            order = rng.permutation(len(train))
            running = 0.0
            for start in range(0, len(train), config.batch_size):
                idx = order[start:start + config.batch_size]
                feats, pres, y = train.tensors(idx, dtype)
                loss = F.cross_entropy(model(feats, pres), y)
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite training loss at epoch {epoch}, batch {start // config.batch_size}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                running += loss.item() * len(idx)
            val_loss, preds = evaluator(model, val)
            report = compute_metrics(preds, val.labels, num_classes)
            rec = EpochRecord(epoch, running / len(train), float(val_loss), report.accuracy,
                              report.weighted_f1)
            history.append(rec)
            if rec.val_f1 > best_f1:
                best_f1 = rec.val_f1
                best_state = copy.deepcopy(model.state_dict())
            if log:
                log.write(json.dumps({**rec.to_dict(), **(meta or {})}) + "\n")
                log.flush()
            logger.info("epoch %d: train %.4f val %.4f acc %.4f f1 %.4f", epoch, rec.train_loss,
                        rec.val_loss, rec.val_accuracy, rec.val_f1)
            if config.early_stopping and should_stop([h.val_loss for h in history], config.patience,
                                                     config.tolerance):
                stopped = True
                break
    finally:
        if log:
            log.close()
    best_epoch = select_checkpoint(history)
    model.load_state_dict(best_state)
    result = TrainResult(history, best_epoch, stopped, best_state)
    if checkpoint_path is not None:
        result.checkpoint = save_checkpoint(checkpoint_path, model, config.seed,
                                            {"best_epoch": best_epoch, "stage": config.stage, **(meta or {})})
    return result


def init_from_pretrained(model: FusionModel, checkpoints: Mapping[str, str | Path | Checkpoint | None]
                         ) -> FusionModel:
    """Copy single-modal adapter weights into the multimodal model's adapters.

    Branches without a checkpoint keep their fresh (seeded) initialization and a
    warning is logged.  The fusion head is never touched.
    """
    for branch, adapter in model.adapters.items():
        source = checkpoints.get(branch)
        if isinstance(source, (str, Path)):
            source = load_checkpoint(source) if Path(source).exists() else None
        if source is None:
            logger.warning("no single-modal checkpoint for %s; keeping fresh initialization", branch)
            continue
        desc = source.descriptor
        if desc.get("kind") != "probe" or desc.get("branch") != branch:
            raise DataError(f"checkpoint for {branch!r} describes {desc.get('kind')}/{desc.get('branch')}")
        with torch.no_grad():
            for name, param in adapter.named_parameters():
                src_name = f"adapter.{name}"
                if src_name not in source.tensors:
                    raise DataError(f"checkpoint for {branch!r} lacks tensor {src_name!r}")
                src = source.tensors[src_name]
                if tuple(src.shape) != tuple(param.shape):
                    raise DataError(f"tensor {src_name!r} for {branch!r} has shape {tuple(src.shape)}, "
                                    f"expected {tuple(param.shape)}")
                param.copy_(torch.from_numpy(src))
    return model


@dataclass
class PipelineResult:
    multimodal: TrainResult
    model: FusionModel
    single_modal: dict[str, TrainResult] = field(default_factory=dict)


def train_pipeline(train: FeatureTable, val: FeatureTable, spec: ModelSpec, multimodal: TrainConfig,
                   single_modal: Mapping[str, TrainConfig] | None = None, out_dir: str | Path | None = None,
                   dtype: torch.dtype = torch.float32, meta: dict | None = None) -> PipelineResult:
    """Single-modal stages (for each adapter branch in ``single_modal``) then the multimodal stage."""
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    pretrained: dict[str, Checkpoint | Path | None] = {}
    stage_results: dict[str, TrainResult] = {}
    for stage, cfg in (single_modal or {}).items():
        branch = STAGE_BRANCH[stage]
        probe = build_model(ProbeSpec(branch, train.dims[BRANCH_INDEX[branch]], spec.num_classes,
                                      cfg.dropout), cfg.seed, dtype)
        res = train_stage(probe, train, val, cfg, spec.num_classes,
                          log_path=out / f"{stage}.metrics.jsonl" if out else None,
                          checkpoint_path=out / f"{stage}.ckpt" if out else None, meta=meta)
        stage_results[stage] = res
        pretrained[branch] = res.checkpoint if res.checkpoint else Checkpoint(
            probe.describe(), cfg.seed, {k: v.detach().numpy().astype(np.float32) for k, v in res.best_state.items()})
    model = build_model(replace(spec, dropout=multimodal.dropout), multimodal.seed, dtype)
    if pretrained:
        init_from_pretrained(model, pretrained)
    res = train_stage(model, train, val, multimodal, spec.num_classes,
                      log_path=out / "multimodal.metrics.jsonl" if out else None,
                      checkpoint_path=out / "multimodal.ckpt" if out else None, meta=meta)
    return PipelineResult(res, model, stage_results)
