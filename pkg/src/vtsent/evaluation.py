"""Held-out evaluation, k-fold cross-validation and the branch ablation harness."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .dataset import Dataset, FoldPlan, Split, stratified_holdout
from .encoders import BRANCH_INDEX, check_branch
from .errors import DataError
from .fusion import ModelSpec
from .metrics import MetricsReport, compute_metrics
from .training import FeatureTable, TrainConfig, TrainResult, evaluate_model, train_pipeline

logger = logging.getLogger(__name__)

__all__ = ["AblationRow", "CvReport", "Experiment", "MetricsReport", "compute_metrics",
           "cross_validate", "evaluate_split", "run_ablation"]


@dataclass
class Experiment:
    """Everything needed to train and score one configuration."""

    dataset: Dataset
    table: FeatureTable
    spec: ModelSpec
    config: TrainConfig
    single_modal: Mapping[str, TrainConfig] = field(default_factory=dict)
    val_fraction: float = 0.1
    dtype: torch.dtype = torch.float32

    def with_ablated(self, ablated: Sequence[str]) -> "Experiment":
        return replace(self, spec=replace(self.spec, ablated=tuple(ablated)))


@dataclass
class RunOutcome:
    test: MetricsReport
    train: TrainResult


def _run(exp: Experiment, train_ids, val_ids, test_ids, out_dir: Path | None = None,
         meta: dict | None = None) -> RunOutcome:
    t = exp.table
    res = train_pipeline(t.select(train_ids), t.select(val_ids), exp.spec, exp.config, exp.single_modal,
                         out_dir, exp.dtype, meta)
    test_table = t.select(test_ids)
    _, preds = evaluate_model(res.model, test_table)
    return RunOutcome(compute_metrics(preds, test_table.labels, exp.spec.num_classes), res.multimodal)


def evaluate_split(exp: Experiment, split: Split, out_dir: str | Path | None = None) -> RunOutcome:
    return _run(exp, split.train_ids, split.val_ids, split.test_ids, Path(out_dir) if out_dir else None)


@dataclass
class CvReport:
    folds: list[MetricsReport]
    train_results: list[TrainResult] = field(default_factory=list, repr=False)

    @property
    def k(self) -> int:
        return len(self.folds)

    def _values(self, what: str) -> np.ndarray:
        return np.array([getattr(f, what) for f in self.folds])

    @property
    def mean_accuracy(self) -> float:
        return float(self._values("accuracy").mean())

    @property
    def std_accuracy(self) -> float:
        return float(self._values("accuracy").std())

    @property
    def mean_f1(self) -> float:
        return float(self._values("weighted_f1").mean())

    @property
    def std_f1(self) -> float:
        return float(self._values("weighted_f1").std())

    def summary(self) -> dict:
        return {"k": self.k, "mean_accuracy": self.mean_accuracy, "std_accuracy": self.std_accuracy,
                "mean_f1": self.mean_f1, "std_f1": self.std_f1}


def cross_validate(plan: FoldPlan, exp: Experiment, out_dir: str | Path | None = None) -> CvReport:
    """Fold i is the test set; validation is carved (stratified) from the other folds."""
    out = Path(out_dir) if out_dir else None
    folds, results = [], []
    for i, test_ids in enumerate(plan.folds):
        rest = [sid for j, fold in enumerate(plan.folds) if j != i for sid in fold]
        train_ids, val_ids = stratified_holdout(exp.dataset, rest, exp.val_fraction, plan.seed + i)
        missing = set(range(exp.spec.num_classes)) - {exp.dataset[s].label for s in test_ids}
        if missing:
            logger.warning("fold %d has no test samples of class(es) %s",
                           i, [exp.dataset.class_names[c] for c in sorted(missing)])
        run = _run(exp, train_ids, val_ids, test_ids, out / f"fold{i}" if out else None, {"fold": i})
        folds.append(run.test)
        results.append(run.train)
    return CvReport(folds, results)


@dataclass
class AblationRow:
    removed: str
    head: str
    accuracy: float
    f1: float
    delta_accuracy: float = 0.0
    delta_f1: float = 0.0
    std_accuracy: float = 0.0
    std_f1: float = 0.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _score(exp: Experiment, protocol: Split | FoldPlan) -> tuple[float, float, float, float]:
    if isinstance(protocol, FoldPlan):
        cv = cross_validate(protocol, exp)
        return cv.mean_accuracy, cv.mean_f1, cv.std_accuracy, cv.std_f1
    run = evaluate_split(exp, protocol)
    return run.test.accuracy, run.test.weighted_f1, 0.0, 0.0


def run_ablation(exp: Experiment, branches: Sequence[str], protocol: Split | FoldPlan) -> list[AblationRow]:
    """Retrain once with all branches and once per removed branch; report deltas vs. full.

    ``protocol`` is a fixed split (test-set metrics) or a fold plan (CV means).
    """
    for b in branches:
        check_branch(b)
        if b in exp.spec.ablated:
            raise DataError(f"branch {b!r} is already removed in the base configuration")
    base = list(exp.spec.ablated)
    acc, f1, sa, sf = _score(exp, protocol)
    rows = [AblationRow("full", exp.spec.head, acc, f1, 0.0, 0.0, sa, sf)]
    for b in sorted(branches, key=BRANCH_INDEX.get):
        a, f, sa, sf = _score(exp.with_ablated(base + [b]), protocol)
        rows.append(AblationRow(b, exp.spec.head, a, f, a - acc, f - f1, sa, sf))
        logger.info("w/o %s: acc %.4f (%+.4f) f1 %.4f (%+.4f)", b, a, a - acc, f, f - f1)
    return rows


def format_ablation_table(rows: Sequence[AblationRow]) -> str:
    lines = [f"{'Setting':<18}{'Acc':>8}{'F1':>8}"]
    for r in rows:
        if r.removed == "full":
            lines.append(f"{'Full model (' + r.head.upper() + ')':<18}{100 * r.accuracy:>8.2f}{100 * r.f1:>8.2f}")
        else:
            lines.append(f"{'w/o ' + r.removed:<18}{100 * r.delta_accuracy:>+8.2f}{100 * r.delta_f1:>+8.2f}")
    return "\n".join(lines)


def format_cv_table(report: CvReport) -> str:
    lines = [f"{'Fold':<8}{'Acc':>8}{'F1':>8}"]
    for i, f in enumerate(report.folds):
        lines.append(f"{i:<8}{f.accuracy:>8.4f}{f.weighted_f1:>8.4f}")
    lines.append(f"{'mean':<8}{report.mean_accuracy:>8.4f}{report.mean_f1:>8.4f}")
    lines.append(f"{'std':<8}{report.std_accuracy:>8.4f}{report.std_f1:>8.4f}")
    return "\n".join(lines)


def write_jsonl(path: str | Path, records: Sequence[dict]) -> None:
    Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records), encoding="utf-8")
