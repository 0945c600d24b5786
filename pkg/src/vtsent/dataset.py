"""Corpus ingestion, MVSA label aggregation, stratified splits/folds and summary statistics."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import DataError, ManifestError

logger = logging.getLogger(__name__)

SENTIMENT_CLASSES = ("positive", "neutral", "negative")
EMOTION_CLASSES = ("angry", "bored", "calm", "fearful", "happy", "loving", "sad")

CORPUS_CLASSES = {
    "mvsa": SENTIMENT_CLASSES,
    "mvsa-single": SENTIMENT_CLASSES,
    "mvsa-multiple": SENTIMENT_CLASSES,
    "tumemo": EMOTION_CLASSES,
}

DROP_POLARITY_CONFLICT = "polarity conflict"
DROP_NO_TEXT_MAJORITY = "no text majority"
DROP_NO_IMAGE_MAJORITY = "no image majority"

EXPERT_PRESENCE_BRANCHES = ("face", "object", "ocr")


@dataclass(frozen=True)
class Sample:
    id: str
    text: str
    image_ref: str
    label: int
    num_classes: int
    text_norm: str = ""

    def __post_init__(self):
        if not 0 <= self.label < self.num_classes:
            raise DataError(f"sample {self.id!r}: label {self.label} outside 0..{self.num_classes - 1}")


@dataclass
class Dataset:
    samples: list[Sample]
    corpus: str = "mvsa"
    class_names: tuple[str, ...] = SENTIMENT_CLASSES
    dropped: Counter = field(default_factory=Counter)

    def __post_init__(self):
        self._index: dict[str, int] = {}
        for i, s in enumerate(self.samples):
            if s.id in self._index:
                raise DataError(f"duplicate sample id {s.id!r}")
            self._index[s.id] = i

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def __getitem__(self, sample_id: str) -> Sample:
        return self.samples[self._index[sample_id]]

    def __contains__(self, sample_id: object) -> bool:
        return sample_id in self._index

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def subset(self, ids: Iterable[str]) -> "Dataset":
        return Dataset([self[i] for i in ids], self.corpus, self.class_names)

    def with_samples(self, samples: list[Sample]) -> "Dataset":
        return Dataset(samples, self.corpus, self.class_names, Counter(self.dropped))


# --------------------------------------------------------------------------
# label aggregation
# --------------------------------------------------------------------------

def _check_sentiment(token: str) -> str:
    if token not in SENTIMENT_CLASSES:
        raise DataError(f"unknown sentiment label {token!r}")
    return token


def aggregate_single(text_label: str, image_label: str) -> str | None:
    """Combine the text and image annotations of one MVSA pair.

    Agreement keeps the label, a polarized label beats neutral, and
    opposite polarities return None (the pair is discarded).
    """
    t, i = _check_sentiment(text_label), _check_sentiment(image_label)
    if t == i:
        return t
    if t == "neutral":
        return i
    if i == "neutral":
        return t
    return None


def _majority(votes: Sequence[str]) -> str | None:
    token, count = Counter(votes).most_common(1)[0]
    return token if count >= 2 else None


def _resolve_multiple(annotator_pairs: Sequence[Sequence[str]]) -> tuple[str | None, str | None]:
    if len(annotator_pairs) != 3:
        raise DataError(f"expected 3 annotator pairs, got {len(annotator_pairs)}")
    for pair in annotator_pairs:
        if len(pair) != 2:
            raise DataError(f"annotator pair must have 2 labels, got {list(pair)!r}")
    text_votes = [_check_sentiment(p[0]) for p in annotator_pairs]
    image_votes = [_check_sentiment(p[1]) for p in annotator_pairs]
    text_label = _majority(text_votes)
    if text_label is None:
        return None, DROP_NO_TEXT_MAJORITY
    image_label = _majority(image_votes)
    if image_label is None:
        return None, DROP_NO_IMAGE_MAJORITY
    label = aggregate_single(text_label, image_label)
    return label, (None if label is not None else DROP_POLARITY_CONFLICT)


def aggregate_multiple(annotator_pairs: Sequence[Sequence[str]]) -> str | None:
    """Per-modality majority over three annotators, then :func:`aggregate_single`."""
    return _resolve_multiple(annotator_pairs)[0]


# --------------------------------------------------------------------------
# manifest I/O
# --------------------------------------------------------------------------

def _classes_for(corpus: str) -> tuple[str, ...]:
    try:
        return CORPUS_CLASSES[corpus]
    except KeyError:
        raise DataError(f"unknown corpus type {corpus!r}") from None


def _resolve_label(rec: dict, classes: tuple[str, ...], lineno: int) -> tuple[str | None, str | None]:
    if "label" in rec:
        token = rec["label"]
        if token not in classes:
            raise ManifestError(f"unknown label {token!r}", lineno)
        return token, None
    if "annotations" in rec:
        pairs = rec["annotations"]
        if not isinstance(pairs, list):
            raise ManifestError("'annotations' must be a list of label pairs", lineno)
        try:
            return _resolve_multiple(pairs)
        except DataError as exc:
            raise ManifestError(str(exc), lineno) from None
    if "text_label" in rec and "image_label" in rec:
        try:
            label = aggregate_single(rec["text_label"], rec["image_label"])
        except DataError as exc:
            raise ManifestError(str(exc), lineno) from None
        return label, (None if label is not None else DROP_POLARITY_CONFLICT)
    raise ManifestError("record has no 'label', 'text_label'/'image_label' or 'annotations'", lineno)


def parse_manifest_lines(lines: Iterable[str], corpus: str | None = None) -> Dataset:
    classes: tuple[str, ...] | None = None
    samples: list[Sample] = []
    seen: set[str] = set()
    dropped: Counter = Counter()
    for lineno, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"invalid JSON ({exc.msg})", lineno) from None
        if not isinstance(rec, dict):
            raise ManifestError("record is not an object", lineno)
        if "manifest" in rec:
            if samples or classes is not None:
                raise ManifestError("manifest header must be the first record", lineno)
            corpus = rec["manifest"].get("corpus", corpus)
            continue
        if classes is None:
            corpus = corpus or "mvsa"
            classes = _classes_for(corpus)
        for key in ("id", "text", "image"):
            if not isinstance(rec.get(key), str):
                raise ManifestError(f"missing or non-string field {key!r}", lineno)
        sid = rec["id"]
        if sid in seen:
            raise ManifestError(f"duplicate id {sid!r}", lineno)
        seen.add(sid)
        token, reason = _resolve_label(rec, classes, lineno)
        if token is None:
            dropped[reason] += 1
            continue
        samples.append(Sample(
            id=sid,
            text=rec["text"],
            image_ref=rec["image"],
            label=classes.index(token),
            num_classes=len(classes),
            text_norm=rec.get("text_norm", ""),
        ))
    corpus = corpus or "mvsa"
    return Dataset(samples, corpus, classes or _classes_for(corpus), dropped)


def load_manifest(path: str | Path, corpus: str | None = None) -> Dataset:
    """Read a line-delimited JSON manifest.

    A first record of the form ``{"manifest": {"corpus": "tumemo"}}`` declares the
    corpus type; otherwise ``corpus`` (default ``"mvsa"``) is used.  Samples whose
    annotations aggregate to no label are dropped and counted in ``Dataset.dropped``.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    try:
        with path.open(encoding="utf-8") as fh:
            dataset = parse_manifest_lines(fh, corpus)
    except UnicodeDecodeError as exc:
        raise ManifestError(f"{path}: invalid UTF-8 ({exc.reason})") from None
    if dataset.dropped:
        logger.info("%s: dropped %s", path, dict(dataset.dropped))
    return dataset


def save_manifest(dataset: Dataset, path: str | Path, meta: dict | None = None) -> None:
    """Write resolved samples back out; the file reloads to the same labels."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"manifest": {"corpus": dataset.corpus, **(meta or {})}}) + "\n")
        for s in dataset:
            rec = {"id": s.id, "text": s.text, "image": s.image_ref,
                   "label": dataset.class_names[s.label]}
            if s.text_norm:
                rec["text_norm"] = s.text_norm
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


# --------------------------------------------------------------------------
# splits and folds
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Split:
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    seed: int = 0
    params: dict = field(default_factory=dict, compare=False)

    def part(self, name: str) -> tuple[str, ...]:
        return {"train": self.train_ids, "val": self.val_ids, "test": self.test_ids}[name]


@dataclass(frozen=True)
class FoldPlan:
    k: int
    folds: tuple[tuple[str, ...], ...]
    seed: int = 0


def _group_by_class(dataset: Dataset, ids: Iterable[str] | None = None) -> dict[int, list[str]]:
    groups: dict[int, list[str]] = {}
    for sid in (dataset.ids if ids is None else ids):
        groups.setdefault(dataset[sid].label, []).append(sid)
    return dict(sorted(groups.items()))


def _allocate(counts: Mapping[int, int], fraction: float) -> dict[int, int]:
    """Largest-remainder allocation: total = round(fraction*N), each class within 1 of its quota."""
    quotas = {c: fraction * n for c, n in counts.items()}
    alloc = {c: math.floor(q) for c, q in quotas.items()}
    remaining = round(fraction * sum(counts.values())) - sum(alloc.values())
    by_remainder = sorted(quotas, key=lambda c: (-(quotas[c] - alloc[c]), c))
    for c in by_remainder[:max(remaining, 0)]:
        alloc[c] += 1
    return alloc


def make_split(dataset: Dataset, val_fraction: float = 0.1, test_fraction: float = 0.1,
               seed: int = 0) -> Split:
    """Stratified train/val/test split, deterministic in ``seed``."""
    if not (val_fraction > 0 and test_fraction > 0 and val_fraction + test_fraction < 1):
        raise DataError(f"split fractions must be positive and sum below 1 "
                        f"(val={val_fraction}, test={test_fraction})")
    groups = _group_by_class(dataset)
    counts = {c: len(v) for c, v in groups.items()}
    n_test = _allocate(counts, test_fraction)
    n_val = _allocate(counts, val_fraction)
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for c, ids in groups.items():
        if counts[c] < 3:
            raise DataError(f"class {dataset.class_names[c]!r} has {counts[c]} samples; "
                            f"need at least 3 for train/val/test")
        t, v = max(n_test[c], 1), max(n_val[c], 1)
        if counts[c] - t - v < 1:
            raise DataError(f"class {dataset.class_names[c]!r} too small for the requested fractions")
        perm = [ids[i] for i in rng.permutation(len(ids))]
        test += perm[:t]
        val += perm[t:t + v]
        train += perm[t + v:]
    return Split(tuple(train), tuple(val), tuple(test), seed,
                 {"val_fraction": val_fraction, "test_fraction": test_fraction})


def stratified_holdout(dataset: Dataset, ids: Sequence[str], fraction: float,
                       seed: int) -> tuple[list[str], list[str]]:
    """Carve a stratified held-out part from ``ids``; returns (rest, held_out).

    Classes with at least two members contribute at least one held-out sample.
    """
    if not 0 < fraction < 1:
        raise DataError(f"holdout fraction must be in (0, 1), got {fraction}")
    groups = _group_by_class(dataset, ids)
    alloc = _allocate({c: len(v) for c, v in groups.items()}, fraction)
    rng = np.random.default_rng(seed)
    rest, held = [], []
    for c, members in groups.items():
        n = alloc[c]
        if n == 0 and len(members) >= 2:
            n = 1
        perm = [members[i] for i in rng.permutation(len(members))]
        held += perm[:n]
        rest += perm[n:]
    return rest, held


def make_folds(dataset: Dataset, k: int = 10, seed: int = 0) -> FoldPlan:
    """Stratified k-fold partition: class blocks are shuffled and dealt round-robin."""
    if k < 2:
        raise DataError(f"k must be at least 2, got {k}")
    if k > len(dataset):
        raise DataError(f"k={k} exceeds dataset size {len(dataset)}")
    rng = np.random.default_rng(seed)
    order: list[str] = []
    for c, ids in _group_by_class(dataset).items():
        if len(ids) < k:
            logger.warning("class %r has %d samples < k=%d; some folds will miss it",
                           dataset.class_names[c], len(ids), k)
        order += [ids[i] for i in rng.permutation(len(ids))]
    folds: list[list[str]] = [[] for _ in range(k)]
    for i, sid in enumerate(order):
        folds[i % k].append(sid)
    return FoldPlan(k, tuple(tuple(f) for f in folds), seed)


def save_split(split: Split, path: str | Path, meta: dict | None = None) -> None:
    header = {"kind": "split", "seed": split.seed, "params": split.params, **(meta or {})}
    lines = [json.dumps(header)]
    for part in ("train", "val", "test"):
        lines += [f"{part}\t{sid}" for sid in split.part(part)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_split(path: str | Path) -> Split:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = json.loads(lines[0])
    parts: dict[str, list[str]] = {"train": [], "val": [], "test": []}
    for line in lines[1:]:
        if line:
            part, sid = line.split("\t", 1)
            parts[part].append(sid)
    return Split(tuple(parts["train"]), tuple(parts["val"]), tuple(parts["test"]),
                 header["seed"], header.get("params", {}))


def save_foldplan(plan: FoldPlan, path: str | Path, meta: dict | None = None) -> None:
    lines = [json.dumps({"kind": "folds", "seed": plan.seed, "k": plan.k, **(meta or {})})]
    for i, fold in enumerate(plan.folds):
        lines += [f"fold{i}\t{sid}" for sid in fold]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_foldplan(path: str | Path) -> FoldPlan:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = json.loads(lines[0])
    folds: list[list[str]] = [[] for _ in range(header["k"])]
    for line in lines[1:]:
        if line:
            part, sid = line.split("\t", 1)
            folds[int(part[4:])].append(sid)
    return FoldPlan(header["k"], tuple(tuple(f) for f in folds), header["seed"])


# --------------------------------------------------------------------------
# statistics
# --------------------------------------------------------------------------

@dataclass
class DatasetStats:
    class_names: tuple[str, ...]
    counts: dict[str, int]
    per_class: dict[str, dict[str, float]]
    overall: dict[str, float]

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def to_dict(self) -> dict:
        return {"class_names": list(self.class_names), "counts": self.counts,
                "per_class": self.per_class, "overall": self.overall}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetStats":
        return cls(tuple(d["class_names"]), dict(d["counts"]),
                   {k: dict(v) for k, v in d["per_class"].items()}, dict(d["overall"]))

    def format_table(self) -> str:
        rows = [f"{'Class':<10}{'Samples':>9}{'Face':>8}{'Object':>8}{'OCR':>8}"]
        for name in self.class_names:
            if name not in self.per_class:
                continue
            r = self.per_class[name]
            rows.append(f"{name:<10}{self.counts[name]:>9,}{r['face']:>8.2f}{r['object']:>8.2f}{r['ocr']:>8.2f}")
        o = self.overall
        rows.append(f"{'All':<10}{self.total:>9,}{o['face']:>8.2f}{o['object']:>8.2f}{o['ocr']:>8.2f}")
        return "\n".join(rows)


def compute_stats(dataset: Dataset, bundles: Mapping[str, object]) -> DatasetStats:
    """Per-class counts and face/object/OCR presence percentages.

    ``bundles`` maps sample id to an object exposing ``is_present(branch_name)``.
    Classes without samples are left out of the per-class table.
    """
    present = {b: Counter() for b in EXPERT_PRESENCE_BRANCHES}
    counts: Counter = Counter()
    for s in dataset:
        if s.id not in bundles:
            raise DataError(f"no feature bundle for sample {s.id!r}")
        bundle = bundles[s.id]
        counts[s.label] += 1
        for b in EXPERT_PRESENCE_BRANCHES:
            if bundle.is_present(b):
                present[b][s.label] += 1

    def ratios(hits: dict[str, int], n: int) -> dict[str, float]:
        return {b: (100.0 * hits[b] / n if n else 0.0) for b in EXPERT_PRESENCE_BRANCHES}

    per_class = {
        dataset.class_names[c]: ratios({b: present[b][c] for b in present}, counts[c])
        for c in sorted(counts)
    }
    total = sum(counts.values())
    overall = ratios({b: sum(present[b].values()) for b in present}, total)
    return DatasetStats(
        dataset.class_names,
        {dataset.class_names[c]: counts[c] for c in sorted(counts)},
        per_class,
        overall,
    )


def with_normalized_text(dataset: Dataset, normalize) -> Dataset:
    """Return a copy whose samples carry ``normalize(text)`` in ``text_norm``."""
    return dataset.with_samples([replace(s, text_norm=normalize(s.text)) for s in dataset])
