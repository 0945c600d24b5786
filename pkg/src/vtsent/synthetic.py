"""Synthetic corpora and stub registries for desk-scale runs."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataset import CORPUS_CLASSES, Dataset, Sample
from .encoders import BRANCHES, OPTIONAL_BRANCHES, StubBackend

SMALL_DIMS = {name: 16 for name in BRANCHES}


def make_dataset(n: int, corpus: str = "mvsa", seed: int = 0,
                 class_weights: Sequence[float] | None = None) -> Dataset:
    """``n`` samples with labels drawn from ``class_weights`` (uniform by default)."""
    classes = CORPUS_CLASSES[corpus]
    rng = np.random.default_rng(seed)
    p = None if class_weights is None else np.asarray(class_weights, dtype=float) / np.sum(class_weights)
    labels = rng.choice(len(classes), size=n, p=p)
    samples = [Sample(f"s{i:05d}", f"post {i} about {classes[y]}", f"img/{i:05d}.jpg", int(y), len(classes))
               for i, y in enumerate(labels)]
    return Dataset(samples, corpus, classes)


def stub_registry(planted: str | None = None, dims: Mapping[str, int] | None = None,
                  presence: Mapping[str, object] | None = None, version: str = "stub-1",
                  signal: float = 4.0) -> dict[str, StubBackend]:
    """Stub backends for all branches; ``planted`` names the one branch carrying the label."""
    dims = {**SMALL_DIMS, **(dims or {})}
    presence = dict(presence or {})
    if planted in OPTIONAL_BRANCHES:
        presence[planted] = "always"
    return {
        name: StubBackend(name, dims[name], version, presence.get(name, "always"),
                          planted=(name == planted), signal=signal)
        for name in BRANCHES
    }


def write_manifest(path: str | Path, dataset: Dataset) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"manifest": {"corpus": dataset.corpus}}) + "\n")
        for s in dataset:
            fh.write(json.dumps({"id": s.id, "text": s.text, "image": s.image_ref,
                                 "label": dataset.class_names[s.label]}) + "\n")
    return path
