"""Feature branches, the backend contract, expert post-processing rules and stub backends.

Every sample is described by eight branch vectors in a fixed order.  Expert
branches (face, object, ocr) may be absent for a sample; an absent record is a
zero vector with ``present=False`` so downstream fusion always sees eight slots.
"""

from __future__ import annotations

import hashlib
import importlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .dataset import Sample
from .errors import ConfigError, DataError, VtsentError

BRANCHES = ("text_main", "image_main", "clip_text", "clip_image", "face", "object", "scene", "ocr")
BRANCH_INDEX = {name: i for i, name in enumerate(BRANCHES)}
EXPERT_BRANCHES = ("face", "object", "scene", "ocr")
# branches allowed to report present=False
OPTIONAL_BRANCHES = ("face", "object", "ocr")
TRAINABLE_BRANCHES = ("text_main", "image_main")
PAD_WIDTH = 1024
NUM_SCENES = 365
OCR_MIN_WORDS = 5

# widths of the usual pre-trained backbones; used as defaults for stub runs
DEFAULT_DIMS = {
    "text_main": 1024,
    "image_main": 1024,
    "clip_text": 768,
    "clip_image": 768,
    "face": 512,
    "object": 80,
    "scene": NUM_SCENES,
    "ocr": 768,
}


class BackendError(VtsentError):
    def __init__(self, sample_id: str, branch: str, cause: BaseException | str):
        super().__init__(f"backend for branch {branch!r} failed on sample {sample_id!r}: {cause}")
        self.sample_id = sample_id
        self.branch = branch


@dataclass(frozen=True)
class BranchId:
    name: str
    order_index: int

    @classmethod
    def of(cls, name: str) -> "BranchId":
        if name not in BRANCH_INDEX:
            raise KeyError(f"unknown branch {name!r}")
        return cls(name, BRANCH_INDEX[name])


def check_branch(name: str) -> str:
    if name not in BRANCH_INDEX:
        raise DataError(f"unknown branch {name!r}; expected one of {', '.join(BRANCHES)}")
    return name


@dataclass(frozen=True, eq=False)
class FeatureRecord:
    branch: str
    vector: np.ndarray
    present: bool
    backend_version: str

    def __post_init__(self):
        check_branch(self.branch)
        vec = np.ascontiguousarray(self.vector, dtype=np.float32)
        if vec.ndim != 1 or vec.size == 0:
            raise DataError(f"{self.branch}: feature must be a non-empty 1-d vector")
        if not np.all(np.isfinite(vec)):
            raise DataError(f"{self.branch}: feature vector has non-finite entries")
        if not self.present and np.any(vec != 0):
            raise DataError(f"{self.branch}: absent record must hold a zero vector")
        vec.setflags(write=False)
        object.__setattr__(self, "vector", vec)

    @property
    def dim(self) -> int:
        return self.vector.shape[0]

    @classmethod
    def absent(cls, branch: str, dim: int, version: str) -> "FeatureRecord":
        return cls(branch, np.zeros(dim, dtype=np.float32), False, version)

    def same_as(self, other: "FeatureRecord") -> bool:
        """Bit-level equality, including signed zeros."""
        return (self.branch == other.branch and self.present == other.present
                and self.backend_version == other.backend_version
                and self.vector.tobytes() == other.vector.tobytes())


@dataclass(frozen=True, eq=False)
class FeatureBundle:
    sample_id: str
    records: tuple[FeatureRecord, ...]

    def __post_init__(self):
        names = tuple(r.branch for r in self.records)
        if names != BRANCHES:
            raise DataError(f"bundle for {self.sample_id!r} has branches {names}, expected {BRANCHES}")

    def record(self, branch: str) -> FeatureRecord:
        return self.records[BRANCH_INDEX[branch]]

    def is_present(self, branch: str) -> bool:
        return self.record(branch).present

    @property
    def presence(self) -> np.ndarray:
        return np.array([r.present for r in self.records], dtype=bool)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(r.dim for r in self.records)

    def same_as(self, other: "FeatureBundle") -> bool:
        return self.sample_id == other.sample_id and all(
            a.same_as(b) for a, b in zip(self.records, other.records))


@dataclass(frozen=True)
class BackendDescriptor:
    branch: str
    output_dim: int
    trainable: bool = False
    version: str = "unversioned"
    thread_safe: bool = True

    def __post_init__(self):
        check_branch(self.branch)
        if not 0 < self.output_dim <= PAD_WIDTH:
            raise ConfigError(f"{self.branch}: output_dim {self.output_dim} must be in 1..{PAD_WIDTH}",
                              key=f"backends.{self.branch}.output_dim")


class Backend:
    """Base class for feature sources.

    Subclasses implement :meth:`compute`, returning the raw vector or ``None`` when
    the branch's presence rule fails.  :meth:`encode` enforces the record contract.
    """

    descriptor: BackendDescriptor

    def compute(self, sample: Sample) -> np.ndarray | None:
        raise NotImplementedError

    def encode(self, sample: Sample) -> FeatureRecord:
        d = self.descriptor
        try:
            vec = self.compute(sample)
        except BackendError:
            raise
        except Exception as exc:
            raise BackendError(sample.id, d.branch, exc) from exc
        if vec is None:
            if d.branch not in OPTIONAL_BRANCHES:
                raise BackendError(sample.id, d.branch, "branch has no absence rule but returned no feature")
            return FeatureRecord.absent(d.branch, d.output_dim, d.version)
        vec = np.asarray(vec, dtype=np.float32).reshape(-1)
        if vec.shape[0] != d.output_dim:
            raise BackendError(sample.id, d.branch,
                               f"vector length {vec.shape[0]} != output_dim {d.output_dim}")
        if not np.all(np.isfinite(vec)):
            raise BackendError(sample.id, d.branch, "non-finite feature values")
        return FeatureRecord(d.branch, vec, True, d.version)


def encode(backend: Backend, sample: Sample) -> FeatureRecord:
    return backend.encode(sample)


def text_of(sample: Sample) -> str:
    return sample.text_norm or sample.text


# --------------------------------------------------------------------------
# stub backend
# --------------------------------------------------------------------------

def stable_hash(*parts: str) -> int:
    digest = hashlib.blake2b("\x1f".join(parts).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def hash_even(sample_id: str) -> bool:
    return stable_hash(sample_id) % 2 == 0


class StubBackend(Backend):
    """Deterministic pseudo-random features keyed by (version, branch, sample id).

    presence: ``"always"``, ``"never"``, ``"hash-even"``, a ratio in [0, 1], or a
    predicate on the sample.  With ``planted=True`` the vector is shifted towards a
    per-class prototype so the label is recoverable from this branch alone.
    """

    def __init__(self, branch: str, output_dim: int | None = None, version: str = "stub-1",
                 presence: str | float | Callable[[Sample], bool] = "always",
                 planted: bool = False, signal: float = 4.0, noise: float = 1.0):
        output_dim = output_dim or DEFAULT_DIMS[check_branch(branch)]
        self.descriptor = BackendDescriptor(branch, output_dim, branch in TRAINABLE_BRANCHES, version)
        if branch not in OPTIONAL_BRANCHES and presence != "always":
            raise ConfigError(f"branch {branch!r} is always present; presence rule {presence!r} not allowed",
                              key=f"backends.{branch}.presence")
        if isinstance(presence, str) and presence not in ("always", "never", "hash-even"):
            raise ConfigError(f"unknown presence rule {presence!r}", key=f"backends.{branch}.presence")
        self.presence = presence
        self.planted = planted
        self.signal = signal
        self.noise = noise
        self._prototypes: dict[int, np.ndarray] = {}

    def is_present(self, sample: Sample) -> bool:
        rule = self.presence
        if callable(rule):
            return bool(rule(sample))
        if rule == "always":
            return True
        if rule == "never":
            return False
        if rule == "hash-even":
            return hash_even(sample.id)
        d = self.descriptor
        u = stable_hash(d.version, d.branch, "presence", sample.id) / 2.0 ** 64
        return u < float(rule)

    def prototypes(self, num_classes: int) -> np.ndarray:
        if num_classes not in self._prototypes:
            d = self.descriptor
            rng = np.random.default_rng(stable_hash(d.version, d.branch, "prototypes", str(num_classes)))
            p = rng.standard_normal((num_classes, d.output_dim))
            self._prototypes[num_classes] = p / np.linalg.norm(p, axis=1, keepdims=True)
        return self._prototypes[num_classes]

    def compute(self, sample: Sample) -> np.ndarray | None:
        if not self.is_present(sample):
            return None
        d = self.descriptor
        rng = np.random.default_rng(stable_hash(d.version, d.branch, sample.id))
        vec = self.noise * rng.standard_normal(d.output_dim)
        if self.planted:
            vec = vec + self.signal * self.prototypes(sample.num_classes)[sample.label]
        return vec.astype(np.float32)


class StubSentenceEncoder:
    """Hash-seeded sentence vectors; stands in for a sentence-embedding model."""

    def __init__(self, dim: int = DEFAULT_DIMS["ocr"], version: str = "stub-sent-1"):
        self.dim = dim
        self.version = version

    def __call__(self, sentence: str) -> np.ndarray:
        rng = np.random.default_rng(stable_hash(self.version, sentence))
        return rng.standard_normal(self.dim).astype(np.float32)


# --------------------------------------------------------------------------
# expert post-processing rules
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FaceDetection:
    box: tuple[float, float, float, float]  # x, y, width, height
    embedding: np.ndarray

    @property
    def area(self) -> float:
        return self.box[2] * self.box[3]


def select_largest_face(detections: Sequence[FaceDetection]) -> np.ndarray | None:
    """Embedding of the largest box; the earliest detection wins ties."""
    best, best_key = None, None
    for i, det in enumerate(detections):
        _, _, w, h = det.box
        if not (w > 0 and h > 0):
            raise DataError(f"face box {i} has non-positive size {det.box}")
        key = (det.area, -i)
        if best_key is None or key > best_key:
            best, best_key = det, key
    return None if best is None else np.asarray(best.embedding)


def sum_object_logits(detections: Sequence[Sequence[float]], num_classes: int) -> np.ndarray | None:
    """Per-class sum of detection logits, or None when nothing was detected.

    Uses exactly-rounded summation so the result does not depend on detection order.
    """
    if len(detections) == 0:
        return None
    rows = [np.asarray(d, dtype=np.float64) for d in detections]
    for i, r in enumerate(rows):
        if r.shape != (num_classes,):
            raise DataError(f"detection {i} has {r.size} logits, expected {num_classes}")
    stacked = np.stack(rows)
    return np.array([math.fsum(stacked[:, c]) for c in range(num_classes)])


def scene_feature(logits: Sequence[float], version: str = "scene") -> FeatureRecord:
    vec = np.asarray(logits, dtype=np.float32).reshape(-1)
    if vec.shape[0] != NUM_SCENES:
        raise DataError(f"scene logits must have length {NUM_SCENES}, got {vec.shape[0]}")
    if not np.all(np.isfinite(vec)):
        raise DataError("scene logits contain non-finite values")
    return FeatureRecord("scene", vec, True, version)


def ocr_gate_and_encode(words: Sequence[str], sentence_encoder: Callable[[str], np.ndarray],
                        min_words: int = OCR_MIN_WORDS) -> np.ndarray | None:
    """Encode the joined OCR words, but only for images with at least ``min_words`` words."""
    if len(words) < min_words:
        return None
    return np.asarray(sentence_encoder(" ".join(words)))


# --------------------------------------------------------------------------
# adapters for external models
# --------------------------------------------------------------------------

class CallableBackend(Backend):
    """Wraps ``fn(sample) -> vector`` (main and aligned image/text encoders)."""

    def __init__(self, branch: str, fn: Callable[[Sample], np.ndarray], output_dim: int,
                 version: str, thread_safe: bool = True):
        self.descriptor = BackendDescriptor(branch, output_dim, branch in TRAINABLE_BRANCHES,
                                            version, thread_safe)
        self.fn = fn

    def compute(self, sample):
        return self.fn(sample)


class FaceBackend(Backend):
    def __init__(self, detector: Callable[[str], Sequence[FaceDetection]], output_dim: int,
                 version: str, thread_safe: bool = True):
        self.descriptor = BackendDescriptor("face", output_dim, False, version, thread_safe)
        self.detector = detector

    def compute(self, sample):
        return select_largest_face(self.detector(sample.image_ref))


class ObjectBackend(Backend):
    def __init__(self, detector: Callable[[str], Sequence[Sequence[float]]], num_classes: int,
                 version: str, thread_safe: bool = True):
        self.descriptor = BackendDescriptor("object", num_classes, False, version, thread_safe)
        self.detector = detector

    def compute(self, sample):
        return sum_object_logits(self.detector(sample.image_ref), self.descriptor.output_dim)


class SceneBackend(Backend):
    def __init__(self, classifier: Callable[[str], Sequence[float]], version: str,
                 thread_safe: bool = True):
        self.descriptor = BackendDescriptor("scene", NUM_SCENES, False, version, thread_safe)
        self.classifier = classifier

    def compute(self, sample):
        return scene_feature(self.classifier(sample.image_ref), self.descriptor.version).vector


class OcrBackend(Backend):
    """OCR words (from an engine or a sidecar file) → gate → sentence encoder.

    Words are joined verbatim; no text normalization is applied to them.
    """

    def __init__(self, word_source: Callable[[str], Sequence[str]],
                 sentence_encoder: Callable[[str], np.ndarray], output_dim: int, version: str,
                 min_words: int = OCR_MIN_WORDS, thread_safe: bool = True):
        self.descriptor = BackendDescriptor("ocr", output_dim, False, version, thread_safe)
        self.word_source = word_source
        self.sentence_encoder = sentence_encoder
        self.min_words = min_words

    def compute(self, sample):
        return ocr_gate_and_encode(self.word_source(sample.image_ref), self.sentence_encoder,
                                   self.min_words)


def load_word_sidecar(path: str | Path) -> dict[str, list[str]]:
    """Read ``{"image": ref, "words": [...]}`` lines into a lookup table."""
    table: dict[str, list[str]] = {}
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if not isinstance(rec.get("image"), str) or not isinstance(rec.get("words"), list):
                raise DataError(f"{path}:{lineno}: expected 'image' and 'words' fields")
            table[rec["image"]] = [str(w) for w in rec["words"]]
    return table


# --------------------------------------------------------------------------
# registry
# --------------------------------------------------------------------------

Registry = Mapping[str, Backend]


def check_registry(registry: Registry) -> None:
    for name in BRANCHES:
        if name not in registry:
            raise ConfigError(f"backend registry has no entry for branch {name!r}", key=f"backends.{name}")
        if registry[name].descriptor.branch != name:
            raise ConfigError(f"registry entry {name!r} serves branch {registry[name].descriptor.branch!r}",
                              key=f"backends.{name}")


def extract_bundle(sample: Sample, registry: Registry) -> FeatureBundle:
    check_registry(registry)
    return FeatureBundle(sample.id, tuple(registry[name].encode(sample) for name in BRANCHES))


def _import_object(path: str):
    module, _, attr = path.partition(":")
    if not attr:
        raise ConfigError(f"factory must look like 'module:attribute', got {path!r}")
    try:
        return getattr(importlib.import_module(module), attr)
    except (ImportError, AttributeError) as exc:
        raise ConfigError(f"cannot import factory {path!r}: {exc}") from exc


_STUB_KEYS = {"kind", "version", "output_dim", "presence", "planted", "signal", "noise"}
_EXTERNAL_KEYS = {"kind", "version", "output_dim", "factory", "params"}
_SIDECAR_KEYS = {"kind", "version", "output_dim", "words", "encoder", "min_words", "params"}


def build_backend(branch: str, spec: Mapping, base_dir: Path | None = None) -> Backend:
    """Instantiate one backend from its configuration entry.

    Kinds: ``stub``; ``external`` (``factory: "module:callable"`` called with
    ``branch``, ``output_dim``, ``version`` and ``params``, returning a Backend);
    ``ocr-sidecar`` (precomputed OCR word lists plus a sentence encoder, either
    ``"stub"`` or a factory path).
    """
    check_branch(branch)
    kind = spec.get("kind", "stub")
    allowed = {"stub": _STUB_KEYS, "external": _EXTERNAL_KEYS, "ocr-sidecar": _SIDECAR_KEYS}.get(kind)
    if allowed is None:
        raise ConfigError(f"unknown backend kind {kind!r}", key=f"backends.{branch}.kind")
    for key in spec:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} for {kind} backend", key=f"backends.{branch}.{key}")
    version = str(spec.get("version", f"{kind}-1"))
    output_dim = int(spec.get("output_dim", DEFAULT_DIMS[branch]))
    if kind == "stub":
        return StubBackend(branch, output_dim, version, spec.get("presence", "always"),
                           bool(spec.get("planted", False)), float(spec.get("signal", 4.0)),
                           float(spec.get("noise", 1.0)))
    if kind == "external":
        if "factory" not in spec:
            raise ConfigError("external backend needs 'factory'", key=f"backends.{branch}.factory")
        backend = _import_object(spec["factory"])(branch=branch, output_dim=output_dim, version=version,
                                                  **spec.get("params", {}))
        if not isinstance(backend, Backend):
            raise ConfigError(f"factory {spec['factory']!r} did not return a Backend",
                              key=f"backends.{branch}.factory")
        return backend
    if branch != "ocr":
        raise ConfigError("ocr-sidecar backends serve only the 'ocr' branch", key=f"backends.{branch}.kind")
    words_path = Path(spec["words"])
    if base_dir is not None and not words_path.is_absolute():
        words_path = base_dir / words_path
    table = load_word_sidecar(words_path)
    encoder_spec = spec.get("encoder", "stub")
    if encoder_spec == "stub":
        encoder = StubSentenceEncoder(output_dim, f"{version}-sent")
    else:
        encoder = _import_object(encoder_spec)(output_dim=output_dim, **spec.get("params", {}))
    return OcrBackend(lambda ref: table.get(ref, []), encoder, output_dim, version,
                      int(spec.get("min_words", OCR_MIN_WORDS)))


def build_registry(specs: Mapping[str, Mapping], base_dir: Path | None = None) -> dict[str, Backend]:
    for name in specs:
        if name not in BRANCH_INDEX:
            raise ConfigError(f"unknown branch {name!r} in backends", key=f"backends.{name}")
    registry = {name: build_backend(name, specs[name], base_dir) for name in BRANCHES if name in specs}
    check_registry(registry)
    return registry
