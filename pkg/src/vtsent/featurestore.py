"""On-disk cache of feature records, keyed by (sample id, branch, backend version).

Layout: one shard per branch, ``<root>/<branch>.shard``, holding records of the form::

    u32  body length
    body:
      u16  key length, key bytes (utf-8 "sample_id \\0 branch \\0 version")
      u32  dim
      u8   present
      dim x f32 (little-endian)
    u32  crc32(body)

plus ``<branch>.idx``: one ``<key>\\t<offset>`` line per record, appended only after
the record itself is flushed.  The index can always be rebuilt from the shard.
Entries are immutable; a new backend version is the only way to change a feature.
"""

from __future__ import annotations

import logging
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from filelock import FileLock

from .dataset import Dataset
from .encoders import BRANCHES, FeatureBundle, FeatureRecord, Registry, check_branch, check_registry
from .errors import DataError, VtsentError

logger = logging.getLogger(__name__)

CACHE_ENV = "VTSENT_CACHE_DIR"

_U32 = struct.Struct("<I")
_U16 = struct.Struct("<H")


class ConflictingEntryError(VtsentError):
    pass


class CorruptEntryError(DataError):
    def __init__(self, key: "CacheKey", reason: str):
        super().__init__(f"corrupt cache entry {key}: {reason}")
        self.key = key


@dataclass(frozen=True)
class CacheKey:
    sample_id: str
    branch: str
    backend_version: str

    def __post_init__(self):
        if not (self.sample_id and self.branch and self.backend_version):
            raise ValueError("cache key components must be non-empty")
        if any("\0" in part or "\t" in part or "\n" in part
               for part in (self.sample_id, self.branch, self.backend_version)):
            raise ValueError("cache key components may not contain NUL, tab or newline")
        check_branch(self.branch)

    def encode(self) -> bytes:
        return "\0".join((self.sample_id, self.branch, self.backend_version)).encode("utf-8")

    def __str__(self) -> str:
        return f"{self.sample_id}/{self.branch}@{self.backend_version}"


def _index_token(key: CacheKey) -> str:
    return f"{key.sample_id}\0{key.backend_version}"


def pack_record(key: CacheKey, record: FeatureRecord) -> bytes:
    kb = key.encode()
    body = b"".join((
        _U16.pack(len(kb)), kb,
        _U32.pack(record.dim),
        b"\x01" if record.present else b"\x00",
        record.vector.astype("<f4").tobytes(),
    ))
    return _U32.pack(len(body)) + body + _U32.pack(zlib.crc32(body))


def unpack_record(key: CacheKey, buf: bytes) -> FeatureRecord:
    if len(buf) < 4:
        raise CorruptEntryError(key, "truncated length prefix")
    (n,) = _U32.unpack_from(buf, 0)
    if len(buf) < 4 + n + 4:
        raise CorruptEntryError(key, "truncated record")
    body = buf[4:4 + n]
    (crc,) = _U32.unpack_from(buf, 4 + n)
    if zlib.crc32(body) != crc:
        raise CorruptEntryError(key, "checksum mismatch")
    (klen,) = _U16.unpack_from(body, 0)
    if body[2:2 + klen] != key.encode():
        raise CorruptEntryError(key, "stored key does not match")
    pos = 2 + klen
    (dim,) = _U32.unpack_from(body, pos)
    present = body[pos + 4] == 1
    payload = body[pos + 5:]
    if len(payload) != 4 * dim:
        raise CorruptEntryError(key, "payload length does not match dim")
    vec = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    return FeatureRecord(key.branch, vec, present, key.backend_version)


class FeatureStore:
    """Append-only feature cache under ``root`` (defaults to ``$VTSENT_CACHE_DIR``)."""

    def __init__(self, root: str | Path | None = None):
        root = root or os.environ.get(CACHE_ENV)
        if not root:
            raise DataError(f"no cache root given and ${CACHE_ENV} is unset")
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._index: dict[str, dict[str, int]] = {}
        self._index_size: dict[str, int] = {}

    def shard_path(self, branch: str) -> Path:
        return self.root / f"{branch}.shard"

    def index_path(self, branch: str) -> Path:
        return self.root / f"{branch}.idx"

    def _refresh_index(self, branch: str) -> dict[str, int]:
        path = self.index_path(branch)
        index = self._index.setdefault(branch, {})
        if not path.exists():
            if self.shard_path(branch).exists() and self.shard_path(branch).stat().st_size:
                self.rebuild_index(branch)
            return self._index.setdefault(branch, {})
        size = path.stat().st_size
        start = self._index_size.get(branch, 0)
        if size == start:
            return index
        with path.open("rb") as fh:
            fh.seek(start)
            data = fh.read()
        # an unterminated trailing line belongs to a writer that has not finished
        end = data.rfind(b"\n") + 1
        for line in data[:end].decode("utf-8").splitlines():
            token, _, offset = line.rpartition("\t")
            index[token] = int(offset)
        self._index_size[branch] = start + end
        return index

    def rebuild_index(self, branch: str) -> int:
        """Rescan a shard and rewrite its index; returns the number of records."""
        shard = self.shard_path(branch)
        lines, index = [], {}
        with shard.open("rb") as fh:
            data = fh.read()
        pos = 0
        while pos + 4 <= len(data):
            (n,) = _U32.unpack_from(data, pos)
            if pos + 8 + n > len(data):
                logger.warning("%s: ignoring truncated tail at offset %d", shard, pos)
                break
            body = data[pos + 4:pos + 4 + n]
            (klen,) = _U16.unpack_from(body, 0)
            sid, _, version = body[2:2 + klen].decode("utf-8").split("\0")
            token = f"{sid}\0{version}"
            index[token] = pos
            lines.append(f"{token}\t{pos}\n")
            pos += 8 + n
        tmp = self.index_path(branch).with_suffix(".idx.tmp")
        tmp.write_text("".join(lines), encoding="utf-8")
        os.replace(tmp, self.index_path(branch))
        self._index[branch] = index
        self._index_size[branch] = self.index_path(branch).stat().st_size
        return len(index)

    def _read_at(self, key: CacheKey, offset: int) -> FeatureRecord:
        with self.shard_path(key.branch).open("rb") as fh:
            fh.seek(offset)
            head = fh.read(4)
            if len(head) < 4:
                raise CorruptEntryError(key, "truncated length prefix")
            (n,) = _U32.unpack(head)
            rest = fh.read(n + 4)
        return unpack_record(key, head + rest)

    def get(self, key: CacheKey) -> FeatureRecord | None:
        offset = self._refresh_index(key.branch).get(_index_token(key))
        if offset is None:
            return None
        return self._read_at(key, offset)

    def __contains__(self, key: CacheKey) -> bool:
        return _index_token(key) in self._refresh_index(key.branch)

    def put(self, key: CacheKey, record: FeatureRecord) -> None:
        if record.branch != key.branch or record.backend_version != key.backend_version:
            raise ValueError(f"record ({record.branch}@{record.backend_version}) does not match key {key}")
        blob = pack_record(key, record)
        with FileLock(str(self.root / f"{key.branch}.lock")):
            index = self._refresh_index(key.branch)
            token = _index_token(key)
            if token in index:
                existing = self._read_at(key, index[token])
                if not existing.same_as(record):
                    raise ConflictingEntryError(
                        f"cache entry {key} already holds a different feature; bump the backend version")
                return
            shard = self.shard_path(key.branch)
            with shard.open("ab") as fh:
                offset = fh.tell()
                fh.write(blob)
            with self.index_path(key.branch).open("a", encoding="utf-8") as fh:
                fh.write(f"{token}\t{offset}\n")
            index[token] = offset

    def keys(self, branch: str) -> list[tuple[str, str]]:
        """(sample_id, version) pairs stored for ``branch``."""
        return [tuple(t.split("\0")) for t in self._refresh_index(branch)]


@dataclass
class MaterializeResult:
    bundles: dict[str, FeatureBundle] = field(default_factory=dict)
    errors: dict[str, Exception] = field(default_factory=dict)
    encode_calls: int = 0
    cache_hits: int = 0


def materialize_bundles(store: FeatureStore | None, dataset: Dataset | Iterable, registry: Registry,
                        keep_going: bool = False) -> MaterializeResult:
    """Feature bundles for every sample, served from ``store`` where possible.

    Misses are encoded and written back.  ``store=None`` disables caching.  With
    ``keep_going`` a failing sample is recorded in ``errors`` and skipped.
    """
    check_registry(registry)
    result = MaterializeResult()
    for sample in dataset:
        try:
            records = []
            for name in BRANCHES:
                backend = registry[name]
                record = None
                key = CacheKey(sample.id, name, backend.descriptor.version)
                if store is not None:
                    record = store.get(key)
                if record is None:
                    record = backend.encode(sample)
                    result.encode_calls += 1
                    if store is not None:
                        store.put(key, record)
                else:
                    result.cache_hits += 1
                records.append(record)
            result.bundles[sample.id] = FeatureBundle(sample.id, tuple(records))
        except (VtsentError, OSError) as exc:
            if not keep_going:
                raise
            logger.error("skipping %s: %s", sample.id, exc)
            result.errors[sample.id] = exc
    return result


def load_bundles(store: FeatureStore, dataset: Dataset, versions: dict[str, str]) -> dict[str, FeatureBundle]:
    """Read complete bundles from the cache only; raises DataError on any miss."""
    out = {}
    for sample in dataset:
        records = []
        for name in BRANCHES:
            key = CacheKey(sample.id, name, versions[name])
            record = store.get(key)
            if record is None:
                raise DataError(f"no cached feature for {key}; run 'extract' first")
            records.append(record)
        out[sample.id] = FeatureBundle(sample.id, tuple(records))
    return out
