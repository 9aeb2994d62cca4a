"""Historical execution database.

Records live in an in-memory matrix of unit vectors and are searched
exactly (flat scan). Persistence is a JSONL append log: one header line
followed by one record per line. A line counts as durable once its
terminating newline is on disk.
"""

from __future__ import annotations

import logging
import os
import threading
import time
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .core import (
    ExecutionRecord,
    SerializationError,
    TaskRepresentation,
    deserialize,
    serialize,
    validate_record,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class StoreError(Exception):
    pass


class DimensionMismatch(StoreError):
    pass


class DuplicateRecord(StoreError):
    pass


class UnknownRecord(StoreError, KeyError):
    pass


class IncompatibleStore(StoreError):
    """A persisted store cannot be opened with the active configuration."""


@dataclass(frozen=True)
class StoreHeader:
    format_version: int
    embedding_dim: int
    hash_seed: int
    created_at: int


@dataclass(frozen=True)
class RetrievalHit:
    record: ExecutionRecord
    similarity: float


@dataclass(frozen=True)
class RecordFilter:
    policy_ids: frozenset[str] | None = None
    since: int | None = None
    until: int | None = None
    predicate: Callable[[ExecutionRecord], bool] | None = None


def _now_ms() -> int:
    return int(time.time() * 1000)


def _sort_key(hit: RetrievalHit):
    return (-hit.similarity, hit.record.created_at, hit.record.record_id)


class StoreSnapshot:
    """Immutable read view over the first ``count`` records of a store."""

    def __init__(self, records, matrix, created, codes, code_of):
        self._records: tuple[ExecutionRecord, ...] = records
        self._matrix = matrix
        self._created = created
        self._codes = codes
        self._code_of: dict[str, int] = code_of

    def count(self) -> int:
        return len(self._records)

    def records(self) -> tuple[ExecutionRecord, ...]:
        return self._records

    def similarities(self, query: TaskRepresentation | Sequence[float]) -> np.ndarray:
        vec = query.vector if isinstance(query, TaskRepresentation) else query
        q = np.asarray(vec, dtype=float)
        if self._matrix.shape[1] != q.shape[0]:
            raise DimensionMismatch(f"query dimension {q.shape[0]} != store dimension {self._matrix.shape[1]}")
        q = q / np.linalg.norm(q)
        return np.clip(self._matrix @ q, -1.0, 1.0)

    def _mask(self, flt: RecordFilter | None) -> np.ndarray:
        n = len(self._records)
        mask = np.ones(n, dtype=bool)
        if flt is None:
            return mask
        if flt.policy_ids is not None:
            wanted = [self._code_of[p] for p in flt.policy_ids if p in self._code_of]
            mask &= np.isin(self._codes, wanted)
        if flt.since is not None:
            mask &= self._created >= flt.since
        if flt.until is not None:
            mask &= self._created <= flt.until
        if flt.predicate is not None:
            for i in np.flatnonzero(mask):
                if not flt.predicate(self._records[i]):
                    mask[i] = False
        return mask

    def _select(self, sims: np.ndarray, cand: np.ndarray, k: int) -> list[RetrievalHit]:
        if cand.size > k:
            sc = sims[cand]
            kth = np.partition(sc, cand.size - k)[cand.size - k]
            cand = cand[sc >= kth]
        hits = [RetrievalHit(self._records[i], float(sims[i])) for i in cand]
        hits.sort(key=_sort_key)
        return hits[:k]

    def top_k(self, query, k: int, flt: RecordFilter | None = None) -> list[RetrievalHit]:
        if k <= 0:
            raise ValueError("k must be a positive integer")
        if not self._records:
            return []
        sims = self.similarities(query)
        return self._select(sims, np.flatnonzero(self._mask(flt)), k)

    def top_k_per_policy(self, query, k: int, policy_ids: Iterable[str]) -> dict[str, list[RetrievalHit]]:
        """``top_k`` restricted to each policy in turn, sharing one scan."""
        if k <= 0:
            raise ValueError("k must be a positive integer")
        policy_ids = list(policy_ids)
        if not self._records:
            return {p: [] for p in policy_ids}
        sims = self.similarities(query)
        out = {}
        for p in policy_ids:
            code = self._code_of.get(p)
            if code is None:
                out[p] = []
                continue
            out[p] = self._select(sims, np.flatnonzero(self._codes == code), k)
        return out


class RecordStore:
    """Embedding-indexed store with a single serialized writer.

    Readers call :meth:`snapshot` (or the query helpers, which snapshot
    internally) and never observe a half-inserted record.
    """

    def __init__(
        self,
        embedding_dim: int,
        hash_seed: int,
        *,
        path: str | os.PathLike | None = None,
        created_at: int | None = None,
        fsync: bool = False,
    ):
        self.header = StoreHeader(FORMAT_VERSION, embedding_dim, hash_seed, created_at or _now_ms())
        self.path = os.fspath(path) if path is not None else None
        self.fsync = fsync
        self.dropped_lines = 0
        self._lock = threading.RLock()
        self._records: list[ExecutionRecord] = []
        self._index: dict[str, int] = {}
        self._matrix = np.empty((16, embedding_dim))
        self._created = np.empty(16, dtype=np.int64)
        self._codes = np.empty(16, dtype=np.int32)
        self._code_of: dict[str, int] = {}
        self._log = None
        if self.path is not None:
            self._attach(self.path, write_header=True)

    @property
    def dim(self) -> int:
        return self.header.embedding_dim

    # -- writes ------------------------------------------------------------

    def _attach(self, path: str, *, write_header: bool) -> None:
        self._log = open(path, "a", encoding="utf-8")
        if write_header:
            self._append_line(serialize(self.header))

    def _append_line(self, line: str) -> None:
        self._log.write(line + "\n")
        self._log.flush()
        if self.fsync:
            os.fsync(self._log.fileno())

    def _grow(self) -> None:
        cap = self._matrix.shape[0] * 2
        # Fresh arrays: snapshots keep referencing the old ones.
        m = np.empty((cap, self.dim))
        m[: len(self._records)] = self._matrix[: len(self._records)]
        c = np.empty(cap, dtype=np.int64)
        c[: len(self._records)] = self._created[: len(self._records)]
        p = np.empty(cap, dtype=np.int32)
        p[: len(self._records)] = self._codes[: len(self._records)]
        self._matrix, self._created, self._codes = m, c, p

    def _check(self, record: ExecutionRecord) -> None:
        if len(record.representation.vector) != self.dim:
            raise DimensionMismatch(
                f"record dimension {len(record.representation.vector)} != store dimension {self.dim}"
            )
        problems = validate_record(record)
        if problems:
            raise ValueError(f"invalid record {record.record_id!r}: {'; '.join(problems)}")

    def _add(self, record: ExecutionRecord) -> None:
        n = len(self._records)
        if n == self._matrix.shape[0]:
            self._grow()
        self._matrix[n] = record.representation.vector
        self._created[n] = record.created_at
        self._codes[n] = self._code_of.setdefault(record.policy_id, len(self._code_of))
        # Publishing the record last makes the row visible atomically.
        self._records.append(record)
        self._index[record.record_id] = n

    def insert(self, record: ExecutionRecord) -> str:
        self._check(record)
        with self._lock:
            if record.record_id in self._index:
                raise DuplicateRecord(record.record_id)
            if self._log is not None:
                self._append_line(serialize(record))
            self._add(record)
        return record.record_id

    def revise(self, record: ExecutionRecord) -> ExecutionRecord:
        """Replace a record by a new version; the old line stays in the log."""
        self._check(record)
        with self._lock:
            i = self._index.get(record.record_id)
            if i is None:
                raise UnknownRecord(record.record_id)
            old = self._records[i]
            if list(old.representation.vector) != list(record.representation.vector):
                raise StoreError("a revision may not change the representation")
            record = replace(record, version=old.version + 1, created_at=old.created_at)
            if self._log is not None:
                self._append_line(serialize(record))
            self._records[i] = record
        return record

    def close(self) -> None:
        with self._lock:
            if self._log is not None:
                self._log.close()
                self._log = None

    # -- reads -------------------------------------------------------------

    def count(self) -> int:
        return len(self._records)

    def get(self, record_id: str) -> ExecutionRecord:
        try:
            return self._records[self._index[record_id]]
        except KeyError:
            raise UnknownRecord(record_id) from None

    def __contains__(self, record_id: str) -> bool:
        return record_id in self._index

    def snapshot(self) -> StoreSnapshot:
        with self._lock:
            n = len(self._records)
            return StoreSnapshot(
                tuple(self._records),
                self._matrix[:n],
                self._created[:n],
                self._codes[:n],
                dict(self._code_of),
            )

    def records(self) -> tuple[ExecutionRecord, ...]:
        return self.snapshot().records()

    def top_k(self, query, k: int, flt: RecordFilter | None = None) -> list[RetrievalHit]:
        return self.snapshot().top_k(query, k, flt)

    def top_k_per_policy(self, query, k: int, policy_ids: Iterable[str]) -> dict[str, list[RetrievalHit]]:
        return self.snapshot().top_k_per_policy(query, k, policy_ids)

    # -- persistence -------------------------------------------------------

    def save(self, path: str | os.PathLike) -> None:
        """Rewrite the whole store (latest version of each record) to ``path``."""
        path = os.fspath(path)
        tmp = path + ".tmp"
        snap = self.snapshot()
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(serialize(self.header) + "\n")
            for rec in snap.records():
                fh.write(serialize(rec) + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)

    @classmethod
    def load(
        cls,
        path: str | os.PathLike,
        *,
        embedding_dim: int | None = None,
        hash_seed: int | None = None,
        attach: bool = False,
        fsync: bool = False,
    ) -> RecordStore:
        """Read a log file. With ``attach`` the store keeps appending to it.

        A final line without its newline is treated as a torn write: it is
        dropped (and cut from the file when attaching) and counted in
        ``dropped_lines``.
        """
        path = os.fspath(path)
        with open(path, "rb") as fh:
            data = fh.read()
        lines = data.split(b"\n")
        tail = lines.pop()  # bytes after the last newline
        dropped = 1 if tail.strip() else 0
        if not lines:
            raise IncompatibleStore(f"{path}: missing store header")
        try:
            header = deserialize(lines[0], StoreHeader)
        except SerializationError as exc:
            raise IncompatibleStore(f"{path}: unreadable header ({exc})") from None
        if header.format_version != FORMAT_VERSION:
            raise IncompatibleStore(f"format_version {header.format_version} != supported {FORMAT_VERSION}")
        if embedding_dim is not None and header.embedding_dim != embedding_dim:
            raise IncompatibleStore(f"embedding_dim {header.embedding_dim} != configured {embedding_dim}")
        if hash_seed is not None and header.hash_seed != hash_seed:
            raise IncompatibleStore(f"hash_seed {header.hash_seed} != configured {hash_seed}")
        store = cls(header.embedding_dim, header.hash_seed, created_at=header.created_at, fsync=fsync)
        for lineno, raw in enumerate(lines[1:], start=2):
            if not raw.strip():
                continue
            try:
                rec = deserialize(raw, ExecutionRecord)
            except SerializationError as exc:
                raise StoreError(f"{path}:{lineno}: corrupt record ({exc})") from None
            i = store._index.get(rec.record_id)
            if i is None:
                store._check(rec)
                store._add(rec)
            elif rec.version > store._records[i].version:
                store._records[i] = rec
        if dropped:
            log.warning("%s: dropped %d truncated trailing line", path, dropped)
        store.dropped_lines = dropped
        store.path = path
        if attach:
            if dropped:
                with open(path, "r+b") as fh:
                    fh.truncate(len(data) - len(tail))
            store._attach(path, write_header=False)
        return store

    @classmethod
    def open(cls, path: str | os.PathLike, embedding_dim: int, hash_seed: int, *, fsync: bool = False) -> RecordStore:
        """Load ``path`` for appending, creating it if absent."""
        if os.path.exists(path) and os.path.getsize(path) > 0:
            return cls.load(path, embedding_dim=embedding_dim, hash_seed=hash_seed, attach=True, fsync=fsync)
        return cls(embedding_dim, hash_seed, path=path, fsync=fsync)
