"""Vector table of (user_id, 5-d embedding) rows with brute-force top-k.

User ids are deliberately *not* unique: every enrolment or sighting of a
person may add another row, and repeated ids among the top-k matches are
what gives a caller confidence in an identification.
"""

import csv
import math
import os
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyStoreError, StoreLoadError

DIM = 5
HEADER = ["id"] + [f"v{i}" for i in range(1, DIM + 1)]


@dataclass(frozen=True)
class IdentityRecord:
    user_id: int
    embedding: tuple

    def __post_init__(self):
        if isinstance(self.user_id, bool) or not isinstance(self.user_id, (int, np.integer)):
            raise TypeError(f"user_id must be an integer, got {self.user_id!r}")
        if self.user_id < 0:
            raise ValueError(f"user_id must be non-negative, got {self.user_id}")
        vec = tuple(float(v) for v in np.asarray(self.embedding, dtype=np.float64).ravel())
        if len(vec) != DIM or not all(math.isfinite(v) for v in vec):
            raise ValueError(f"embedding must be {DIM} finite numbers, got {self.embedding!r}")
        object.__setattr__(self, "user_id", int(self.user_id))
        object.__setattr__(self, "embedding", vec)


@dataclass(frozen=True)
class Match:
    user_id: int
    distance: float


class RWLock:
    """Many readers or a single writer. Waiting writers block new readers,
    so a steady stream of queries cannot starve inserts."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = False
        self._waiting_writers = 0

    @contextmanager
    def read(self):
        with self._cond:
            while self._writer or self._waiting_writers:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                if not self._readers:
                    self._cond.notify_all()

    @contextmanager
    def write(self):
        with self._cond:
            self._waiting_writers += 1
            try:
                while self._writer or self._readers:
                    self._cond.wait()
            finally:
                self._waiting_writers -= 1
            self._writer = True
        try:
            yield
        finally:
            with self._cond:
                self._writer = False
                self._cond.notify_all()


class FaceDb:
    def __init__(self, records=(), path=None):
        self.path = Path(path) if path is not None else None
        self.dirty = False
        self._lock = RWLock()
        self._ids = []
        self._vecs = np.zeros((16, DIM), dtype=np.float64)
        for rec in records:
            self._append(rec)
        self.dirty = False

    def _append(self, rec):
        n = len(self._ids)
        if n == len(self._vecs):
            grown = np.zeros((2 * n, DIM), dtype=np.float64)
            grown[:n] = self._vecs
            self._vecs = grown
        self._vecs[n] = rec.embedding
        self._ids.append(rec.user_id)
        self.dirty = True

    def insert(self, record):
        if not isinstance(record, IdentityRecord):
            record = IdentityRecord(*record)
        with self._lock.write():
            self._append(record)

    def __len__(self):
        return len(self._ids)

    def count(self):
        return len(self._ids)

    def count_for(self, user_id):
        with self._lock.read():
            return self._ids.count(user_id)

    def rows(self):
        with self._lock.read():
            return [IdentityRecord(uid, tuple(self._vecs[i]))
                    for i, uid in enumerate(self._ids)]

    def top_k(self, query, k=3):
        """The k rows nearest to ``query``, ascending; ties go to the older row."""
        if k < 1:
            raise ValueError("k must be at least 1")
        q = np.asarray(query, dtype=np.float64).ravel()
        if q.shape != (DIM,):
            raise ValueError(f"query must have {DIM} components, got {q.shape}")
        with self._lock.read():
            n = len(self._ids)
            if n == 0:
                raise EmptyStoreError("the face store is empty")
            m = self._vecs[:n]
            # column-by-column so the summation order is fixed
            d2 = (m[:, 0] - q[0]) ** 2
            for j in range(1, DIM):
                d2 += (m[:, j] - q[j]) ** 2
            dist = np.sqrt(d2)
            order = np.argsort(dist, kind="stable")[:k]
            return [Match(self._ids[i], float(dist[i])) for i in order]

    def persist(self, path=None):
        path = Path(path or self.path)
        with self._lock.read():
            lines = [",".join(HEADER)]
            for i, uid in enumerate(self._ids):
                lines.append(",".join([str(uid)] + [repr(float(v)) for v in self._vecs[i]]))
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text("\n".join(lines) + "\n")
        os.replace(tmp, path)
        self.dirty = False

    @classmethod
    def load(cls, path):
        path = Path(path)
        records = []
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header != HEADER:
                raise StoreLoadError(f"{path}: expected header {','.join(HEADER)}, got {header}", 1)
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != DIM + 1:
                    raise StoreLoadError(f"{path}: expected {DIM + 1} columns, got {len(row)}", lineno)
                try:
                    records.append(IdentityRecord(int(row[0]), tuple(float(v) for v in row[1:])))
                except (TypeError, ValueError) as exc:
                    raise StoreLoadError(f"{path}: {exc}", lineno) from None
        return cls(records, path)
