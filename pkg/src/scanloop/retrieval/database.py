"""Exact descriptor search with an optional partition pruner and an append-only file.

File layout (little-endian):

    8 bytes   magic  b"SCNLDB01"
    uint32    descriptor dimension G
    uint64    record count
    per record: float64 x G
"""

import logging
import struct
import threading
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from scanloop.common.exceptions import CheckpointError, ContractError, DimensionError

logger = logging.getLogger(__name__)

DB_MAGIC = b"SCNLDB01"
_HEADER = struct.Struct("<IQ")
_HEADER_SIZE = len(DB_MAGIC) + _HEADER.size


def _distances(matrix: np.ndarray, query: np.ndarray) -> np.ndarray:
    diff = matrix - query
    return np.sqrt((diff * diff).sum(axis=1))


@dataclass
class QueryResult:
    ids: list[int] = field(default_factory=list)
    distances: list[float] = field(default_factory=list)
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.ids)

    def pairs(self) -> list[tuple[int, float]]:
        return list(zip(self.ids, self.distances))


@dataclass(eq=False)
class _Partition:
    pivot: np.ndarray
    members: np.ndarray
    radius: float


class DescriptorDatabase:
    """Ordered (id, descriptor) records; ids are insertion positions.

    Queries return the k smallest Euclidean distances, ties to the lower id.
    With ``partitions > 0`` records are bucketed around pivots and whole
    buckets are skipped by the triangle inequality; results are identical
    to the linear scan.

    A ``path`` starts a fresh file, replacing whatever was there; use
    ``load`` to reopen a saved database.
    """

    def __init__(
        self,
        dim: int,
        normalize: bool = False,
        partitions: int = 0,
        path: str | Path | None = None,
    ):
        if dim < 1:
            raise ContractError(f"descriptor dimension must be positive, got {dim}")
        self.dim = dim
        self.normalize = normalize
        self.partitions = partitions
        self.path = Path(path) if path is not None else None
        self._rows: list[np.ndarray] = []
        self._matrix = np.zeros((0, dim))
        self._buckets: list[_Partition] | None = None
        self._lock = threading.RLock()
        if self.path is not None:
            self._write_header(0)

    def __len__(self) -> int:
        with self._lock:
            return len(self._rows)

    def _prepare(self, descriptor) -> np.ndarray:
        v = np.asarray(descriptor, dtype=np.float64).reshape(-1)
        if v.shape != (self.dim,):
            raise DimensionError(f"descriptor of size {v.size}, database holds {self.dim}")
        if not np.all(np.isfinite(v)):
            raise ContractError("descriptor contains non-finite values")
        if self.normalize:
            norm = np.linalg.norm(v)
            v = v / norm if norm > 0 else v
        return v

    # ── Writes ──

    def add(self, descriptor) -> int:
        v = self._prepare(descriptor)
        with self._lock:
            self._rows.append(v)
            self._matrix = np.vstack([self._matrix, v[None, :]])
            self._buckets = None
            record_id = len(self._rows) - 1
            if self.path is not None:
                self._append_record(v, len(self._rows))
        return record_id

    def get(self, record_id: int) -> np.ndarray:
        with self._lock:
            return self._rows[record_id].copy()

    # ── Queries ──

    def query(
        self,
        descriptor,
        k: int,
        exclude: Callable[[int], bool] | None = None,
    ) -> QueryResult:
        if k < 1:
            raise ContractError(f"k must be >= 1, got {k}")
        q = self._prepare(descriptor)
        with self._lock:
            if not self._rows:
                raise ContractError("query on an empty descriptor database")
            if self.partitions > 0 and len(self._rows) > self.partitions:
                ids, dists = self._partitioned(q, k, exclude)
            else:
                ids, dists = self._linear(q, k, exclude)
            available = len(self._rows)
        truncated = k > available
        if truncated:
            logger.warning(
                "k exceeds database size", extra={"fields": {"k": k, "size": available}}
            )
        return QueryResult(ids.tolist(), dists.tolist(), truncated)

    def _linear(self, q, k, exclude) -> tuple[np.ndarray, np.ndarray]:
        ids = np.arange(len(self._rows))
        if exclude is not None:
            ids = np.array([i for i in ids if not exclude(int(i))], dtype=np.int64)
        d = _distances(self._matrix[ids], q)
        order = np.lexsort((ids, d))[:k]
        return ids[order], d[order]

    def _build_partitions(self) -> list[_Partition]:
        n = len(self._rows)
        pivot_ids = np.linspace(0, n - 1, self.partitions).round().astype(np.int64)
        pivots = self._matrix[np.unique(pivot_ids)]
        to_pivot = np.stack([_distances(self._matrix, p) for p in pivots], axis=1)
        label = np.argmin(to_pivot, axis=1)
        buckets = []
        for b, pivot in enumerate(pivots):
            members = np.flatnonzero(label == b)
            if members.size:
                buckets.append(_Partition(pivot, members, float(to_pivot[members, b].max())))
        return buckets

    def _partitioned(self, q, k, exclude) -> tuple[np.ndarray, np.ndarray]:
        if self._buckets is None:
            self._buckets = self._build_partitions()
        bounds = [
            max(0.0, float(np.linalg.norm(q - b.pivot)) - b.radius) for b in self._buckets
        ]
        best_ids = np.zeros(0, dtype=np.int64)
        best_d = np.zeros(0)
        for i in np.argsort(bounds, kind="stable"):
            # strict: a bucket at exactly the k-th distance may still hold a lower-id tie
            if len(best_ids) == k and bounds[i] > best_d[-1]:
                break
            ids = self._buckets[i].members
            if exclude is not None:
                ids = np.array([j for j in ids if not exclude(int(j))], dtype=np.int64)
            if ids.size == 0:
                continue
            ids = np.concatenate([best_ids, ids])
            d = np.concatenate([best_d, _distances(self._matrix[ids[len(best_ids):]], q)])
            order = np.lexsort((ids, d))[:k]
            best_ids, best_d = ids[order], d[order]
        return best_ids, best_d

    # ── Persistence ──

    def _write_header(self, count: int) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "wb") as fh:
            fh.write(DB_MAGIC + _HEADER.pack(self.dim, count))

    def _append_record(self, v: np.ndarray, count: int) -> None:
        with open(self.path, "r+b") as fh:
            fh.seek(0, 2)
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
            fh.seek(len(DB_MAGIC))
            fh.write(_HEADER.pack(self.dim, count))

    @classmethod
    def load(cls, path: str | Path, normalize: bool = False, partitions: int = 0):
        path = Path(path)
        if not path.exists():
            raise CheckpointError(f"descriptor database {path} does not exist")
        blob = path.read_bytes()
        if len(blob) < _HEADER_SIZE or blob[: len(DB_MAGIC)] != DB_MAGIC:
            raise CheckpointError(f"{path} is not a descriptor database")
        dim, count = _HEADER.unpack_from(blob, len(DB_MAGIC))
        expected = _HEADER_SIZE + 8 * dim * count
        if len(blob) != expected:
            raise CheckpointError(f"{path}: {len(blob)} bytes, header implies {expected}")
        values = np.frombuffer(blob, dtype="<f8", offset=_HEADER_SIZE).reshape(count, dim)
        db = cls(dim, normalize=normalize, partitions=partitions)
        db._rows = [row.astype(np.float64) for row in values]
        db._matrix = values.astype(np.float64).reshape(count, dim)
        db.path = path
        return db


def db_query(
    db: DescriptorDatabase,
    descriptor,
    k: int,
    exclude: Callable[[int], bool] | None = None,
) -> list[tuple[int, float]]:
    """Ranked (id, distance) pairs; see ``DescriptorDatabase.query`` for the truncation flag."""
    return db.query(descriptor, k, exclude).pairs()
