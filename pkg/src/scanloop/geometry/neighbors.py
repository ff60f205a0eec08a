"""Exact neighbourhood search over a fixed point set (scipy cKDTree)."""

import numpy as np
from scipy.spatial import cKDTree

from scanloop.common.exceptions import ContractError, DimensionError


def _distances(points: np.ndarray, query: np.ndarray) -> np.ndarray:
    diff = points - query
    return np.sqrt((diff * diff).sum(axis=1))


class NeighborIndex:
    """Immutable spatial index; results equal a brute-force scan of the same set."""

    def __init__(self, points: np.ndarray):
        points = np.array(points, dtype=np.float64).reshape(-1, 3)
        points.setflags(write=False)
        self.points = points
        self._tree = cKDTree(points) if len(points) else None

    def __len__(self) -> int:
        return int(self.points.shape[0])

    def radius(self, query: np.ndarray, r: float) -> np.ndarray:
        """Ids within Euclidean distance <= r, ascending."""
        if r <= 0:
            raise ContractError(f"radius must be positive, got {r}")
        if self._tree is None:
            return np.zeros(0, dtype=np.int64)
        query = np.asarray(query, dtype=np.float64).reshape(3)
        # superset from the tree, then the exact test
        candidates = np.asarray(
            self._tree.query_ball_point(query, r * (1.0 + 1e-9) + 1e-12), dtype=np.int64
        )
        if candidates.size == 0:
            return candidates
        keep = _distances(self.points[candidates], query) <= r
        return np.sort(candidates[keep])

    def knn(self, query: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        """The k nearest ids (ties -> lower id) and their distances, nearest first."""
        if k < 1:
            raise ContractError(f"k must be >= 1, got {k}")
        if self._tree is None:
            return np.zeros(0, dtype=np.int64), np.zeros(0)
        query = np.asarray(query, dtype=np.float64).reshape(3)
        k = min(k, len(self))
        dists, _ = self._tree.query(query, k=k)
        kth = float(np.atleast_1d(dists)[-1])
        # every point at or inside the k-th distance, so ties are all visible
        candidates = np.asarray(
            self._tree.query_ball_point(query, kth * (1.0 + 1e-9) + 1e-12), dtype=np.int64
        )
        d = _distances(self.points[candidates], query)
        order = np.lexsort((candidates, d))[:k]
        return candidates[order], d[order]

    def nearest(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Nearest id and distance for each query row."""
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        if self._tree is None:
            raise ContractError("nearest neighbour in an empty set")
        dists, ids = self._tree.query(queries, k=1)
        return np.asarray(ids, dtype=np.int64), np.asarray(dists, dtype=np.float64)

    def radius_batch(self, queries: np.ndarray, r: float) -> list[np.ndarray]:
        """``radius`` for every query row, with a single tree traversal."""
        if r <= 0:
            raise ContractError(f"radius must be positive, got {r}")
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        if self._tree is None:
            return [np.zeros(0, dtype=np.int64) for _ in range(len(queries))]
        hits = self._tree.query_ball_point(queries, r * (1.0 + 1e-9) + 1e-12)
        out = []
        for q, cand in zip(queries, hits):
            cand = np.asarray(cand, dtype=np.int64)
            if cand.size:
                cand = np.sort(cand[_distances(self.points[cand], q) <= r])
            out.append(cand)
        return out


def radius_neighbors(index: NeighborIndex, query: np.ndarray, r: float) -> list[int]:
    return index.radius(query, r).tolist()


def knn(index: NeighborIndex, query: np.ndarray, k: int) -> list[int]:
    return index.knn(query, k)[0].tolist()


def nearest_with_ties(points: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Brute-force nearest id per query; equidistant candidates resolve to the lower id."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise DimensionError("nearest_with_ties needs at least one reference point")
    out = np.empty(len(queries), dtype=np.int64)
    block = max(1, 2_000_000 // max(1, len(points)))
    for start in range(0, len(queries), block):
        q = queries[start : start + block]
        d2 = ((q[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
        out[start : start + block] = np.argmin(d2, axis=1)  # argmin keeps the first minimum
    return out
