"""Rigid kernel points and their sparse influence matrices."""

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from scanloop.common.exceptions import ContractError, DimensionError
from scanloop.compute import ops
from scanloop.compute.tensor import Tensor

KERNEL_EXTENT = 0.66  # shell radius of the non-central kernel points, in units of sigma


@dataclass(frozen=True, eq=False)
class KernelLayout:
    """Kernel offsets (K x 3, meters) and linear influence radius sigma."""

    offsets: np.ndarray
    sigma: float

    def __post_init__(self):
        if self.sigma <= 0:
            raise ContractError(f"kernel sigma must be positive, got {self.sigma}")
        offsets = np.array(self.offsets, dtype=np.float64).reshape(-1, 3)
        if np.max(np.linalg.norm(offsets, axis=1)) > self.sigma + 1e-12:
            raise ContractError("kernel offsets must lie within sigma of the center")
        offsets.setflags(write=False)
        object.__setattr__(self, "offsets", offsets)

    @classmethod
    def fibonacci(cls, sigma: float, count: int = 15) -> "KernelLayout":
        """One central point plus count-1 points spread on a sphere of radius 0.66 sigma."""
        if sigma <= 0:
            raise ContractError(f"kernel sigma must be positive, got {sigma}")
        if count < 1:
            raise ContractError("a kernel needs at least one point")
        shell = count - 1
        golden = np.pi * (3.0 - np.sqrt(5.0))
        i = np.arange(shell)
        z = 1.0 - 2.0 * (i + 0.5) / max(shell, 1)
        r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
        directions = np.column_stack([r * np.cos(golden * i), r * np.sin(golden * i), z])
        offsets = np.vstack([np.zeros((1, 3)), KERNEL_EXTENT * sigma * directions])
        return cls(offsets, sigma)

    @classmethod
    def for_support(cls, radius: float, count: int = 15) -> "KernelLayout":
        """Layout whose support radius (sigma + shell radius) equals ``radius``."""
        return cls.fibonacci(radius / (1.0 + KERNEL_EXTENT), count)

    @property
    def count(self) -> int:
        return int(self.offsets.shape[0])

    @property
    def support_radius(self) -> float:
        """Beyond this distance a neighbour has zero influence on every kernel point."""
        return float(self.sigma + np.max(np.linalg.norm(self.offsets, axis=1)))

    def influence(self, u: np.ndarray) -> np.ndarray:
        return np.maximum(0.0, 1.0 - u / self.sigma)


def flatten_neighbors(neighbors: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    if len(neighbors) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    counts = [len(nb) for nb in neighbors]
    rows = np.repeat(np.arange(len(neighbors), dtype=np.int64), counts)
    cols = np.concatenate([np.asarray(nb, dtype=np.int64).reshape(-1) for nb in neighbors])
    return rows, cols.astype(np.int64)


def influence_matrices(
    queries: np.ndarray,
    supports: np.ndarray,
    neighbors: Sequence[np.ndarray],
    layout: KernelLayout,
) -> list[sparse.csr_matrix]:
    """A_k[i, j] = h(|p_j - q_i - o_k|) for every neighbour j of query i."""
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    supports = np.asarray(supports, dtype=np.float64).reshape(-1, 3)
    if len(neighbors) != len(queries):
        raise DimensionError(f"{len(neighbors)} neighbour lists for {len(queries)} queries")
    rows, cols = flatten_neighbors(neighbors)
    shape = (len(queries), len(supports))
    rel = supports[cols] - queries[rows]
    mats = []
    for offset in layout.offsets:
        h = layout.influence(np.linalg.norm(rel - offset, axis=1))
        keep = h > 0
        mats.append(sparse.csr_matrix((h[keep], (rows[keep], cols[keep])), shape=shape))
    return mats


def kpconv_forward(
    level_in,
    neighbors: Sequence[np.ndarray],
    layout: KernelLayout,
    W: Tensor,
    queries: np.ndarray | None = None,
) -> Tensor:
    """out_i = sum_{j in N(i)} sum_k h(|p_j - p_i - o_k|) W_k f_j.

    ``level_in`` supplies support points and features; queries default to the
    support points themselves. Queries with no neighbours get zero rows.
    """
    queries = level_in.points if queries is None else queries
    influences = influence_matrices(queries, level_in.points, neighbors, layout)
    return ops.kernel_conv(level_in.descriptors, W, influences)
