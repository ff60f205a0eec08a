"""Score matrices, dustbin-augmented Sinkhorn and top-k keypoint pairs."""

import logging
from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np
from scipy import special

from scanloop.common.config import MatchingSettings
from scanloop.common.exceptions import ContractError, DimensionError
from scanloop.compute import ops
from scanloop.compute.params import ParameterStore
from scanloop.compute.tensor import Tensor

logger = logging.getLogger(__name__)

SPARSE_DUSTBIN = "matching.alpha_sparse"
DENSE_DUSTBIN = "matching.alpha_dense"


def init_matching(store: ParameterStore, cfg: MatchingSettings) -> None:
    store.add(SPARSE_DUSTBIN, np.array(cfg.dustbin_init))
    store.add(DENSE_DUSTBIN, np.array(cfg.dustbin_init))


def score_matrix(Ha: Tensor, Hb: Tensor) -> Tensor:
    """C = Ha Hb^T / sqrt(d)."""
    if Ha.ndim != 2 or Hb.ndim != 2 or Ha.shape[1] != Hb.shape[1]:
        raise DimensionError(f"cannot score {Ha.shape} against {Hb.shape}")
    return ops.scale(Ha @ Hb.T, 1.0 / np.sqrt(Ha.shape[1]))


@dataclass(eq=False)
class SoftAssignment:
    """Dustbin-augmented scores and their log-domain normalisation.

    ``raw`` and ``log_assignment`` are (M+1)x(N+1); the last row and column
    are the dustbins.
    """

    raw: Tensor
    log_assignment: Tensor
    iterations: int

    @property
    def rows(self) -> int:
        return self.raw.shape[0] - 1

    @property
    def cols(self) -> int:
        return self.raw.shape[1] - 1

    def interior(self) -> np.ndarray:
        """Log assignment without the dustbin row and column."""
        return self.log_assignment.numpy()[: self.rows, : self.cols]

    def assignment(self) -> np.ndarray:
        return np.exp(self.log_assignment.numpy())

    def row_residual(self) -> float:
        """max |log sum_j exp Z_ij| over interior rows, dustbin column included."""
        z = self.log_assignment.numpy()[: self.rows]
        return float(np.max(np.abs(special.logsumexp(z, axis=1))))

    def col_residual(self) -> float:
        z = self.log_assignment.numpy()[:, : self.cols]
        return float(np.max(np.abs(special.logsumexp(z, axis=0))))


def sinkhorn(
    scores: Tensor, alpha: Tensor, iterations: int, dustbin_mass: bool = True
) -> SoftAssignment:
    """Alternate row and column log-normalisation of the dustbin-padded scores.

    Interior rows and columns carry unit mass; the dustbin row carries N and
    the dustbin column M, so both marginals total M + N. With
    ``dustbin_mass=False`` every row and column, dustbins included, carries
    unit mass: the plain subtract-log-sum-exp update on the padded matrix.
    """
    if iterations < 1:
        raise ContractError(f"Sinkhorn needs at least one iteration, got {iterations}")
    if scores.ndim != 2 or 0 in scores.shape:
        raise ContractError(f"Sinkhorn needs a non-empty score matrix, got {scores.shape}")
    if not (np.all(np.isfinite(scores.numpy())) and np.all(np.isfinite(alpha.numpy()))):
        raise ContractError("Sinkhorn scores must be finite")
    m, n = scores.shape
    log_mu = np.zeros((m + 1, 1))
    log_nu = np.zeros((1, n + 1))
    if dustbin_mass:
        log_mu[m, 0] = np.log(n)
        log_nu[0, n] = np.log(m)
    log_mu, log_nu = Tensor(log_mu), Tensor(log_nu)

    raw = ops.pad_dustbin(scores, alpha)
    z = raw
    for _ in range(iterations):
        z = z - ops.reshape(ops.log_sum_exp_rows(z), (m + 1, 1)) + log_mu
        z = z - ops.reshape(ops.log_sum_exp_cols(z), (1, n + 1)) + log_nu
    return SoftAssignment(raw, z, iterations)


def match_keypoints(
    Ha: Tensor, Hb: Tensor, params: Mapping[str, Tensor], iterations: int
) -> SoftAssignment:
    return sinkhorn(score_matrix(Ha, Hb), params[SPARSE_DUSTBIN], iterations)


@dataclass
class SparseMatches:
    """Keypoint pairs, best first; ``scores`` are assignment probabilities."""

    rows: np.ndarray
    cols: np.ndarray
    scores: np.ndarray
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.rows)

    def pairs(self) -> list[tuple[int, int, float]]:
        return [(int(r), int(c), float(s)) for r, c, s in zip(self.rows, self.cols, self.scores)]


def topk_sparse(soft: SoftAssignment, count: int) -> SparseMatches:
    """The ``count`` largest interior entries; ties go to the lower (row, col)."""
    if count < 1:
        raise ContractError(f"need at least one correspondence, got {count}")
    z = soft.interior()
    rows, cols = np.indices(z.shape)
    rows, cols, flat = rows.ravel(), cols.ravel(), z.ravel()
    order = np.lexsort((cols, rows, -flat))
    truncated = count > flat.size
    if truncated:
        logger.info(
            "fewer interior entries than requested",
            extra={"fields": {"requested": count, "available": int(flat.size)}},
        )
    order = order[:count]
    return SparseMatches(rows[order], cols[order], np.exp(flat[order]), truncated)
