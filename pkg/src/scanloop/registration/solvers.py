"""Rigid pose solvers: weighted SVD, local-to-global registration and RANSAC."""

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from scanloop.common.exceptions import (
    ContractError,
    DegenerateGeometryError,
    RegistrationFailedError,
)
from scanloop.geometry.transform import RigidTransform
from scanloop.matching.dense import CorrespondenceSet

logger = logging.getLogger(__name__)

RANK_TOL = 1e-10


@dataclass
class RegistrationResult:
    transform: RigidTransform
    inliers: int
    provenance: int  # winning patch id (lgr) or RANSAC trial
    solver: str
    seconds: float
    hypotheses: int = 0
    inlier_history: list[int] = field(default_factory=list)
    reliability: float = 0.0  # mean assignment weight over the correspondences

    def as_dict(self) -> dict:
        return {
            "solver": self.solver,
            "inliers": self.inliers,
            "provenance": self.provenance,
            "hypotheses": self.hypotheses,
            "seconds": self.seconds,
            "inlier_history": list(self.inlier_history),
            "reliability": self.reliability,
            "transform": self.transform.matrix.tolist(),
        }


def weighted_svd(
    source: np.ndarray, target: np.ndarray, weights: np.ndarray | None = None
) -> RigidTransform:
    """argmin over (R, t) of sum_i w_i |R p_i + t - q_i|^2."""
    source = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if len(source) != len(target):
        raise ContractError(f"{len(source)} source points but {len(target)} targets")
    w = np.ones(len(source)) if weights is None else np.asarray(weights, dtype=np.float64)
    if len(source) < 3:
        raise DegenerateGeometryError(f"need at least 3 pairs, got {len(source)}")
    total = w.sum()
    if total <= 0:
        raise DegenerateGeometryError("weights sum to zero")
    p_bar = (w[:, None] * source).sum(axis=0) / total
    q_bar = (w[:, None] * target).sum(axis=0) / total
    H = (w[:, None] * (source - p_bar)).T @ (target - q_bar)
    U, S, Vt = np.linalg.svd(H)
    if S[1] <= RANK_TOL * max(1.0, S[0]):
        raise DegenerateGeometryError(f"cross-covariance has rank < 2 (singular values {S})")
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d if d != 0 else 1.0]) @ U.T
    return RigidTransform(R, q_bar - R @ p_bar)


def _reliability(corr: CorrespondenceSet) -> float:
    return float(corr.weights.mean()) if len(corr) else 0.0


def inlier_mask(
    transform: RigidTransform, source: np.ndarray, target: np.ndarray, radius: float
) -> np.ndarray:
    residual = np.linalg.norm(transform.apply(source) - target, axis=1)
    return residual < radius


def lgr(
    corr: CorrespondenceSet, acceptance_radius: float = 0.6, refinements: int = 5
) -> RegistrationResult:
    """One weighted-SVD hypothesis per patch, the one with most global inliers, then refinement."""
    start = time.perf_counter()
    best: tuple[int, int, RigidTransform, np.ndarray] | None = None
    groups = corr.by_patch()
    solved = 0
    for pid, rows in groups.items():
        if len(rows) < 3:
            continue
        try:
            T = weighted_svd(corr.source[rows], corr.target[rows], corr.weights[rows])
        except DegenerateGeometryError:
            continue
        solved += 1
        mask = inlier_mask(T, corr.source, corr.target, acceptance_radius)
        count = int(mask.sum())
        # ties keep the lower patch id
        if best is None or count > best[0]:
            best = (count, pid, T, mask)

    if best is None:
        raise RegistrationFailedError(
            "no patch yields a solvable hypothesis",
            diagnostics={"patches": len(groups), "pairs": len(corr), "solved": solved},
        )

    count, pid, T, mask = best
    history = [count]
    for _ in range(refinements):
        try:
            candidate = weighted_svd(corr.source[mask], corr.target[mask], corr.weights[mask])
        except DegenerateGeometryError:
            break
        new_mask = inlier_mask(candidate, corr.source, corr.target, acceptance_radius)
        new_count = int(new_mask.sum())
        if new_count < count:
            logger.warning(
                "refinement diverged; keeping the previous estimate",
                extra={"fields": {"patch": pid, "before": count, "after": new_count}},
            )
            break
        T, mask, count = candidate, new_mask, new_count
        history.append(count)

    seconds = time.perf_counter() - start
    return RegistrationResult(
        T, count, pid, "lgr", seconds, solved, history, _reliability(corr)
    )


def ransac_estimate(
    corr: CorrespondenceSet,
    iterations: int = 5000,
    acceptance_radius: float = 0.6,
    seed: int = 0,
    sample_size: int = 3,
) -> RegistrationResult:
    """Hypothesize from random minimal samples, verify by inlier count, refit on the best set."""
    n = len(corr)
    if n < sample_size or sample_size < 3:
        raise ContractError(f"RANSAC needs at least {max(3, sample_size)} pairs, got {n}")
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    best_count, best_trial, best_mask = 0, -1, None
    trials = 0
    for trial in range(iterations):
        trials += 1
        sample = rng.choice(n, size=sample_size, replace=False)
        try:
            T = weighted_svd(corr.source[sample], corr.target[sample])
        except DegenerateGeometryError:
            continue
        mask = inlier_mask(T, corr.source, corr.target, acceptance_radius)
        count = int(mask.sum())
        if count > best_count:
            best_count, best_trial, best_mask = count, trial, mask
            if count == n:
                break

    if best_mask is None or best_count < 3:
        raise RegistrationFailedError(
            "no RANSAC hypothesis reached 3 inliers",
            diagnostics={"pairs": n, "trials": trials, "best_inliers": best_count},
        )
    T = weighted_svd(corr.source[best_mask], corr.target[best_mask], corr.weights[best_mask])
    count = int(inlier_mask(T, corr.source, corr.target, acceptance_radius).sum())
    seconds = time.perf_counter() - start
    return RegistrationResult(
        T, count, best_trial, "ransac", seconds, trials, [best_count, count], _reliability(corr)
    )
