"""Scan-to-map tracking by point-to-plane ICP with an eigenvalue degeneracy test."""

import logging
import threading
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from scanloop.common.config import SlamSettings
from scanloop.common.exceptions import ContractError
from scanloop.geometry.cloud import PointCloud
from scanloop.geometry.neighbors import NeighborIndex
from scanloop.geometry.sampling import estimate_normals, grid_subsample
from scanloop.geometry.transform import RigidTransform, se3_exp

logger = logging.getLogger(__name__)

MIN_CORRESPONDENCES = 6
DIVERGENCE_RISES = 3


@dataclass(frozen=True, eq=False)
class IcpResult:
    transform: RigidTransform
    eigenvalues: np.ndarray  # of J^T J at the returned pose, ascending
    iterations: int
    rmse: float
    correspondences: int
    diverged: bool = False

    @property
    def lambda_min(self) -> float:
        return float(self.eigenvalues[0])


def _linearize(
    source: np.ndarray,
    index: NeighborIndex,
    normals: np.ndarray,
    T: RigidTransform,
    max_distance: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Point-to-plane residuals and their Jacobian under left perturbation exp(xi) T."""
    world = T.apply(source)
    ids, dists = index.nearest(world)
    keep = dists <= max_distance
    p = world[keep]
    q = index.points[ids[keep]]
    n = normals[ids[keep]]
    r = ((p - q) * n).sum(axis=1)
    J = np.hstack([np.cross(p, n), n])
    return r, J


def point_to_plane_icp(
    source: np.ndarray,
    target: np.ndarray,
    target_normals: np.ndarray,
    initial: RigidTransform,
    iterations: int = 20,
    max_correspondence: float = 1.0,
    tolerance: float = 1e-7,
) -> IcpResult:
    """Gauss-Newton on sum_i (n_i . (T p_i - q_i))^2 from ``initial``.

    The error rising for three consecutive iterations marks the run diverged;
    the lowest-error iterate is returned either way.
    """
    source = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    index = NeighborIndex(target)
    T = initial
    best: tuple[float, RigidTransform] | None = None
    previous = np.inf
    rises = 0
    diverged = False
    done = 0
    for _ in range(iterations):
        r, J = _linearize(source, index, target_normals, T, max_correspondence)
        if len(r) < MIN_CORRESPONDENCES:
            diverged = True
            break
        error = float(np.mean(r * r))
        rises = rises + 1 if error > previous else 0
        previous = error
        if best is None or error < best[0]:
            best = (error, T)
        if rises >= DIVERGENCE_RISES:
            diverged = True
            break
        done += 1
        H = J.T @ J
        # minimum-norm step leaves unobservable directions untouched
        delta = np.linalg.lstsq(H, -J.T @ r, rcond=1e-12)[0]
        T = se3_exp(delta) @ T
        if np.linalg.norm(delta) < tolerance:
            break

    if not diverged:
        r, J = _linearize(source, index, target_normals, T, max_correspondence)
        if len(r) >= MIN_CORRESPONDENCES:
            error = float(np.mean(r * r))
            if best is None or error <= best[0]:
                best = (error, T)
        else:
            diverged = True
    if best is None:
        return IcpResult(initial, np.zeros(6), done, np.inf, 0, diverged=True)

    error, T = best
    r, J = _linearize(source, index, target_normals, T, max_correspondence)
    eigenvalues = np.clip(np.linalg.eigvalsh(J.T @ J), 0.0, None)
    return IcpResult(T, eigenvalues, done, float(np.sqrt(error)), len(r), diverged)


@dataclass(frozen=True, eq=False)
class TrackResult:
    timestamp: float
    pose: RigidTransform
    degenerated: bool
    lambda_min: float | None
    iterations: int = 0
    lost: bool = False
    rmse: float = 0.0


@dataclass(eq=False)
class TrackerState:
    pose: RigidTransform = field(default_factory=RigidTransform.identity)
    velocity: RigidTransform = field(default_factory=RigidTransform.identity)
    local_map: deque = field(default_factory=deque)  # world-frame point arrays
    lambda_min: float | None = None
    initialized: bool = False


class Tracker:
    """Scan-to-local-map odometry with constant-velocity prediction."""

    def __init__(self, settings: SlamSettings, initial: RigidTransform | None = None):
        self.settings = settings
        self.state = TrackerState(
            pose=initial or RigidTransform.identity(),
            local_map=deque(maxlen=settings.local_map_size),
        )
        self._lock = threading.Lock()
        self._pending: RigidTransform | None = None

    def correct(self, correction: RigidTransform) -> None:
        """Queue a world-frame correction; applied before the next scan is tracked."""
        with self._lock:
            self._pending = correction if self._pending is None else correction @ self._pending

    def _apply_pending(self) -> None:
        with self._lock:
            correction, self._pending = self._pending, None
        if correction is None:
            return
        state = self.state
        state.pose = correction @ state.pose
        state.local_map = deque(
            (correction.apply(points) for points in state.local_map),
            maxlen=state.local_map.maxlen,
        )

    def _map(self, center: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        cfg = self.settings
        points = np.vstack(list(self.state.local_map))
        near = np.linalg.norm(points - center, axis=1) <= cfg.icp_crop_radius
        points = grid_subsample(PointCloud(points[near]), cfg.map_cell).points
        if len(points) < MIN_CORRESPONDENCES:
            return points, np.zeros((0, 3))
        return points, estimate_normals(points, cfg.normal_neighbors)

    def track(self, cloud: PointCloud, timestamp: float) -> TrackResult:
        if cloud.is_empty:
            raise ContractError("cannot track an empty scan")
        self._apply_pending()
        state = self.state
        cfg = self.settings
        if not state.initialized:
            state.local_map.append(state.pose.apply(cloud.points))
            state.initialized = True
            return TrackResult(timestamp, state.pose, False, None)

        prediction = state.pose @ state.velocity
        target, normals = self._map(prediction.translation)
        if len(normals) == 0:
            result = IcpResult(prediction, np.zeros(6), 0, np.inf, 0, diverged=True)
        else:
            result = point_to_plane_icp(
                cloud.points,
                target,
                normals,
                prediction,
                cfg.icp_iterations,
                cfg.icp_max_correspondence,
            )
        lost = result.diverged
        degenerated = lost or result.lambda_min < cfg.lambda_threshold
        if lost:
            logger.warning(
                "tracking lost",
                extra={"fields": {"timestamp": timestamp, "pairs": result.correspondences}},
            )

        state.velocity = state.pose.inverse() @ result.transform
        state.pose = result.transform
        state.lambda_min = result.lambda_min
        state.local_map.append(result.transform.apply(cloud.points))
        return TrackResult(
            timestamp,
            result.transform,
            degenerated,
            result.lambda_min,
            result.iterations,
            lost,
            result.rmse,
        )
