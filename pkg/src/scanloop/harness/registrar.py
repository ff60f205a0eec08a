"""Ground-truth registrar for SLAM runs on simulated scans."""

import threading

import numpy as np

from scanloop.common.config import ScanloopSettings, get_settings
from scanloop.common.exceptions import ContractError, NoMatchesError
from scanloop.geometry.cloud import PointCloud
from scanloop.harness.scenes import Scan, ScanSequence
from scanloop.matching.dense import CorrespondenceSet
from scanloop.registration.solvers import RegistrationResult, lgr


def ring_height_descriptor(
    points: np.ndarray,
    max_range: float = 30.0,
    rings: int = 20,
    bands: int = 8,
    heights: tuple[float, float] = (-3.0, 8.0),
) -> np.ndarray:
    """Square-rooted counts per (range ring, height band), unit length.

    Depends only on planar range and height, so it does not change under yaw.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    planar = np.hypot(points[:, 0], points[:, 1])
    hist, _, _ = np.histogram2d(
        planar, points[:, 2], bins=(rings, bands), range=((0.0, max_range), heights)
    )
    vec = np.sqrt(hist.reshape(-1))
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


class OracleRegistrar:
    """Registers scans through the world points they were simulated from.

    Correspondences are the points two scans share, grouped into patches by a
    coarse voxel of the source point and solved with LGR. Reliability is the
    share of the first scan's points that have a partner in the second.
    Clouds must come from :meth:`observe`; anything else is a contract error.
    """

    def __init__(
        self,
        settings: ScanloopSettings | None = None,
        max_range: float = 30.0,
        max_pairs: int = 2000,
        patch_size: float = 5.0,
        seed: int = 0,
    ):
        self.settings = settings or get_settings()
        self.max_range = max_range
        self.max_pairs = max_pairs
        self.patch_size = patch_size
        self.seed = seed
        self._scans: dict[int, Scan] = {}
        self._lock = threading.Lock()

    def observe(self, scan: Scan) -> PointCloud:
        with self._lock:
            self._scans[id(scan.cloud)] = scan
        return scan.cloud

    def observe_sequence(self, sequence: ScanSequence) -> list[tuple[float, PointCloud]]:
        for scan in sequence.scans:
            self.observe(scan)
        return sequence.clouds()

    def _lookup(self, cloud: PointCloud) -> Scan:
        with self._lock:
            scan = self._scans.get(id(cloud))
        if scan is None or scan.cloud is not cloud:
            raise ContractError("cloud was not simulated through this registrar")
        return scan

    # ── Registrar protocol ──

    def describe(self, cloud: PointCloud) -> np.ndarray:
        return ring_height_descriptor(cloud.points, self.max_range)

    def register(self, cloud_a: PointCloud, cloud_b: PointCloud) -> RegistrationResult:
        """Pose mapping A into B."""
        a, b = self._lookup(cloud_a), self._lookup(cloud_b)
        _, ia, ib = np.intersect1d(a.ids, b.ids, assume_unique=True, return_indices=True)
        if len(ia) < 3:
            raise NoMatchesError(f"scans share {len(ia)} world points")
        share = len(ia) / len(a.ids)
        if len(ia) > self.max_pairs:
            keep = np.sort(
                np.random.default_rng(self.seed).choice(len(ia), self.max_pairs, replace=False)
            )
            ia, ib = ia[keep], ib[keep]
        source = a.cloud.points[ia]
        _, patches = np.unique(
            np.floor(source / self.patch_size).astype(np.int64), axis=0, return_inverse=True
        )
        corr = CorrespondenceSet(
            source, b.cloud.points[ib], np.ones(len(ia)), patches.reshape(-1), ia, ib
        )
        reg = self.settings.registration
        result = lgr(corr, reg.acceptance_radius, reg.refinements)
        result.reliability = share
        return result
