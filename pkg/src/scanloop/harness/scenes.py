"""Synthetic worlds along a course, simulated LiDAR scans, scan pairs and sequences."""

import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from scanloop.common.exceptions import ContractError, SceneGenerationError
from scanloop.geometry.cloud import PointCloud
from scanloop.geometry.sampling import overlap_ratio
from scanloop.geometry.transform import RigidTransform
from scanloop.matching.grouping import PatchGrouping, patch_overlap_matrix
from scanloop.slam.trajectory import StampedPose

logger = logging.getLogger(__name__)

SceneKind = Literal["urban-blocks", "corridor", "loop-course"]

SENSOR_HEIGHT = 1.8
WALL_BOTTOM = 0.5
WALL_TOP = 3.0
_STEP = 0.25  # centerline sampling


class SceneSpec(BaseModel):
    """Everything that determines a synthetic world; equal specs give identical worlds."""

    model_config = ConfigDict(frozen=True)

    kind: SceneKind = "urban-blocks"
    extent: float = Field(default=30.0, gt=0)  # half side of the area or course
    ground_density: float = Field(default=2.0, gt=0)  # points per m^2
    structure_density: float = Field(default=3.0, gt=0)  # points per m^2 of facade
    block_spacing: float = Field(default=8.0, gt=0)  # one block per road side every N m
    road_width: float = Field(default=8.0, gt=0)
    corridor_width: float = Field(default=5.0, gt=2.0)
    corner_radius: float = Field(default=5.0, gt=0)
    noise_sigma: float = Field(default=0.02, ge=0)
    fov_cut_deg: float = Field(default=0.0, ge=0, lt=360)  # blind wedge behind the sensor
    seed: int = 0

    @model_validator(mode="after")
    def _corners_fit(self):
        if self.kind == "loop-course" and self.corner_radius >= self.extent:
            raise ValueError("corner radius must be smaller than the course half side")
        return self


# ── Course paths ──


@dataclass(frozen=True, eq=False)
class CoursePath:
    """Densely sampled centerline; ``corridor`` is the arclength span walled in on both sides."""

    xy: np.ndarray
    arclength: np.ndarray
    heading: np.ndarray
    closed: bool
    corridor: tuple[float, float] | None = None

    @property
    def length(self) -> float:
        return float(self.arclength[-1])

    def wrap(self, s: np.ndarray) -> np.ndarray:
        if self.closed:
            return np.mod(s, self.length)
        return np.clip(s, 0.0, self.length)

    def at(self, s):
        """Centerline position(s) and heading(s) at arclength ``s``."""
        scalar = np.ndim(s) == 0
        s = self.wrap(np.atleast_1d(np.asarray(s, dtype=np.float64)))
        x = np.interp(s, self.arclength, self.xy[:, 0])
        y = np.interp(s, self.arclength, self.xy[:, 1])
        xy = np.column_stack([x, y])
        yaw = np.interp(s, self.arclength, self.heading)
        if scalar:
            return xy[0], float(yaw[0])
        return xy, yaw

    def in_corridor(self, s, margin: float = 0.0) -> np.ndarray:
        s = self.wrap(np.atleast_1d(np.asarray(s, dtype=np.float64)))
        if self.corridor is None:
            return np.zeros(s.shape, dtype=bool)
        start, end = self.corridor
        return (s >= start - margin) & (s <= end + margin)


def _segment(start, end) -> np.ndarray:
    start, end = np.asarray(start, dtype=np.float64), np.asarray(end, dtype=np.float64)
    n = max(2, int(np.ceil(np.linalg.norm(end - start) / _STEP)) + 1)
    return start + np.linspace(0.0, 1.0, n)[:, None] * (end - start)


def _arc(center, radius: float, a0: float, a1: float) -> np.ndarray:
    n = max(2, int(np.ceil(abs(a1 - a0) * radius / _STEP)) + 1)
    angles = np.linspace(a0, a1, n)
    return np.asarray(center) + radius * np.column_stack([np.cos(angles), np.sin(angles)])


def _polyline(pieces: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xy = np.vstack(pieces)
    keep = np.r_[True, np.linalg.norm(np.diff(xy, axis=0), axis=1) > 1e-9]
    xy = xy[keep]
    delta = np.diff(xy, axis=0)
    arclength = np.r_[0.0, np.cumsum(np.linalg.norm(delta, axis=1))]
    heading = np.arctan2(delta[:, 1], delta[:, 0])
    heading = np.unwrap(np.r_[heading, heading[-1]])
    return xy, arclength, heading


def course_path(spec: SceneSpec) -> CoursePath:
    e = spec.extent
    if spec.kind in ("urban-blocks", "corridor"):
        xy, s, heading = _polyline([_segment((-e, 0.0), (e, 0.0))])
        corridor = (0.0, float(s[-1])) if spec.kind == "corridor" else None
        return CoursePath(xy, s, heading, False, corridor)

    # rounded square, counter-clockwise from the middle of the south side;
    # the north side is the walled corridor
    a, r = e, spec.corner_radius
    half_pi = np.pi / 2
    pieces = [
        _segment((0.0, -a), (a - r, -a)),
        _arc((a - r, -a + r), r, -half_pi, 0.0),
        _segment((a, -a + r), (a, a - r)),
        _arc((a - r, a - r), r, 0.0, half_pi),
        _segment((a - r, a), (-a + r, a)),
        _arc((-a + r, a - r), r, half_pi, np.pi),
        _segment((-a, a - r), (-a, -a + r)),
        _arc((-a + r, -a + r), r, np.pi, 3 * half_pi),
        _segment((-a + r, -a), (0.0, -a)),
    ]
    xy, s, heading = _polyline(pieces)
    start = int(np.argmin(np.linalg.norm(xy - (a - r, a), axis=1)))
    end = int(np.argmin(np.linalg.norm(xy - (-a + r, a), axis=1)))
    return CoursePath(xy, s, heading, True, (float(s[start]), float(s[end])))


def sensor_pose(xy, yaw: float, height: float = SENSOR_HEIGHT) -> RigidTransform:
    return RigidTransform.from_yaw(yaw, (float(xy[0]), float(xy[1]), height))


# ── Worlds ──


@dataclass(frozen=True, eq=False)
class Scene:
    spec: SceneSpec
    points: np.ndarray  # world frame; scan ids index these rows
    path: CoursePath

    def __len__(self) -> int:
        return int(self.points.shape[0])


def _box_faces(rng, center, half, height: float, yaw: float, density: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    R = np.array([[c, -s], [s, c]])
    faces = []
    for axis in (0, 1):
        for side in (-1.0, 1.0):
            n = max(1, int(round(density * 2.0 * half[1 - axis] * height)))
            local = np.empty((n, 2))
            local[:, axis] = side * half[axis]
            local[:, 1 - axis] = rng.uniform(-half[1 - axis], half[1 - axis], n)
            xy = center + local @ R.T
            faces.append(np.column_stack([xy, rng.uniform(0.0, height, n)]))
    return np.vstack(faces)


def _normals(yaw: np.ndarray) -> np.ndarray:
    return np.column_stack([-np.sin(yaw), np.cos(yaw)])


def _ground(rng, spec: SceneSpec, path: CoursePath) -> np.ndarray:
    if spec.kind == "urban-blocks":
        side = 2.0 * spec.extent
        n = int(spec.ground_density * side * side)
        xy = rng.uniform(-spec.extent, spec.extent, size=(n, 2))
        return np.column_stack([xy, np.zeros(n)])
    n = int(spec.ground_density * path.length * spec.road_width)
    s = rng.uniform(0.0, path.length, n)
    xy, yaw = path.at(s)
    half = np.where(path.in_corridor(s), spec.corridor_width / 2 - 1.0, spec.road_width / 2)
    lateral = rng.uniform(-1.0, 1.0, n) * half
    return np.column_stack([xy + lateral[:, None] * _normals(yaw), np.zeros(n)])


def _blocks(rng, spec: SceneSpec, path: CoursePath) -> list[np.ndarray]:
    parts = []
    road_half = spec.road_width / 2
    anchors = np.arange(spec.block_spacing / 2, path.length, spec.block_spacing)
    for s in anchors:
        # keep blocks clear of the corridor so it stays featureless
        if path.in_corridor(s, margin=4.0)[0]:
            continue
        xy, yaw = path.at(s)
        normal = _normals(np.array([yaw]))[0]
        for side in (-1.0, 1.0):
            half = rng.uniform(1.0, 3.0, size=2)
            height = rng.uniform(2.5, 8.0)
            setback = rng.uniform(0.5, 2.5)
            center = xy + side * normal * (road_half + setback + np.hypot(*half))
            box_yaw = yaw + rng.uniform(-0.3, 0.3)
            parts.append(_box_faces(rng, center, half, height, box_yaw, spec.structure_density))
    return parts


def _walls(rng, spec: SceneSpec, path: CoursePath) -> list[np.ndarray]:
    if path.corridor is None:
        return []
    start, end = path.corridor
    parts = []
    for side in (-1.0, 1.0):
        n = int(spec.structure_density * (end - start) * (WALL_TOP - WALL_BOTTOM))
        s = rng.uniform(start, end, n)
        xy, yaw = path.at(s)
        wall = xy + side * (spec.corridor_width / 2) * _normals(yaw)
        parts.append(np.column_stack([wall, rng.uniform(WALL_BOTTOM, WALL_TOP, n)]))
    return parts


def generate_scene(spec: SceneSpec) -> Scene:
    rng = np.random.default_rng(spec.seed)
    path = course_path(spec)
    parts = [_ground(rng, spec, path), *_blocks(rng, spec, path), *_walls(rng, spec, path)]
    points = np.vstack(parts)
    logger.debug(
        "scene generated",
        extra={"fields": {"kind": spec.kind, "seed": spec.seed, "points": len(points)}},
    )
    return Scene(spec, points, path)


# ── Scans ──


@dataclass(frozen=True, eq=False)
class Scan:
    cloud: PointCloud  # sensor frame
    pose: RigidTransform  # sensor to world
    ids: np.ndarray  # row of Scene.points behind each scan point


def simulate_scan(
    scene: Scene,
    pose: RigidTransform,
    rng: np.random.Generator,
    max_range: float = 30.0,
    noise: float | None = None,
    fov_cut_deg: float | None = None,
    min_range: float = 0.5,
) -> Scan:
    """World points within range and outside the blind wedge, in the sensor frame, plus noise.

    There is no occlusion model: every point in range is returned.
    """
    noise = scene.spec.noise_sigma if noise is None else noise
    fov_cut = np.radians(scene.spec.fov_cut_deg if fov_cut_deg is None else fov_cut_deg)
    distance = np.linalg.norm(scene.points - pose.translation, axis=1)
    ids = np.flatnonzero((distance <= max_range) & (distance >= min_range))
    local = pose.inverse().apply(scene.points[ids])
    if fov_cut > 0:
        azimuth = np.arctan2(local[:, 1], local[:, 0])
        visible = (np.pi - np.abs(azimuth)) >= fov_cut / 2
        ids, local = ids[visible], local[visible]
    if noise > 0:
        local = local + rng.normal(scale=noise, size=local.shape)
    return Scan(PointCloud(local), pose, ids)


# ── Pairs ──


@dataclass(frozen=True, eq=False)
class ScenePair:
    """Two scans of one world; ``T_gt`` maps A-frame points into the B frame."""

    scan_a: Scan
    scan_b: Scan
    T_gt: RigidTransform
    overlap: float
    seed: int

    @property
    def cloud_a(self) -> PointCloud:
        return self.scan_a.cloud

    @property
    def cloud_b(self) -> PointCloud:
        return self.scan_b.cloud

    def true_matches(self) -> np.ndarray:
        """(k, 2) rows of (index in A, index in B) that sample the same world point."""
        _, ia, ib = np.intersect1d(
            self.scan_a.ids, self.scan_b.ids, assume_unique=True, return_indices=True
        )
        return np.column_stack([ia, ib]).astype(np.int64)

    def label_overlap(self) -> float:
        if len(self.scan_a.ids) == 0:
            return 0.0
        return len(self.true_matches()) / len(self.scan_a.ids)

    def patch_overlap(
        self,
        grouping_a: PatchGrouping,
        points_a: np.ndarray,
        grouping_b: PatchGrouping,
        points_b: np.ndarray,
        eps: float = 0.5,
    ) -> np.ndarray:
        return patch_overlap_matrix(grouping_a, points_a, grouping_b, points_b, self.T_gt, eps)


def generate_scene_pair(
    spec: SceneSpec,
    rotation: float = np.radians(30.0),
    overlap: float | None = 0.5,
    distance: float = 0.0,
    tolerance: float = 0.05,
    eps: float = 0.5,
    max_range: float = 30.0,
    retries: int = 8,
    scene: Scene | None = None,
) -> ScenePair:
    """Scan pair with yaw offset up to ``rotation`` and the requested overlap.

    With ``overlap=None`` the second sensor sits ``distance`` meters away.
    Otherwise the distance is bisected until the measured overlap lies within
    ``tolerance`` of the target; each retry draws a new place, direction and yaw.
    """
    if overlap is not None and not 0.0 < overlap <= 1.0:
        raise ContractError(f"overlap target must lie in (0, 1], got {overlap}")
    if rotation < 0 or distance < 0:
        raise ContractError("rotation and distance must be non-negative")
    scene = scene if scene is not None else generate_scene(spec)
    rng = np.random.default_rng([spec.seed, 7])

    for attempt in range(retries):
        s = rng.uniform(0.0, scene.path.length)
        xy, yaw = scene.path.at(s)
        pose_a = sensor_pose(xy, yaw)
        dyaw = rng.uniform(-rotation, rotation) if rotation > 0 else 0.0
        bearing = rng.uniform(-np.pi, np.pi)
        direction = np.array([np.cos(bearing), np.sin(bearing)])
        noise_seed = int(rng.integers(2**31))

        def pair_at(d: float) -> ScenePair | None:
            pose_b = sensor_pose(xy + d * direction, yaw + dyaw)
            local = np.random.default_rng(noise_seed)
            a = simulate_scan(scene, pose_a, local, max_range)
            b = simulate_scan(scene, pose_b, local, max_range)
            if a.cloud.is_empty:
                return None
            T = pose_b.inverse() @ pose_a
            return ScenePair(a, b, T, overlap_ratio(a.cloud, b.cloud, T, eps), spec.seed)

        if overlap is None:
            pair = pair_at(distance)
            if pair is not None:
                return pair
            continue

        lo, hi = 0.0, 2.0 * max_range
        pair = pair_at(lo)
        if pair is None or pair.overlap < overlap - tolerance:
            continue
        for _ in range(40):
            if abs(pair.overlap - overlap) <= tolerance:
                logger.debug(
                    "scene pair generated",
                    extra={
                        "fields": {"seed": spec.seed, "attempt": attempt, "overlap": pair.overlap}
                    },
                )
                return pair
            mid = 0.5 * (lo + hi)
            candidate = pair_at(mid)
            if candidate is None:
                break
            pair = candidate
            if pair.overlap > overlap:
                lo = mid
            else:
                hi = mid
    raise SceneGenerationError(
        f"no {spec.kind} pair with overlap {overlap} +/- {tolerance} after {retries} attempts"
    )


# ── Sequences ──


@dataclass(eq=False)
class ScanSequence:
    scene: Scene
    scans: list[Scan]
    timestamps: np.ndarray
    arclength: np.ndarray  # distance travelled at each scan

    def __len__(self) -> int:
        return len(self.scans)

    def clouds(self) -> list[tuple[float, PointCloud]]:
        return [(float(t), scan.cloud) for t, scan in zip(self.timestamps, self.scans)]

    def ground_truth(self) -> list[StampedPose]:
        return [StampedPose(float(t), scan.pose) for t, scan in zip(self.timestamps, self.scans)]

    def positions(self) -> np.ndarray:
        return np.array([scan.pose.translation for scan in self.scans]).reshape(-1, 3)

    def first_revisit(self) -> int | None:
        """Index of the first scan of the second lap, if the course closes."""
        if not self.scene.path.closed:
            return None
        later = np.flatnonzero(self.arclength >= self.scene.path.length)
        return int(later[0]) if later.size else None


def speed_factor(
    path: CoursePath, s: float, corridor_factor: float, margin: float, ramp: float = 4.0
) -> float:
    """Share of the cruise speed at arclength ``s``; slower deep inside the corridor."""
    if path.corridor is None or corridor_factor >= 1.0:
        return 1.0
    s = float(path.wrap(np.array([s]))[0])
    lo, hi = path.corridor[0] + margin, path.corridor[1] - margin
    if hi <= lo:
        return 1.0
    inside = np.clip((s - lo) / ramp, 0.0, 1.0) * np.clip((hi - s) / ramp, 0.0, 1.0)
    return float(1.0 - (1.0 - corridor_factor) * inside)


def simulate_sequence(
    scene: Scene,
    speed: float = 2.0,
    rate: float = 5.0,
    laps: float = 1.0,
    max_range: float = 30.0,
    corridor_factor: float = 0.4,
    corridor_margin: float | None = None,
) -> ScanSequence:
    """Scans at ``rate`` Hz while driving the course centerline.

    Inside the corridor, once the far structure is out of range, the vehicle
    slows to ``corridor_factor`` of its speed.
    """
    if speed <= 0 or rate <= 0 or laps <= 0:
        raise ContractError("speed, rate and laps must be positive")
    if not 0.0 < corridor_factor <= 1.0:
        raise ContractError(f"corridor factor must lie in (0, 1], got {corridor_factor}")
    path = scene.path
    margin = max_range if corridor_margin is None else corridor_margin
    total = laps * path.length if path.closed else path.length
    rng = np.random.default_rng([scene.spec.seed, 11])
    scans, stamps, travelled = [], [], []
    s, k = 0.0, 0
    while s <= total + 1e-9:
        xy, yaw = path.at(s)
        scans.append(simulate_scan(scene, sensor_pose(xy, yaw), rng, max_range))
        stamps.append(k / rate)
        travelled.append(s)
        s += speed * speed_factor(path, s, corridor_factor, margin) / rate
        k += 1
    logger.info(
        "scan sequence simulated",
        extra={"fields": {"kind": scene.spec.kind, "scans": len(scans), "length": total}},
    )
    return ScanSequence(scene, scans, np.asarray(stamps), np.asarray(travelled))
