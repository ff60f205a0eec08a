"""Trajectory files (TUM, KITTI) and absolute position error."""

from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from scanloop.common.exceptions import AssociationError, ContractError, KittiFormatError
from scanloop.geometry.transform import RigidTransform


@dataclass(frozen=True, eq=False)
class StampedPose:
    timestamp: float
    pose: RigidTransform


Trajectory = Sequence[StampedPose]


# ── TUM: timestamp tx ty tz qx qy qz qw ──


def write_tum(path: str | Path, trajectory: Trajectory) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for item in trajectory:
        t = item.pose.translation
        q = Rotation.from_matrix(item.pose.rotation).as_quat()
        values = [item.timestamp, *t, *q]
        lines.append(" ".join(f"{v:.9f}" for v in values))
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    return path


def read_tum(path: str | Path) -> list[StampedPose]:
    out = []
    for number, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        values = [float(v) for v in line.split()]
        if len(values) != 8:
            raise ContractError(f"{path}:{number}: expected 8 values, got {len(values)}")
        R = Rotation.from_quat(values[4:8]).as_matrix()
        out.append(StampedPose(values[0], RigidTransform(R, values[1:4])))
    return out


# ── KITTI: 12 values per row, row-major [R | t] ──


def write_kitti_poses(path: str | Path, poses: Sequence[RigidTransform]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [" ".join(f"{v:.12e}" for v in pose.matrix[:3].reshape(-1)) for pose in poses]
    path.write_text("\n".join(rows) + ("\n" if rows else ""), encoding="utf-8")
    return path


def read_kitti_poses(path: str | Path) -> list[RigidTransform]:
    """Poses of a KITTI odometry ground-truth file.

    Malformed rows raise ``KittiFormatError`` carrying the byte offset of the row.
    """
    blob = Path(path).read_bytes()
    poses = []
    offset = 0
    for raw in blob.splitlines(keepends=True):
        line = raw.strip()
        if line:
            try:
                values = np.array([float(v) for v in line.split()])
            except ValueError:
                raise KittiFormatError(f"{path}: non-numeric pose row", offset=offset) from None
            if values.size != 12:
                raise KittiFormatError(
                    f"{path}: pose row holds {values.size} values, expected 12", offset=offset
                )
            poses.append(RigidTransform.from_matrix(values.reshape(3, 4)))
        offset += len(raw)
    return poses


# ── Absolute position error ──


@dataclass(frozen=True)
class APEReport:
    errors: np.ndarray
    timestamps: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.errors.mean())

    @property
    def median(self) -> float:
        return float(np.median(self.errors))

    @property
    def max(self) -> float:
        return float(self.errors.max())

    @property
    def rmse(self) -> float:
        return float(np.sqrt(np.mean(self.errors**2)))

    def as_dict(self) -> dict:
        return {
            "poses": int(self.errors.size),
            "mean": self.mean,
            "median": self.median,
            "max": self.max,
            "rmse": self.rmse,
        }


def associate(
    estimated: Trajectory, reference: Trajectory, tolerance: float = 0.01
) -> list[tuple[int, int]]:
    """Pair every estimated pose with the nearest reference timestamp."""
    if not estimated or not reference:
        raise AssociationError("cannot associate an empty trajectory")
    ref_t = np.array([p.timestamp for p in reference])
    order = np.argsort(ref_t, kind="stable")
    ref_sorted = ref_t[order]
    pairs = []
    for i, item in enumerate(estimated):
        j = int(np.searchsorted(ref_sorted, item.timestamp))
        candidates = [c for c in (j - 1, j) if 0 <= c < len(ref_sorted)]
        best = min(candidates, key=lambda c: abs(ref_sorted[c] - item.timestamp))
        gap = abs(ref_sorted[best] - item.timestamp)
        if gap > tolerance:
            raise AssociationError(
                f"estimated pose at t={item.timestamp:.6f} has no reference within "
                f"{tolerance} s (nearest {gap:.6f} s away)"
            )
        pairs.append((i, int(order[best])))
    return pairs


def ape(estimated: Trajectory, reference: Trajectory, tolerance: float = 0.01) -> APEReport:
    """Translational error per pose after aligning the first associated poses."""
    pairs = associate(estimated, reference, tolerance)
    first_est = estimated[pairs[0][0]].pose
    first_ref = reference[pairs[0][1]].pose
    align = first_ref @ first_est.inverse()
    errors = np.array(
        [
            np.linalg.norm(
                (align @ estimated[i].pose).translation - reference[j].pose.translation
            )
            for i, j in pairs
        ]
    )
    stamps = np.array([estimated[i].timestamp for i, _ in pairs])
    return APEReport(errors, stamps)
