"""Point-cloud container."""

from dataclasses import dataclass

import numpy as np

from scanloop.common.exceptions import ContractError


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class PointCloud:
    """n x 3 points in meters, with optional per-point intensity."""

    points: np.ndarray
    intensity: np.ndarray | None = None

    def __post_init__(self):
        points = _frozen(self.points)
        if points.size == 0:
            points = _frozen(np.zeros((0, 3)))
        if points.ndim != 2 or points.shape[1] != 3:
            raise ContractError(f"points must be n x 3, got shape {points.shape}")
        if not np.all(np.isfinite(points)):
            raise ContractError("point coordinates must be finite")
        object.__setattr__(self, "points", points)
        if self.intensity is not None:
            intensity = _frozen(self.intensity).reshape(-1)
            if intensity.shape[0] != points.shape[0]:
                raise ContractError(
                    f"intensity has {intensity.shape[0]} values for {points.shape[0]} points"
                )
            object.__setattr__(self, "intensity", intensity)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)))

    def __len__(self) -> int:
        return int(self.points.shape[0])

    @property
    def is_empty(self) -> bool:
        return len(self) == 0

    def take(self, index: np.ndarray) -> "PointCloud":
        index = np.asarray(index, dtype=np.int64)
        intensity = None if self.intensity is None else self.intensity[index]
        return PointCloud(self.points[index], intensity)

    def concat(self, other: "PointCloud") -> "PointCloud":
        if self.intensity is None or other.intensity is None:
            intensity = None
        else:
            intensity = np.concatenate([self.intensity, other.intensity])
        return PointCloud(np.vstack([self.points, other.points]), intensity)

    def centroid(self) -> np.ndarray:
        if self.is_empty:
            raise ContractError("centroid of an empty cloud")
        return self.points.mean(axis=0)
