"""KITTI odometry ingestion: velodyne scans, pose files and timestamps."""

import logging
from collections.abc import Iterator
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from scanloop.common.exceptions import ContractError, KittiFormatError
from scanloop.geometry.cloud import PointCloud
from scanloop.geometry.transform import RigidTransform
from scanloop.slam.trajectory import StampedPose, read_kitti_poses

logger = logging.getLogger(__name__)

RECORD = np.dtype("<f4")
RECORD_BYTES = 16  # x, y, z, intensity


def read_kitti_bin(path: str | Path) -> PointCloud:
    """Little-endian float32 quadruples (x, y, z, intensity)."""
    blob = Path(path).read_bytes()
    if len(blob) % RECORD_BYTES:
        offset = len(blob) - len(blob) % RECORD_BYTES
        raise KittiFormatError(
            f"{path}: truncated record at byte {offset} ({len(blob) - offset} stray bytes)",
            offset=offset,
        )
    values = np.frombuffer(blob, dtype=RECORD).reshape(-1, 4).astype(np.float64)
    if values.size == 0:
        return PointCloud(np.zeros((0, 3)), np.zeros(0))
    return PointCloud(values[:, :3], values[:, 3])


def write_kitti_bin(path: str | Path, cloud: PointCloud) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    intensity = cloud.intensity if cloud.intensity is not None else np.zeros(len(cloud))
    records = np.column_stack([cloud.points, intensity]).astype(RECORD)
    path.write_bytes(records.tobytes())
    return path


def read_times(path: str | Path) -> np.ndarray:
    values = [float(line) for line in Path(path).read_text().split() if line.strip()]
    return np.asarray(values, dtype=np.float64)


@dataclass
class KittiSequence:
    """One sequence laid out as ``<root>/sequences/<id>/{velodyne,times.txt}``.

    Ground-truth poses, when present, are read from ``<root>/poses/<id>.txt``
    and taken as given (no camera-to-velodyne calibration is applied).
    """

    root: Path
    sequence: str

    @property
    def directory(self) -> Path:
        return self.root / "sequences" / self.sequence

    def scan_files(self) -> list[Path]:
        files = sorted((self.directory / "velodyne").glob("*.bin"))
        if not files:
            raise ContractError(f"no velodyne scans under {self.directory}")
        return files

    def timestamps(self) -> np.ndarray:
        times = self.directory / "times.txt"
        count = len(self.scan_files())
        if not times.exists():
            logger.warning(
                "times.txt missing, assuming 10 Hz",
                extra={"fields": {"sequence": self.sequence}},
            )
            return np.arange(count) * 0.1
        stamps = read_times(times)
        if len(stamps) != count:
            raise ContractError(f"{count} scans but {len(stamps)} timestamps")
        return stamps

    def poses(self) -> list[RigidTransform] | None:
        path = self.root / "poses" / f"{self.sequence}.txt"
        return read_kitti_poses(path) if path.exists() else None

    def ground_truth(self) -> list[StampedPose] | None:
        poses = self.poses()
        if poses is None:
            return None
        return [StampedPose(float(t), pose) for t, pose in zip(self.timestamps(), poses)]

    def scans(
        self, stride: int = 1, limit: int | None = None
    ) -> Iterator[tuple[float, PointCloud]]:
        if stride < 1:
            raise ContractError(f"stride must be positive, got {stride}")
        stamps = self.timestamps()
        files = self.scan_files()
        chosen = list(range(0, len(files), stride))
        if limit is not None:
            chosen = chosen[:limit]
        for i in chosen:
            yield float(stamps[i]), read_kitti_bin(files[i])
