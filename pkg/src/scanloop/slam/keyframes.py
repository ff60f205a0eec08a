"""Keyframe selection and the keyframe database."""

import dataclasses
import logging
import threading
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from scanloop.common.exceptions import ContractError
from scanloop.geometry.cloud import PointCloud
from scanloop.geometry.transform import RigidTransform
from scanloop.retrieval.database import DescriptorDatabase

logger = logging.getLogger(__name__)

NONDEGENERATED = "nondegenerated"
DEGENERATED = "degenerated"


@dataclass(frozen=True, eq=False)
class KeyframeRecord:
    id: int
    timestamp: float
    cloud: PointCloud
    pose: RigidTransform  # tracking estimate at insertion
    descriptor: np.ndarray
    degenerated: bool = False

    @property
    def category(self) -> str:
        return DEGENERATED if self.degenerated else NONDEGENERATED


@dataclass(frozen=True)
class KeyframeDecision:
    selected: bool
    category: str = NONDEGENERATED
    reasons: tuple[str, ...] = ()


class KeyframeSelector:
    """Distance rule plus the three degeneracy rules.

    i)   the first degenerated scan after nondegenerated ones;
    ii)  the first nondegenerated scan after a degenerated one, unless that
         degenerated scan was itself selected;
    iii) every ``period`` seconds inside a run of degenerated scans.

    A keyframe is "degenerated" when any scan since the previous keyframe,
    the current one included, was degenerated.
    """

    def __init__(self, distance: float = 2.0, period: float = 3.0):
        if distance <= 0 or period <= 0:
            raise ContractError("keyframe distance and period must be positive")
        self.distance = distance
        self.period = period
        self._last_position: np.ndarray | None = None
        self._previous_degenerated: bool | None = None
        self._previous_selected = False
        self._run_anchor: float | None = None
        self._dirty = False

    def decide(self, timestamp: float, pose: RigidTransform, degenerated: bool) -> KeyframeDecision:
        reasons = []
        if self._last_position is None:
            reasons.append("first")
        elif np.linalg.norm(pose.translation - self._last_position) >= self.distance:
            reasons.append("distance")

        previous = self._previous_degenerated
        if degenerated and previous is False:
            reasons.append("degeneracy_onset")
            self._run_anchor = timestamp
        elif not degenerated and previous is True and not self._previous_selected:
            reasons.append("degeneracy_exit")
        elif degenerated and previous is True:
            if self._run_anchor is None:
                self._run_anchor = timestamp
            elif timestamp - self._run_anchor >= self.period - 1e-9:
                reasons.append("degeneracy_period")
        if degenerated and previous is None:
            self._run_anchor = timestamp

        self._dirty = self._dirty or degenerated
        selected = bool(reasons)
        category = DEGENERATED if self._dirty else NONDEGENERATED
        if selected:
            self._last_position = pose.translation.copy()
            self._dirty = False
            if degenerated:
                self._run_anchor = timestamp
        if not degenerated:
            self._run_anchor = None
        self._previous_degenerated = degenerated
        self._previous_selected = selected
        return KeyframeDecision(selected, category if selected else NONDEGENERATED, tuple(reasons))


class KeyframeDatabase:
    """Keyframe records plus their descriptors; ids are insertion positions."""

    def __init__(self, normalize: bool = False):
        self.normalize = normalize
        self._records: list[KeyframeRecord] = []
        self._descriptors: DescriptorDatabase | None = None
        self._lock = threading.RLock()

    def __len__(self) -> int:
        with self._lock:
            return len(self._records)

    def records(self) -> list[KeyframeRecord]:
        with self._lock:
            return list(self._records)

    def get(self, keyframe_id: int) -> KeyframeRecord:
        with self._lock:
            return self._records[keyframe_id]

    # ── Writes ──

    def add(
        self,
        timestamp: float,
        cloud: PointCloud,
        pose: RigidTransform,
        descriptor,
        degenerated: bool = False,
    ) -> KeyframeRecord:
        if descriptor is None:
            raise ContractError("a keyframe needs its descriptor before insertion")
        descriptor = np.asarray(descriptor, dtype=np.float64).reshape(-1)
        with self._lock:
            if self._records and timestamp <= self._records[-1].timestamp:
                raise ContractError(
                    f"keyframe timestamp {timestamp} does not follow "
                    f"{self._records[-1].timestamp}"
                )
            if self._descriptors is None:
                self._descriptors = DescriptorDatabase(descriptor.size, normalize=self.normalize)
            keyframe_id = self._descriptors.add(descriptor)
            record = KeyframeRecord(keyframe_id, timestamp, cloud, pose, descriptor, degenerated)
            self._records.append(record)
        return record

    def relabel(self, keyframe_id: int, degenerated: bool = False) -> KeyframeRecord:
        with self._lock:
            record = dataclasses.replace(self._records[keyframe_id], degenerated=degenerated)
            self._records[keyframe_id] = record
        return record

    # ── Queries ──

    def latest_nondegenerated(self, before: int) -> KeyframeRecord | None:
        with self._lock:
            for record in reversed(self._records[:before]):
                if not record.degenerated:
                    return record
        return None

    def nearest(
        self, descriptor, exclude: Callable[[int], bool] | None = None
    ) -> tuple[KeyframeRecord, float] | None:
        """Rank-1 keyframe by descriptor distance, ties to the lower id."""
        with self._lock:
            if self._descriptors is None:
                return None
            size = len(self._records)
            if exclude is not None and all(exclude(i) for i in range(size)):
                return None
            result = self._descriptors.query(descriptor, 1, exclude)
            if not result.ids:
                return None
            return self._records[result.ids[0]], result.distances[0]
