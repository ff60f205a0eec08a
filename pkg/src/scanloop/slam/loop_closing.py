"""Loop detection by descriptor retrieval, verified by registration."""

import logging
from dataclasses import dataclass

from scanloop.common.config import SlamSettings
from scanloop.common.exceptions import ScanloopError
from scanloop.geometry.transform import RigidTransform
from scanloop.slam.events import EventLog
from scanloop.slam.graph import Edge, PGOResult, PoseGraph, optimize_pose_graph
from scanloop.slam.keyframes import KeyframeDatabase, KeyframeRecord
from scanloop.slam.registrar import Registrar

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class LoopClosure:
    keyframe_id: int
    match_id: int
    distance: float
    reliability: float
    transform: RigidTransform
    optimization: PGOResult
    correction: RigidTransform  # applied to the newest keyframe by the optimization

    def as_dict(self) -> dict:
        return {
            "keyframe_id": self.keyframe_id,
            "match_id": self.match_id,
            "distance": self.distance,
            "reliability": self.reliability,
            "transform": self.transform.matrix.tolist(),
            "correction": self.correction.matrix.tolist(),
            "optimization": self.optimization.as_dict(),
        }


class LoopCloser:
    def __init__(
        self,
        registrar: Registrar,
        database: KeyframeDatabase,
        graph: PoseGraph,
        settings: SlamSettings,
        events: EventLog | None = None,
    ):
        self.registrar = registrar
        self.database = database
        self.graph = graph
        self.settings = settings
        self.events = events or EventLog()

    def candidate(self, keyframe: KeyframeRecord) -> tuple[KeyframeRecord, float] | None:
        """Rank-1 keyframe outside the exclusion window, if its distance passes the gate."""
        # the keyframe itself counts as one of the most recent
        newest_allowed = keyframe.id - max(1, self.settings.loop_exclusion)
        if newest_allowed < 0:
            return None
        hit = self.database.nearest(keyframe.descriptor, exclude=lambda i: i > newest_allowed)
        if hit is None:
            return None
        match, distance = hit
        if distance >= self.settings.descriptor_threshold:
            return None
        return match, distance

    def detect_and_close(self, keyframe: KeyframeRecord) -> LoopClosure | None:
        hit = self.candidate(keyframe)
        if hit is None:
            return None
        match, distance = hit
        cfg = self.settings
        try:
            result = self.registrar.register(keyframe.cloud, match.cloud)
        except ScanloopError as exc:
            self._reject(keyframe, match, distance, exc.code)
            return None
        if result.reliability <= cfg.reliability_threshold:
            self._reject(keyframe, match, distance, "UNRELIABLE")
            return None

        self.graph.add_edge(
            Edge(
                match.id,
                keyframe.id,
                result.transform,
                "loop",
                cfg.loop_weight,
                result.reliability,
            )
        )
        optimization = optimize_pose_graph(self.graph, cfg.pgo_max_iterations, cfg.pgo_damping)
        correction = self.graph.apply(optimization.poses)
        self.events.emit(
            "loop",
            keyframe=keyframe.id,
            match=match.id,
            timestamp=keyframe.timestamp,
            distance=distance,
            reliability=result.reliability,
        )
        self.events.emit("optimization", keyframe=keyframe.id, **optimization.as_dict())
        logger.info(
            "loop closed",
            extra={
                "fields": {
                    "keyframe": keyframe.id,
                    "match": match.id,
                    "distance": distance,
                    "cost_before": optimization.initial_cost,
                    "cost_after": optimization.final_cost,
                }
            },
        )
        return LoopClosure(
            keyframe.id,
            match.id,
            distance,
            result.reliability,
            result.transform,
            optimization,
            correction,
        )

    def _reject(self, keyframe: KeyframeRecord, match: KeyframeRecord, distance, reason) -> None:
        logger.warning(
            "loop candidate rejected",
            extra={
                "fields": {
                    "keyframe": keyframe.id,
                    "match": match.id,
                    "distance": distance,
                    "reason": reason,
                }
            },
        )
        self.events.emit(
            "loop_rejected",
            keyframe=keyframe.id,
            match=match.id,
            timestamp=keyframe.timestamp,
            distance=distance,
            reason=reason,
        )
