"""Relocalization of degenerated keyframes against earlier ones."""

import logging
from dataclasses import dataclass

from scanloop.common.config import SlamSettings
from scanloop.common.exceptions import ContractError, RelocalizationFailedError, ScanloopError
from scanloop.geometry.transform import RigidTransform
from scanloop.registration.solvers import RegistrationResult
from scanloop.slam.events import EventLog
from scanloop.slam.graph import Edge, PoseGraph
from scanloop.slam.keyframes import KeyframeDatabase, KeyframeRecord
from scanloop.slam.registrar import Registrar

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class RelocalizationOutcome:
    keyframe_id: int
    candidate_id: int
    path: str  # "latest" or "retrieval"
    reliability: float
    transform: RigidTransform
    correction: RigidTransform


class Relocalizer:
    """Registers a degenerated keyframe to a trusted one and relabels it on success.

    The first candidate is the most recent nondegenerated keyframe. When that
    registration is unreliable, the nearest keyframe by descriptor (distance
    strictly below ``descriptor_threshold``) is tried once.
    """

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

    def is_reliable(self, result: RegistrationResult | None) -> bool:
        # strict: a score equal to the threshold is a failure
        return result is not None and result.reliability > self.settings.reliability_threshold

    def _register(self, keyframe: KeyframeRecord, candidate: KeyframeRecord):
        try:
            return self.registrar.register(keyframe.cloud, candidate.cloud)
        except ScanloopError as exc:
            logger.info(
                "relocalization registration failed",
                extra={
                    "fields": {
                        "keyframe": keyframe.id,
                        "candidate": candidate.id,
                        "code": exc.code,
                    }
                },
            )
            return None

    def _fallback(self, keyframe: KeyframeRecord, tried: int) -> KeyframeRecord | None:
        def excluded(i: int) -> bool:
            return i >= keyframe.id or i == tried or self.database.get(i).degenerated

        hit = self.database.nearest(keyframe.descriptor, exclude=excluded)
        if hit is None:
            return None
        candidate, distance = hit
        if distance >= self.settings.descriptor_threshold:
            logger.debug(
                "no retrieval candidate under the descriptor threshold",
                extra={"fields": {"keyframe": keyframe.id, "distance": distance}},
            )
            return None
        return candidate

    def relocalize(self, keyframe: KeyframeRecord) -> RelocalizationOutcome:
        if not keyframe.degenerated:
            raise ContractError(f"keyframe {keyframe.id} is not degenerated")
        candidate = self.database.latest_nondegenerated(before=keyframe.id)
        if candidate is None:
            raise ContractError("no nondegenerated keyframe to relocalize against")

        result = self._register(keyframe, candidate)
        path = "latest"
        if not self.is_reliable(result):
            tried = candidate.id
            candidate = self._fallback(keyframe, tried)
            result = self._register(keyframe, candidate) if candidate is not None else None
            path = "retrieval"
            if not self.is_reliable(result):
                score = None if result is None else result.reliability
                logger.warning(
                    "relocalization failed",
                    extra={"fields": {"keyframe": keyframe.id, "reliability": score}},
                )
                self.events.emit(
                    "relocalization_failed",
                    keyframe=keyframe.id,
                    timestamp=keyframe.timestamp,
                    candidate=tried,
                    reliability=score,
                )
                raise RelocalizationFailedError(
                    f"keyframe {keyframe.id} could not be relocalized"
                )
        return self._accept(keyframe, candidate, result, path)

    def _accept(
        self,
        keyframe: KeyframeRecord,
        candidate: KeyframeRecord,
        result: RegistrationResult,
        path: str,
    ) -> RelocalizationOutcome:
        cfg = self.settings
        relocated = self.graph.pose(candidate.id) @ result.transform
        correction = relocated @ self.graph.pose(keyframe.id).inverse()
        # the relocalization edge replaces the untrusted odometry into this keyframe
        self.graph.remove_edges(keyframe.id, "odometry")
        self.graph.add_edge(
            Edge(
                candidate.id,
                keyframe.id,
                result.transform,
                "relocalization",
                cfg.relocalization_weight,
                result.reliability,
            )
        )
        self.graph.shift_from(keyframe.id, correction)
        self.database.relabel(keyframe.id, degenerated=False)
        self.events.emit(
            "relocalization",
            keyframe=keyframe.id,
            timestamp=keyframe.timestamp,
            candidate=candidate.id,
            path=path,
            reliability=result.reliability,
        )
        logger.info(
            "keyframe relocalized",
            extra={
                "fields": {
                    "keyframe": keyframe.id,
                    "candidate": candidate.id,
                    "path": path,
                    "reliability": result.reliability,
                }
            },
        )
        return RelocalizationOutcome(
            keyframe.id, candidate.id, path, result.reliability, result.transform, correction
        )
