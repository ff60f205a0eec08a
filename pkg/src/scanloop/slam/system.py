"""Tracking, relocalization and loop closing wired together, plus their schedulers."""

import logging
import queue
import threading
import time
from collections.abc import Iterable
from dataclasses import dataclass, field

from scanloop.common.config import SlamSettings
from scanloop.common.exceptions import ContractError, RelocalizationFailedError
from scanloop.geometry.cloud import PointCloud
from scanloop.slam.events import EventLog
from scanloop.slam.graph import Edge, PoseGraph
from scanloop.slam.keyframes import (
    DEGENERATED,
    KeyframeDatabase,
    KeyframeRecord,
    KeyframeSelector,
)
from scanloop.slam.loop_closing import LoopCloser, LoopClosure
from scanloop.slam.registrar import Registrar
from scanloop.slam.relocalization import RelocalizationOutcome, Relocalizer
from scanloop.slam.tracking import Tracker, TrackResult
from scanloop.slam.trajectory import StampedPose

logger = logging.getLogger(__name__)


@dataclass
class SlamRun:
    """What one pass over a scan sequence produced."""

    scans: list[TrackResult] = field(default_factory=list)
    keyframes: list[KeyframeRecord] = field(default_factory=list)
    trajectory: list[StampedPose] = field(default_factory=list)
    relocalizations: list[RelocalizationOutcome] = field(default_factory=list)
    loops: list[LoopClosure] = field(default_factory=list)
    failed_relocalizations: list[int] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "scans": len(self.scans),
            "keyframes": len(self.keyframes),
            "degenerated_scans": sum(s.degenerated for s in self.scans),
            "lost_scans": sum(s.lost for s in self.scans),
            "relocalizations": len(self.relocalizations),
            "failed_relocalizations": len(self.failed_relocalizations),
            "loops": len(self.loops),
        }


class SlamSystem:
    """Shared state of the three workers.

    The keyframe database and the pose graph lock their own mutations, so the
    tracking worker only ever waits for short critical sections.
    """

    def __init__(
        self,
        registrar: Registrar,
        settings: SlamSettings,
        relocalization: bool = True,
        loop_closing: bool = True,
        events: EventLog | None = None,
    ):
        self.registrar = registrar
        self.settings = settings
        self.relocalization = relocalization
        self.loop_closing = loop_closing
        self.events = events or EventLog()
        self.tracker = Tracker(settings)
        self.selector = KeyframeSelector(settings.keyframe_distance, settings.degenerate_period)
        self.database = KeyframeDatabase()
        self.graph = PoseGraph()
        self.relocalizer = Relocalizer(registrar, self.database, self.graph, settings, self.events)
        self.loop_closer = LoopCloser(registrar, self.database, self.graph, settings, self.events)

    # ── Tracking worker ──

    def track(
        self, timestamp: float, cloud: PointCloud
    ) -> tuple[TrackResult, KeyframeRecord | None]:
        result = self.tracker.track(cloud, timestamp)
        if result.lost:
            self.events.emit("tracking_lost", timestamp=timestamp)
        elif result.degenerated:
            self.events.emit("degeneracy", timestamp=timestamp, lambda_min=result.lambda_min)
        decision = self.selector.decide(timestamp, result.pose, result.degenerated)
        if not decision.selected:
            return result, None
        keyframe = self._insert(timestamp, cloud, result, decision.category == DEGENERATED)
        self.events.emit(
            "keyframe",
            keyframe=keyframe.id,
            timestamp=timestamp,
            category=decision.category,
            reasons=list(decision.reasons),
        )
        return result, keyframe

    def _insert(
        self, timestamp: float, cloud: PointCloud, result: TrackResult, degenerated: bool
    ) -> KeyframeRecord:
        descriptor = self.registrar.describe(cloud)
        keyframe = self.database.add(timestamp, cloud, result.pose, descriptor, degenerated)
        previous = keyframe.id - 1
        self.graph.add_node(keyframe.id, result.pose)
        if previous >= 0:
            measurement = self.graph.pose(previous).inverse() @ result.pose
            self.graph.add_edge(
                Edge(previous, keyframe.id, measurement, "odometry", self.settings.odometry_weight)
            )
        return keyframe

    # ── Relocalization worker ──

    def relocalize(self, keyframe_id: int) -> RelocalizationOutcome | None:
        keyframe = self.database.get(keyframe_id)
        if not keyframe.degenerated:
            return None
        try:
            outcome = self.relocalizer.relocalize(keyframe)
        except RelocalizationFailedError:
            return None
        except ContractError as exc:
            logger.info(
                "relocalization skipped",
                extra={"fields": {"keyframe": keyframe_id, "reason": exc.message}},
            )
            return None
        self.tracker.correct(outcome.correction)
        return outcome

    # ── Loop-closing worker ──

    def close_loop(self, keyframe_id: int) -> LoopClosure | None:
        closure = self.loop_closer.detect_and_close(self.database.get(keyframe_id))
        if closure is not None:
            self.tracker.correct(closure.correction)
        return closure

    # ── Results ──

    def trajectory(self) -> list[StampedPose]:
        """Keyframe poses as currently held by the pose graph."""
        return [
            StampedPose(record.timestamp, self.graph.pose(record.id))
            for record in self.database.records()
        ]

    def collect(self, run: SlamRun) -> SlamRun:
        run.keyframes = self.database.records()
        run.trajectory = self.trajectory()
        run.events = list(self.events.events)
        return run


class SyncScheduler:
    """Runs all three workers in one thread, firing the back end on scan time.

    Relocalization and loop closing drain their queues whenever scan time
    crosses their next tick (``relocalization_hz`` / ``loop_closing_hz``);
    anything still queued is drained after the last scan.
    """

    def __init__(self, system: SlamSystem):
        self.system = system

    def run(self, scans: Iterable[tuple[float, PointCloud]]) -> SlamRun:
        system = self.system
        cfg = system.settings
        run = SlamRun()
        reloc_queue: list[int] = []
        loop_queue: list[int] = []
        next_reloc = next_loop = None
        for timestamp, cloud in scans:
            if next_reloc is None:
                next_reloc = timestamp + 1.0 / cfg.relocalization_hz
                next_loop = timestamp + 1.0 / cfg.loop_closing_hz
            result, keyframe = system.track(timestamp, cloud)
            run.scans.append(result)
            if keyframe is not None:
                if system.relocalization and keyframe.degenerated:
                    reloc_queue.append(keyframe.id)
                if system.loop_closing:
                    loop_queue.append(keyframe.id)
            if timestamp >= next_reloc:
                self._relocalize(reloc_queue, run)
                while next_reloc <= timestamp:
                    next_reloc += 1.0 / cfg.relocalization_hz
            if timestamp >= next_loop:
                self._close_loops(loop_queue, run)
                while next_loop <= timestamp:
                    next_loop += 1.0 / cfg.loop_closing_hz
        self._relocalize(reloc_queue, run)
        self._close_loops(loop_queue, run)
        return system.collect(run)

    def _relocalize(self, pending: list[int], run: SlamRun) -> None:
        while pending:
            keyframe_id = pending.pop(0)
            outcome = self.system.relocalize(keyframe_id)
            if outcome is not None:
                run.relocalizations.append(outcome)
            elif self.system.database.get(keyframe_id).degenerated:
                run.failed_relocalizations.append(keyframe_id)

    def _close_loops(self, pending: list[int], run: SlamRun) -> None:
        while pending:
            closure = self.system.close_loop(pending.pop(0))
            if closure is not None:
                run.loops.append(closure)


_STOP = object()


class ThreadedScheduler:
    """Tracking in the calling thread; relocalization and loop closing in workers.

    Keyframe ids reach the workers through FIFO queues. With ``pace`` the
    workers sleep out their configured period between items.
    """

    def __init__(self, system: SlamSystem, pace: bool = True):
        self.system = system
        self.pace = pace
        self._lock = threading.Lock()

    def _worker(self, inbox: queue.Queue, handle, period: float, sink: list) -> None:
        while True:
            item = inbox.get()
            if item is _STOP:
                break
            started = time.monotonic()
            try:
                outcome = handle(item)
            except Exception:
                logger.exception("slam worker failed", extra={"fields": {"keyframe": item}})
                outcome = None
            with self._lock:
                sink.append((item, outcome))
            if self.pace:
                time.sleep(max(0.0, period - (time.monotonic() - started)))

    def run(self, scans: Iterable[tuple[float, PointCloud]]) -> SlamRun:
        system = self.system
        cfg = system.settings
        run = SlamRun()
        reloc_inbox: queue.Queue = queue.Queue()
        loop_inbox: queue.Queue = queue.Queue()
        reloc_results: list = []
        loop_results: list = []
        workers = [
            threading.Thread(
                target=self._worker,
                args=(reloc_inbox, system.relocalize, 1.0 / cfg.relocalization_hz, reloc_results),
                name="scanloop-relocalization",
                daemon=True,
            ),
            threading.Thread(
                target=self._worker,
                args=(loop_inbox, system.close_loop, 1.0 / cfg.loop_closing_hz, loop_results),
                name="scanloop-loop-closing",
                daemon=True,
            ),
        ]
        for worker in workers:
            worker.start()
        try:
            for timestamp, cloud in scans:
                result, keyframe = system.track(timestamp, cloud)
                run.scans.append(result)
                if keyframe is None:
                    continue
                if system.relocalization and keyframe.degenerated:
                    reloc_inbox.put(keyframe.id)
                if system.loop_closing:
                    loop_inbox.put(keyframe.id)
        finally:
            reloc_inbox.put(_STOP)
            loop_inbox.put(_STOP)
            for worker in workers:
                worker.join()

        for keyframe_id, outcome in reloc_results:
            if outcome is not None:
                run.relocalizations.append(outcome)
            elif system.database.get(keyframe_id).degenerated:
                run.failed_relocalizations.append(keyframe_id)
        run.loops = [closure for _, closure in loop_results if closure is not None]
        return system.collect(run)
