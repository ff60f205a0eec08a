"""Tests for tracking, keyframes, the pose graph, the back end and trajectory tools."""

import logging
from dataclasses import dataclass, field

import numpy as np
import pytest

from scanloop.common.config import SlamSettings
from scanloop.common.exceptions import (
    AssociationError,
    ContractError,
    KittiFormatError,
    RegistrationFailedError,
    RelocalizationFailedError,
)
from scanloop.geometry import PointCloud, RigidTransform
from scanloop.registration.solvers import RegistrationResult
from scanloop.slam import (
    Edge,
    EventLog,
    KeyframeDatabase,
    KeyframeSelector,
    LoopCloser,
    PoseGraph,
    Registrar,
    Relocalizer,
    SlamSystem,
    StampedPose,
    SyncScheduler,
    ThreadedScheduler,
    Tracker,
    ape,
    optimize_pose_graph,
    read_kitti_poses,
    read_tum,
    write_kitti_poses,
    write_tum,
)

BOXES = ((5.0, 3.0), (-6.0, 4.0), (2.0, -7.0), (-4.0, -5.0), (8.0, -3.0), (0.0, 9.0))


def _rich_world(rng, n: int = 8000) -> np.ndarray:
    """Ground plus the four side faces of six upright boxes."""
    half = n // 2
    ground = np.column_stack(
        [rng.uniform(-15, 15, half), rng.uniform(-15, 15, half), np.zeros(half)]
    )
    per = (n - half) // (4 * len(BOXES))
    faces = []
    for center in BOXES:
        for axis in (0, 1):
            for side in (-1.0, 1.0):
                face = np.empty((per, 3))
                face[:, axis] = center[axis] + side
                face[:, 1 - axis] = center[1 - axis] + rng.uniform(-1, 1, per)
                face[:, 2] = rng.uniform(0, 3, per)
                faces.append(face)
    return np.vstack([ground, *faces])


def _corridor_world(rng, n: int = 12000) -> np.ndarray:
    """Two parallel walls and a floor strip, all invariant along x."""
    third = n // 3
    floor = np.column_stack(
        [rng.uniform(-40, 40, third), rng.uniform(-1.0, 1.0, third), np.zeros(third)]
    )
    walls = []
    for y in (-2.5, 2.5):
        walls.append(
            np.column_stack(
                [rng.uniform(-40, 40, third), np.full(third, y), rng.uniform(1.0, 3.0, third)]
            )
        )
    return np.vstack([floor, *walls])


def _scan(world: np.ndarray, pose: RigidTransform, reach: float = 15.0) -> PointCloud:
    near = np.linalg.norm(world - pose.translation, axis=1) <= reach
    return PointCloud(pose.inverse().apply(world[near]))


def _token(k: int) -> PointCloud:
    return PointCloud(np.full((3, 3), float(k)))


def _key(cloud: PointCloud) -> int:
    return int(round(cloud.points[0, 0]))


@dataclass
class FakeRegistrar:
    """Answers with ground-truth relative poses; scores and failures are scripted."""

    poses: dict[int, RigidTransform] = field(default_factory=dict)
    descriptors: dict[int, np.ndarray] = field(default_factory=dict)
    scores: dict[tuple[int, int], float | None] = field(default_factory=dict)
    default_score: float = 0.9
    calls: list[tuple[int, int]] = field(default_factory=list)

    def describe(self, cloud: PointCloud) -> np.ndarray:
        return self.descriptors.get(_key(cloud), np.zeros(4))

    def register(self, cloud_a: PointCloud, cloud_b: PointCloud) -> RegistrationResult:
        a, b = _key(cloud_a), _key(cloud_b)
        self.calls.append((a, b))
        score = self.scores.get((a, b), self.default_score)
        if score is None:
            raise RegistrationFailedError("scripted failure")
        T = self.poses[b].inverse() @ self.poses[a]
        return RegistrationResult(T, 10, 0, "fake", 0.0, reliability=score)


def _backend(registrar: FakeRegistrar, estimates, degenerated=()):
    """Keyframe database and odometry chain over token clouds."""
    db = KeyframeDatabase()
    graph = PoseGraph()
    for k, pose in enumerate(estimates):
        db.add(float(k), _token(k), pose, registrar.describe(_token(k)), k in degenerated)
        graph.add_node(k, pose)
        if k:
            graph.add_edge(Edge(k - 1, k, estimates[k - 1].inverse() @ pose))
    return db, graph


def _square(steps_per_side: int = 2, side: float = 10.0) -> list[RigidTransform]:
    poses = []
    position = np.zeros(3)
    step = side / steps_per_side
    for s in range(4):
        yaw = s * np.pi / 2
        heading = np.array([np.cos(yaw), np.sin(yaw), 0.0])
        for _ in range(steps_per_side):
            poses.append(RigidTransform.from_yaw(yaw, position.copy()))
            position = position + step * heading
    return poses


def _drifted(truth: list[RigidTransform], total_yaw_deg: float) -> list[RigidTransform]:
    """Compose ground-truth increments with a constant yaw bias."""
    bias = RigidTransform.from_yaw(np.radians(total_yaw_deg) / (len(truth) - 1))
    out = [truth[0]]
    for a, b in zip(truth, truth[1:]):
        out.append(out[-1] @ (a.inverse() @ b) @ bias)
    return out


class TestPointToPlaneTracking:
    def test_static_scan_repeated(self, rng):
        settings = SlamSettings()
        tracker = Tracker(settings)
        scan = _scan(_rich_world(rng), RigidTransform.identity())
        tracker.track(scan, 0.0)
        result = tracker.track(scan, 0.1)
        assert np.linalg.norm(result.pose.translation) < 0.01
        assert result.pose.angle < 0.002
        assert result.lambda_min > settings.lambda_threshold
        assert not result.degenerated

    def test_half_meter_offset_in_rich_scene(self, rng):
        world = _rich_world(rng)
        tracker = Tracker(SlamSettings())
        tracker.track(_scan(world, RigidTransform.identity()), 0.0)
        truth = RigidTransform.from_yaw(0.02, (0.5, 0.0, 0.0))
        result = tracker.track(_scan(_rich_world(rng), truth), 0.1)
        assert np.linalg.norm(result.pose.translation - truth.translation) < 0.05
        assert not result.degenerated

    def test_corridor_is_degenerate(self, rng):
        tracker = Tracker(SlamSettings())
        tracker.track(_scan(_corridor_world(rng), RigidTransform.identity()), 0.0)
        result = tracker.track(
            _scan(_corridor_world(rng), RigidTransform.from_yaw(0.0, (0.5, 0.0, 0.0))), 0.1
        )
        assert result.lambda_min < SlamSettings().lambda_threshold
        assert result.degenerated
        assert result.lambda_min >= 0.0

    def test_first_scan_initializes(self, rng):
        tracker = Tracker(SlamSettings())
        result = tracker.track(_scan(_rich_world(rng), RigidTransform.identity()), 0.0)
        assert result.lambda_min is None
        assert tracker.state.initialized
        assert len(tracker.state.local_map) == 1

    def test_lost_when_nothing_overlaps(self, rng):
        tracker = Tracker(SlamSettings())
        tracker.track(_scan(_rich_world(rng), RigidTransform.identity()), 0.0)
        far = PointCloud(rng.uniform(100, 110, size=(200, 3)))
        result = tracker.track(far, 0.1)
        assert result.lost
        assert result.degenerated

    def test_correction_moves_pose_and_map(self, rng):
        tracker = Tracker(SlamSettings())
        scan = _scan(_rich_world(rng), RigidTransform.identity())
        tracker.track(scan, 0.0)
        shift = RigidTransform.from_yaw(0.0, (1.0, 0.0, 0.0))
        tracker.correct(shift)
        result = tracker.track(PointCloud(scan.points), 0.1)
        # the map moved with the correction, so the unchanged scan now sits 1 m along x
        assert np.allclose(result.pose.translation, [1.0, 0.0, 0.0], atol=0.01)

    def test_empty_scan(self):
        with pytest.raises(ContractError):
            Tracker(SlamSettings()).track(PointCloud.empty(), 0.0)


class TestKeyframeSelector:
    def test_distance_rule(self):
        selector = KeyframeSelector(distance=2.0, period=3.0)
        chosen = []
        for k in range(20):
            pose = RigidTransform.from_yaw(0.0, (0.5 * k, 0.0, 0.0))
            decision = selector.decide(0.1 * k, pose, degenerated=False)
            if decision.selected:
                chosen.append(0.5 * k)
                assert decision.category == "nondegenerated"
        assert chosen == [0.0, 2.0, 4.0, 6.0, 8.0]

    def test_first_degenerated_scan_after_nondegenerated(self):
        selector = KeyframeSelector()
        still = RigidTransform.identity()
        selector.decide(0.0, still, False)
        assert not selector.decide(0.1, still, False).selected
        decision = selector.decide(0.2, still, True)
        assert decision.selected
        assert "degeneracy_onset" in decision.reasons
        assert decision.category == "degenerated"

    def test_periodic_keyframes_inside_degenerate_run(self):
        selector = KeyframeSelector(distance=2.0, period=3.0)
        still = RigidTransform.identity()
        periodic = []
        for k in range(111):
            t = round(0.1 * k, 6)
            decision = selector.decide(t, still, degenerated=k >= 10)
            if "degeneracy_period" in decision.reasons:
                periodic.append(t)
        assert periodic == pytest.approx([4.0, 7.0, 10.0])

    def test_exit_keyframe_unless_last_degenerated_was_chosen(self):
        still = RigidTransform.identity()
        selector = KeyframeSelector()
        for t, flag in ((0.0, False), (0.1, False), (0.2, True), (0.3, True)):
            selector.decide(t, still, flag)
        decision = selector.decide(0.4, still, False)
        assert decision.selected
        assert decision.reasons == ("degeneracy_exit",)
        assert decision.category == "degenerated"

        selector = KeyframeSelector()
        for t, flag in ((0.0, False), (0.1, False), (0.2, True)):
            selector.decide(t, still, flag)
        assert not selector.decide(0.3, still, False).selected

    def test_invalid_thresholds(self):
        with pytest.raises(ContractError):
            KeyframeSelector(distance=0.0)


class TestKeyframeDatabase:
    def test_ids_follow_insertion(self):
        db = KeyframeDatabase()
        first = db.add(0.0, _token(0), RigidTransform.identity(), np.zeros(4))
        second = db.add(1.0, _token(1), RigidTransform.identity(), np.ones(4), degenerated=True)
        assert (first.id, second.id) == (0, 1)
        assert db.latest_nondegenerated(before=2).id == 0
        assert db.relabel(1).degenerated is False
        assert db.latest_nondegenerated(before=2).id == 1

    def test_timestamps_must_increase(self):
        db = KeyframeDatabase()
        db.add(1.0, _token(0), RigidTransform.identity(), np.zeros(4))
        with pytest.raises(ContractError):
            db.add(1.0, _token(1), RigidTransform.identity(), np.zeros(4))

    def test_descriptor_required(self):
        with pytest.raises(ContractError):
            KeyframeDatabase().add(0.0, _token(0), RigidTransform.identity(), None)

    def test_nearest_respects_exclusion(self):
        db = KeyframeDatabase()
        for k in range(3):
            db.add(float(k), _token(k), RigidTransform.identity(), np.full(4, float(k)))
        record, distance = db.nearest(np.full(4, 2.0), exclude=lambda i: i == 2)
        assert record.id == 1
        assert distance == pytest.approx(2.0)
        assert db.nearest(np.zeros(4), exclude=lambda i: True) is None


class TestPoseGraphOptimization:
    def test_consistent_chain_recovers_odometry(self):
        truth = _square()
        rng = np.random.default_rng(3)
        graph = PoseGraph()
        for k, pose in enumerate(truth):
            noise = RigidTransform.from_yaw(rng.normal(0, 0.1), rng.normal(0, 0.5, 3))
            graph.add_node(k, pose if k == 0 else noise @ pose)
        for k in range(1, len(truth)):
            graph.add_edge(Edge(k - 1, k, truth[k - 1].inverse() @ truth[k]))
        result = optimize_pose_graph(graph)
        assert result.converged
        assert result.final_cost < 1e-12
        for k, pose in enumerate(truth):
            assert np.allclose(result.poses[k].matrix, pose.matrix, atol=1e-5)

    def test_square_loop_shrinks_endpoint_error(self):
        truth = _square()
        drifted = _drifted(truth, total_yaw_deg=1.0)
        graph = PoseGraph()
        for k, pose in enumerate(drifted):
            graph.add_node(k, pose)
            if k:
                graph.add_edge(Edge(k - 1, k, drifted[k - 1].inverse() @ pose))
        last = len(truth) - 1
        graph.add_edge(Edge(0, last, truth[0].inverse() @ truth[last], "loop", 10.0, 0.9))
        before = np.linalg.norm(drifted[last].translation - truth[last].translation)
        result = optimize_pose_graph(graph)
        after = np.linalg.norm(result.poses[last].translation - truth[last].translation)
        assert before > 0.05
        assert after < 0.1 * before

    def test_cost_never_increases(self):
        truth = _square()
        drifted = _drifted(truth, total_yaw_deg=5.0)
        graph = PoseGraph()
        for k, pose in enumerate(drifted):
            graph.add_node(k, pose)
            if k:
                graph.add_edge(Edge(k - 1, k, truth[k - 1].inverse() @ truth[k]))
        graph.add_edge(Edge(0, 7, truth[0].inverse() @ truth[7], "loop", 1.0, 0.9))
        history = optimize_pose_graph(graph).history
        assert all(b <= a for a, b in zip(history, history[1:]))

    def test_single_node_is_a_no_op(self):
        graph = PoseGraph()
        pose = RigidTransform.from_yaw(0.4, (1.0, 2.0, 0.0))
        graph.add_node(0, pose)
        result = optimize_pose_graph(graph)
        assert result.converged and result.iterations == 0
        assert result.poses[0] is pose

    def test_iteration_limit_is_flagged(self):
        truth = _square()
        graph = PoseGraph()
        for k, pose in enumerate(truth):
            tweak = RigidTransform.from_yaw(0.5, (2.0, -2.0, 0.0))
            graph.add_node(k, pose if k == 0 else tweak @ pose)
            if k:
                graph.add_edge(Edge(k - 1, k, truth[k - 1].inverse() @ truth[k]))
        result = optimize_pose_graph(graph, max_iterations=1)
        assert not result.converged
        assert result.iterations == 1
        assert result.final_cost < result.initial_cost

    def test_disconnected_graph(self):
        graph = PoseGraph()
        for k in range(3):
            graph.add_node(k, RigidTransform.identity())
        graph.add_edge(Edge(0, 1, RigidTransform.identity()))
        with pytest.raises(ContractError):
            optimize_pose_graph(graph)

    def test_loop_edges_carry_reliability(self):
        with pytest.raises(ContractError):
            Edge(0, 1, RigidTransform.identity(), "loop")


class TestRelocalization:
    def _setup(self, **registrar_kwargs):
        truth = [RigidTransform.from_yaw(0.0, (x, 0.0, 0.0)) for x in (0.0, 2.0, 3.0, 5.0)]
        estimates = truth[:2] + [
            RigidTransform.from_yaw(0.0, (5.0, 0.0, 0.0)),
            RigidTransform.from_yaw(0.0, (7.0, 0.0, 0.0)),
        ]
        registrar = FakeRegistrar(poses=dict(enumerate(truth)), **registrar_kwargs)
        db, graph = _backend(registrar, estimates, degenerated={2})
        events = EventLog()
        relocalizer = Relocalizer(registrar, db, graph, SlamSettings(), events)
        return registrar, db, graph, events, relocalizer

    def test_registrar_protocol(self):
        assert isinstance(FakeRegistrar(), Registrar)

    def test_success_relabels_and_corrects(self):
        _, db, graph, events, relocalizer = self._setup()
        outcome = relocalizer.relocalize(db.get(2))
        assert (outcome.candidate_id, outcome.path) == (1, "latest")
        assert np.allclose(graph.pose(2).translation, [3.0, 0.0, 0.0])
        assert np.allclose(graph.pose(3).translation, [5.0, 0.0, 0.0])
        assert not db.get(2).degenerated
        assert [e.target for e in graph.edges_of("odometry")] == [1, 3]
        (edge,) = graph.edges_of("relocalization")
        assert (edge.source, edge.target, edge.reliability) == (1, 2, 0.9)
        assert events.counts() == {"relocalization": 1}

    def test_reliability_at_threshold_fails(self):
        registrar, db, graph, events, relocalizer = self._setup(
            scores={(2, 1): 0.3},
            descriptors={0: np.zeros(4), 1: np.zeros(4), 2: np.full(4, 5.0)},
        )
        with pytest.raises(RelocalizationFailedError):
            relocalizer.relocalize(db.get(2))
        assert registrar.calls == [(2, 1)]
        assert db.get(2).degenerated
        assert not graph.edges_of("relocalization")
        assert events.counts() == {"relocalization_failed": 1}

    def test_retrieval_fallback(self):
        registrar, db, graph, _, relocalizer = self._setup(
            scores={(2, 1): None},
            descriptors={0: np.ones(4), 1: np.full(4, 9.0), 2: np.ones(4)},
        )
        outcome = relocalizer.relocalize(db.get(2))
        assert (outcome.candidate_id, outcome.path) == (0, "retrieval")
        assert registrar.calls == [(2, 1), (2, 0)]
        assert np.allclose(graph.pose(2).translation, [3.0, 0.0, 0.0])

    def test_needs_degenerated_keyframe_and_trusted_candidate(self):
        registrar = FakeRegistrar(poses={0: RigidTransform.identity()})
        db, graph = _backend(registrar, [RigidTransform.identity()], degenerated={0})
        relocalizer = Relocalizer(registrar, db, graph, SlamSettings())
        with pytest.raises(ContractError):
            relocalizer.relocalize(db.get(0))
        db.relabel(0)
        with pytest.raises(ContractError):
            relocalizer.relocalize(db.get(0))


class TestLoopClosing:
    def _revisit(self, settings: SlamSettings, **registrar_kwargs):
        truth = _square() + [RigidTransform.identity()]
        drifted = _drifted(truth, total_yaw_deg=2.0)
        descriptors = {k: np.full(4, 10.0 * k) for k in range(len(truth))}
        descriptors[8] = descriptors[0].copy()
        registrar = FakeRegistrar(
            poses=dict(enumerate(truth)), descriptors=descriptors, **registrar_kwargs
        )
        db, graph = _backend(registrar, drifted)
        events = EventLog()
        return db, graph, events, LoopCloser(registrar, db, graph, settings, events)

    def test_window_excludes_recent_keyframes(self):
        registrar = FakeRegistrar()
        db, graph = _backend(registrar, [RigidTransform.identity()] * 50)
        closer = LoopCloser(registrar, db, graph, SlamSettings())
        assert closer.detect_and_close(db.get(49)) is None
        assert registrar.calls == []

    def test_revisit_closes_loop(self):
        db, graph, events, closer = self._revisit(SlamSettings(loop_exclusion=5))
        before = np.linalg.norm(graph.pose(8).translation)
        closure = closer.detect_and_close(db.get(8))
        assert (closure.keyframe_id, closure.match_id) == (8, 0)
        (edge,) = graph.edges_of("loop")
        assert edge.target - edge.source >= 5
        residual = edge.residual(graph.pose(0), graph.pose(8))
        assert np.linalg.norm(residual[3:]) < 0.2
        assert np.linalg.norm(graph.pose(8).translation) < before
        assert closure.optimization.final_cost <= closure.optimization.initial_cost
        assert events.counts() == {"loop": 1, "optimization": 1}

    def test_distance_gate_is_strict(self):
        db, graph, _, closer = self._revisit(SlamSettings(loop_exclusion=5))
        db2 = KeyframeDatabase()
        for record in db.records()[:8]:
            db2.add(record.timestamp, record.cloud, record.pose, record.descriptor)
        gated = db2.add(8.0, _token(8), graph.pose(8), db.get(0).descriptor + 0.5)
        closer.database = db2
        assert closer.candidate(gated) is None

    def test_failed_registration_rejects_candidate(self, caplog):
        db, graph, events, closer = self._revisit(
            SlamSettings(loop_exclusion=5), scores={(8, 0): None}
        )
        with caplog.at_level(logging.WARNING, logger="scanloop"):
            assert closer.detect_and_close(db.get(8)) is None
        assert "loop candidate rejected" in caplog.text
        assert not graph.edges_of("loop")
        assert events.counts() == {"loop_rejected": 1}


class TestSchedulers:
    def _sequence(self, rng, count: int = 12):
        truth = [RigidTransform.from_yaw(0.0, (0.5 * k, 0.0, 0.0)) for k in range(count)]
        scans = [
            (round(0.1 * k, 6), _scan(_rich_world(rng), pose)) for k, pose in enumerate(truth)
        ]
        return truth, scans

    def test_sync_run_follows_ground_truth(self, rng):
        truth, scans = self._sequence(rng)
        system = SlamSystem(FakeRegistrar(), SlamSettings())
        run = SyncScheduler(system).run(scans)
        assert len(run.scans) == len(scans)
        assert len(run.trajectory) == 3
        reference = [
            StampedPose(p.timestamp, truth[round(p.timestamp * 10)]) for p in run.trajectory
        ]
        assert ape(run.trajectory, reference).max < 0.05
        assert run.summary()["degenerated_scans"] == 0
        assert len(system.graph.edges_of("odometry")) == 2

    def test_threaded_run_matches_sync(self, rng):
        _, scans = self._sequence(rng, count=8)
        sync = SyncScheduler(SlamSystem(FakeRegistrar(), SlamSettings())).run(scans)
        threaded = ThreadedScheduler(
            SlamSystem(FakeRegistrar(), SlamSettings()), pace=False
        ).run(scans)
        assert len(threaded.trajectory) == len(sync.trajectory)
        for a, b in zip(threaded.trajectory, sync.trajectory):
            assert np.allclose(a.pose.matrix, b.pose.matrix)


class TestTrajectories:
    def _line(self, offsets=None):
        offsets = offsets or [0.0] * 5
        return [
            StampedPose(float(k), RigidTransform.from_yaw(0.0, (float(k), offsets[k], 0.0)))
            for k in range(5)
        ]

    def test_identical_trajectories(self):
        report = ape(self._line(), self._line())
        assert report.as_dict() == {
            "poses": 5,
            "mean": 0.0,
            "median": 0.0,
            "max": 0.0,
            "rmse": 0.0,
        }

    def test_hand_computed_offset(self):
        report = ape(self._line([0.0, 1.0, 1.0, 1.0, 1.0]), self._line())
        assert np.allclose(report.errors, [0.0, 1.0, 1.0, 1.0, 1.0])
        assert report.mean == pytest.approx(0.8)
        assert report.rmse == pytest.approx(np.sqrt(0.8))

    def test_origin_alignment_removes_constant_offset(self):
        assert ape(self._line([1.0] * 5), self._line()).max == pytest.approx(0.0, abs=1e-12)

    def test_timestamps_must_associate(self):
        shifted = [StampedPose(p.timestamp + 0.5, p.pose) for p in self._line()]
        with pytest.raises(AssociationError):
            ape(shifted, self._line())

    def test_tum_file(self, tmp_path):
        poses = [StampedPose(1.5, RigidTransform.from_yaw(0.7, (1.0, 2.0, 3.0)))]
        loaded = read_tum(write_tum(tmp_path / "traj.txt", poses))
        assert loaded[0].timestamp == 1.5
        assert np.allclose(loaded[0].pose.matrix, poses[0].pose.matrix, atol=1e-8)

    def test_kitti_rows(self, tmp_path):
        poses = [RigidTransform.from_yaw(0.2, (4.0, 0.0, 1.0)), RigidTransform.identity()]
        loaded = read_kitti_poses(write_kitti_poses(tmp_path / "poses.txt", poses))
        assert len(loaded) == 2
        assert np.allclose(loaded[0].matrix, poses[0].matrix, atol=1e-8)

    def test_short_kitti_row_reports_offset(self, tmp_path):
        path = tmp_path / "bad.txt"
        good = " ".join(["1", "0", "0", "0", "0", "1", "0", "0", "0", "0", "1", "0"]) + "\n"
        path.write_text(good + "1 2 3\n")
        with pytest.raises(KittiFormatError) as info:
            read_kitti_poses(path)
        assert info.value.offset == len(good)
