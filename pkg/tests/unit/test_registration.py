"""Tests for the pose solvers and registration metrics."""

import numpy as np
import pytest

from scanloop.common.exceptions import (
    ContractError,
    DegenerateGeometryError,
    RegistrationFailedError,
)
from scanloop.common.jsonl import read_jsonl
from scanloop.geometry import RigidTransform, random_transform, rotation_angle
from scanloop.matching import CorrespondenceSet, SparseMatches
from scanloop.registration import (
    export_result,
    lgr,
    match_quality,
    oracle_correspondences,
    ransac_estimate,
    registration_metrics,
    registration_record,
    weighted_svd,
)


def _exact_set(T: RigidTransform, n: int = 30, patches: int = 1, seed: int = 0):
    rng = np.random.default_rng(seed)
    src = rng.uniform(-5, 5, size=(n, 3))
    return CorrespondenceSet(src, T.apply(src), np.ones(n), np.arange(n) % patches)


def _close(a: RigidTransform, b: RigidTransform, tol: float) -> bool:
    return np.allclose(a.matrix, b.matrix, atol=tol, rtol=0)


class TestWeightedSVD:
    def test_aligned_pairs_give_identity(self):
        pts = np.random.default_rng(1).normal(size=(10, 3))
        assert _close(weighted_svd(pts, pts), RigidTransform.identity(), 1e-10)

    def test_recovers_known_transform(self):
        rng = np.random.default_rng(2)
        T = random_transform(rng, max_translation=10.0)
        src = rng.normal(size=(50, 3)) * 4
        est = weighted_svd(src, T.apply(src), rng.uniform(0.1, 1.0, size=50))
        assert np.linalg.norm(est.rotation - T.rotation) < 1e-10
        assert np.linalg.norm(est.translation - T.translation) < 1e-8

    def test_zero_weight_outlier_is_neutral(self):
        rng = np.random.default_rng(3)
        T = random_transform(rng)
        src = rng.normal(size=(20, 3))
        tgt = T.apply(src)
        base = weighted_svd(src, tgt)
        src_o = np.vstack([src, [[100.0, 0.0, 0.0]]])
        tgt_o = np.vstack([tgt, [[-50.0, 3.0, 9.0]]])
        with_outlier = weighted_svd(src_o, tgt_o, np.append(np.ones(20), 0.0))
        assert _close(base, with_outlier, 1e-12)

    def test_reflection_corrected(self):
        src = np.random.default_rng(4).normal(size=(12, 3))
        est = weighted_svd(src, src * np.array([-1.0, 1.0, 1.0]))
        assert np.linalg.det(est.rotation) == pytest.approx(1.0, abs=1e-9)
        assert np.allclose(est.rotation.T @ est.rotation, np.eye(3), atol=1e-9)

    def test_collinear_points_are_degenerate(self):
        line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
        with pytest.raises(DegenerateGeometryError):
            weighted_svd(line, line + 1.0)

    def test_too_few_pairs(self):
        with pytest.raises(DegenerateGeometryError):
            weighted_svd(np.zeros((2, 3)), np.zeros((2, 3)))


class TestLGR:
    def test_single_patch_equals_weighted_svd(self):
        T = random_transform(np.random.default_rng(5), max_translation=3.0)
        corr = _exact_set(T, seed=5)
        result = lgr(corr, 0.6, 5)
        assert _close(result.transform, weighted_svd(corr.source, corr.target, corr.weights), 1e-12)
        assert result.inliers == len(corr)
        assert result.solver == "lgr"

    def test_poisoned_patch_is_not_selected(self):
        rng = np.random.default_rng(6)
        T = random_transform(rng, max_translation=5.0)
        clean = rng.uniform(-5, 5, size=(10, 3))
        bad = rng.uniform(-5, 5, size=(10, 3))
        corr = CorrespondenceSet(
            np.vstack([bad, clean]),
            np.vstack([rng.uniform(-30, 30, size=(10, 3)), T.apply(clean)]),
            np.ones(20),
            np.repeat([0, 1], 10),
        )
        result = lgr(corr, 0.6, 5)
        assert result.provenance == 1
        assert _close(result.transform, T, 1e-8)

    def test_ties_keep_lower_patch(self):
        T = random_transform(np.random.default_rng(7))
        result = lgr(_exact_set(T, n=30, patches=3, seed=7), 0.6, 0)
        assert result.provenance == 0

    def test_forty_percent_inliers(self):
        rng = np.random.default_rng(8)
        T = random_transform(rng, max_angle=np.pi / 4, max_translation=10.0)
        corr = oracle_correspondences(T, rng, patches=10, inlier_ratio=0.4, noise=0.02)
        metrics = registration_metrics(lgr(corr, 0.6, 5).transform, T)
        assert metrics.rre < 0.5
        assert metrics.rte < 0.1

    def test_inlier_history_never_decreases(self):
        rng = np.random.default_rng(9)
        T = random_transform(rng, max_translation=5.0)
        corr = oracle_correspondences(T, rng, patches=8, inlier_ratio=0.5, noise=0.05)
        history = lgr(corr, 0.6, 5).inlier_history
        assert all(b >= a for a, b in zip(history, history[1:]))

    def test_reliability_is_mean_weight(self):
        T = RigidTransform.from_yaw(0.3, (1.0, 0.0, 0.0))
        src = np.random.default_rng(4).uniform(-5, 5, size=(12, 3))
        weights = np.linspace(0.1, 1.0, 12)
        corr = CorrespondenceSet(src, T.apply(src), weights, np.zeros(12))
        assert lgr(corr).reliability == pytest.approx(weights.mean())
        assert ransac_estimate(corr, 50).reliability == pytest.approx(weights.mean())

    def test_nothing_solvable(self):
        corr = CorrespondenceSet(np.zeros((4, 3)), np.zeros((4, 3)), np.ones(4), [0, 0, 1, 1])
        with pytest.raises(RegistrationFailedError) as info:
            lgr(corr)
        assert info.value.code == "REGISTRATION_FAILED"
        assert info.value.diagnostics["patches"] == 2


class TestRansac:
    def test_exact_pairs_first_trial(self):
        T = random_transform(np.random.default_rng(10), max_translation=4.0)
        result = ransac_estimate(_exact_set(T, seed=10), 100, 0.6, seed=1)
        assert result.provenance == 0
        assert _close(result.transform, T, 1e-8)

    def test_thirty_percent_inliers(self):
        rng = np.random.default_rng(11)
        T = random_transform(rng, max_angle=np.pi / 3, max_translation=8.0)
        corr = oracle_correspondences(T, rng, patches=10, inlier_ratio=0.3, noise=0.02)
        result = ransac_estimate(corr, 5000, 0.6, seed=0)
        assert registration_metrics(result.transform, T).success

    def test_deterministic_under_seed(self):
        rng = np.random.default_rng(12)
        T = random_transform(rng)
        corr = oracle_correspondences(T, rng, patches=5, inlier_ratio=0.4, noise=0.05)
        a = ransac_estimate(corr, 300, 0.6, seed=3)
        b = ransac_estimate(corr, 300, 0.6, seed=3)
        assert np.array_equal(a.transform.matrix, b.transform.matrix)
        assert a.provenance == b.provenance

    def test_degenerate_samples_only(self):
        line = np.outer(np.arange(3.0), [1.0, 0.0, 0.0])
        corr = CorrespondenceSet(line, line, np.ones(3), np.zeros(3))
        with pytest.raises(RegistrationFailedError):
            ransac_estimate(corr, 20, 0.6)

    def test_too_few_pairs(self):
        corr = CorrespondenceSet(np.zeros((2, 3)), np.zeros((2, 3)), np.ones(2), np.zeros(2))
        with pytest.raises(ContractError):
            ransac_estimate(corr, 10)


class TestSolverAgreement:
    def test_outlier_free_agreement(self):
        rng = np.random.default_rng(13)
        T = random_transform(rng, max_translation=6.0)
        corr = oracle_correspondences(T, rng, patches=4, inlier_ratio=1.0)
        estimates = [
            weighted_svd(corr.source, corr.target, corr.weights),
            lgr(corr).transform,
            ransac_estimate(corr, 200, seed=2).transform,
        ]
        for est in estimates:
            m = registration_metrics(est, T)
            assert m.rte < 1e-6
            assert np.radians(m.rre) < 1e-6


class TestRegistrationMetrics:
    def test_identical(self):
        T = RigidTransform.from_yaw(0.3, (1.0, 2.0, 3.0))
        m = registration_metrics(T, T)
        assert m.rte == 0.0 and m.rye == 0.0
        assert m.rre == pytest.approx(0.0, abs=1e-5)
        assert m.success

    def test_pure_yaw_error(self):
        m = registration_metrics(RigidTransform.from_yaw(np.radians(10)), RigidTransform.identity())
        assert m.rre == pytest.approx(10.0)
        assert m.rye == pytest.approx(10.0)
        assert not m.success

    def test_yaw_wraps(self):
        est = RigidTransform.from_yaw(np.radians(175))
        gt = RigidTransform.from_yaw(np.radians(-175))
        assert registration_metrics(est, gt).rye == pytest.approx(10.0)

    def test_thresholds_are_configurable(self):
        est = RigidTransform.from_yaw(0.0, (3.0, 0.0, 0.0))
        gt = RigidTransform.identity()
        assert not registration_metrics(est, gt).success
        assert registration_metrics(est, gt, rte_threshold=5.0).success

    def test_rotation_angle_matches_definition(self):
        T = RigidTransform.from_rotvec([0.1, -0.2, 0.3])
        m = registration_metrics(T, RigidTransform.identity())
        assert np.radians(m.rre) == pytest.approx(rotation_angle(T.rotation))


class TestMatchQuality:
    def _scene(self):
        points_a = np.column_stack([np.arange(10.0), np.zeros(10), np.zeros(10)])
        points_b = points_a[:6].copy()
        idx_a = np.array([0, 1, 2, 7, 3])
        idx_b = np.array([0, 1, 3, 5, 3])
        corr = CorrespondenceSet(
            points_a[idx_a], points_b[idx_b], np.ones(5), np.zeros(5), idx_a, idx_b
        )
        return points_a, points_b, corr

    def test_hand_counted_ratios(self):
        points_a, points_b, corr = self._scene()
        overlap = np.array([[0.5, 0.0], [0.0, 0.2], [0.0, 0.0]])
        sparse = SparseMatches(np.array([0, 1, 2]), np.array([0, 0, 1]), np.ones(3))
        report = match_quality(
            corr, sparse, points_a, points_b, RigidTransform.identity(), overlap, 0.6
        )
        assert report.ir == pytest.approx(0.6)
        assert report.mr == pytest.approx(0.5)
        assert report.hr == pytest.approx(4 / 6)
        assert report.pir == pytest.approx(1 / 3)
        assert report.pmr == pytest.approx(0.5)
        assert report.phr == pytest.approx(1.0)
        assert report.undefined == []

    def test_exact_pairs_give_full_inlier_ratio(self):
        T = random_transform(np.random.default_rng(14))
        corr = _exact_set(T, seed=14)
        report = match_quality(corr, None, corr.source, corr.target, T)
        assert report.ir == 1.0
        assert set(report.undefined) == {"pir", "pmr", "phr"}

    def test_zero_denominators_flagged(self):
        corr = CorrespondenceSet(np.zeros((0, 3)), np.zeros((0, 3)), [], [])
        far = np.array([[100.0, 0, 0]])
        report = match_quality(corr, None, np.zeros((1, 3)), far, RigidTransform.identity())
        assert report.ir is None and report.mr is None and report.hr is None
        assert {"ir", "mr", "hr"} <= set(report.undefined)


class TestResultExport:
    def test_one_record_per_pair(self, tmp_path):
        T = random_transform(np.random.default_rng(15))
        result = lgr(_exact_set(T, seed=15))
        path = tmp_path / "results.jsonl"
        for pair in ("a", "b"):
            record = registration_record(
                pair, result, registration_metrics(result.transform, T), config={"seed": 15}
            )
            export_result(path, record)
        records = list(read_jsonl(path))
        assert [r["pair"] for r in records] == ["a", "b"]
        assert records[0]["solver"] == "lgr"
        assert records[0]["metrics"]["success"] is True
        assert records[0]["config"] == {"seed": 15}
