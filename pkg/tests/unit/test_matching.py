"""Tests for Sinkhorn matching, patch grouping and dense correspondences."""

import logging

import numpy as np
import pytest
from scipy.special import logsumexp

from scanloop.backbone import FeatureLevel
from scanloop.common.config import MatchingSettings
from scanloop.common.exceptions import ContractError, DimensionError, NoMatchesError
from scanloop.compute import ops
from scanloop.compute.gradcheck import finite_diff_check
from scanloop.compute.params import ParameterStore
from scanloop.compute.tensor import Tensor
from scanloop.geometry import RigidTransform
from scanloop.matching import (
    DENSE_DUSTBIN,
    SPARSE_DUSTBIN,
    SparseMatches,
    dense_match,
    group_patches,
    init_matching,
    patch_overlap_matrix,
    read_correspondences_csv,
    score_matrix,
    sinkhorn,
    topk_sparse,
)


def _reference_sinkhorn(scores: np.ndarray, alpha: float, iterations: int) -> np.ndarray:
    m, n = scores.shape
    z = np.full((m + 1, n + 1), alpha)
    z[:m, :n] = scores
    log_mu = np.concatenate([np.zeros(m), [np.log(n)]])[:, None]
    log_nu = np.concatenate([np.zeros(n), [np.log(m)]])[None, :]
    for _ in range(iterations):
        z = z - logsumexp(z, axis=1, keepdims=True) + log_mu
        z = z - logsumexp(z, axis=0, keepdims=True) + log_nu
    return z


def _plain_update_pair(scores: np.ndarray, alpha: float, iterations: int) -> np.ndarray:
    """C' = C - log sum_j exp C, then C - log sum_i exp C', written out per entry."""
    m, n = scores.shape
    z = np.full((m + 1, n + 1), alpha)
    z[:m, :n] = scores
    for _ in range(iterations):
        for i in range(m + 1):
            z[i] = z[i] - np.log(np.sum(np.exp(z[i])))
        for j in range(n + 1):
            z[:, j] = z[:, j] - np.log(np.sum(np.exp(z[:, j])))
    return z


def _level(points, feats) -> FeatureLevel:
    return FeatureLevel(np.asarray(points, dtype=float), Tensor(feats), 1, 0.6)


class TestScoreMatrix:
    def test_zero_right_side(self):
        C = score_matrix(Tensor(np.ones((3, 4))), Tensor(np.zeros((2, 4))))
        assert np.array_equal(C.numpy(), np.zeros((3, 2)))

    def test_against_direct_loop(self):
        rng = np.random.default_rng(0)
        A, B = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
        C = score_matrix(Tensor(A), Tensor(B)).numpy()
        for i in range(3):
            for j in range(5):
                assert abs(C[i, j] - sum(A[i, k] * B[j, k] for k in range(4)) / 2.0) < 1e-12

    def test_swapping_sides_transposes(self):
        rng = np.random.default_rng(1)
        A, B = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(2, 4)))
        assert np.allclose(score_matrix(A, B).numpy(), score_matrix(B, A).numpy().T)

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            score_matrix(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))


class TestSinkhorn:
    def test_dominant_single_entry(self):
        soft = sinkhorn(Tensor([[20.0]]), Tensor(0.0), 100)
        assert soft.assignment()[0, 0] > 0.99

    def test_matches_reference_transcription(self):
        rng = np.random.default_rng(2)
        scores = rng.normal(size=(4, 5))
        soft = sinkhorn(Tensor(scores), Tensor(0.7), 20)
        expected = _reference_sinkhorn(scores, 0.7, 20)
        assert np.allclose(soft.log_assignment.numpy(), expected, atol=1e-9, rtol=0)

    def test_unit_marginals_follow_plain_update_pair(self):
        rng = np.random.default_rng(12)
        scores = rng.normal(size=(4, 5))
        soft = sinkhorn(Tensor(scores), Tensor(0.7), 20, dustbin_mass=False)
        expected = _plain_update_pair(scores, 0.7, 20)
        assert np.allclose(soft.log_assignment.numpy(), expected, atol=1e-9, rtol=0)

    def test_dustbin_mass_departs_from_plain_update_pair(self):
        rng = np.random.default_rng(12)
        scores = rng.normal(size=(4, 5))
        plain = np.exp(_plain_update_pair(scores, 0.7, 50))
        weighted = sinkhorn(Tensor(scores), Tensor(0.7), 50).assignment()
        assert np.allclose(plain.sum(axis=0), 1.0)
        assert np.allclose(weighted.sum(axis=0)[:5], 1.0)
        assert weighted.sum(axis=0)[5] == pytest.approx(4.0)
        assert not np.allclose(plain[:4, :5], weighted[:4, :5], atol=1e-3)

    def test_row_permutation_equivariance(self):
        rng = np.random.default_rng(3)
        scores = rng.normal(size=(5, 6))
        perm = rng.permutation(5)
        base = sinkhorn(Tensor(scores), Tensor(1.0), 30).interior()
        permuted = sinkhorn(Tensor(scores[perm]), Tensor(1.0), 30).interior()
        assert np.allclose(permuted, base[perm], atol=1e-12, rtol=0)

    def test_interior_lines_normalised(self):
        scores = np.random.default_rng(4).normal(scale=0.3, size=(32, 32))
        soft = sinkhorn(Tensor(scores), Tensor(1.0), 100)
        assert soft.row_residual() <= 1e-6
        assert soft.col_residual() <= 1e-6

    def test_residual_shrinks_with_iterations(self):
        scores = Tensor(np.random.default_rng(5).normal(size=(8, 10)))
        residuals = [sinkhorn(scores, Tensor(0.5), t).row_residual() for t in (1, 3, 6)]
        assert all(b <= a for a, b in zip(residuals, residuals[1:]))

    def test_dustbin_parameter_is_shared(self):
        soft = sinkhorn(Tensor(np.zeros((2, 3))), Tensor(0.25), 1)
        raw = soft.raw.numpy()
        assert np.all(raw[2, :] == 0.25) and np.all(raw[:, 3] == 0.25)

    def test_rejects_bad_input(self):
        with pytest.raises(ContractError):
            sinkhorn(Tensor(np.zeros((2, 2))), Tensor(0.0), 0)
        with pytest.raises(ContractError):
            sinkhorn(Tensor(np.zeros((0, 2))), Tensor(0.0), 3)
        with pytest.raises(ContractError):
            sinkhorn(Tensor(np.full((2, 2), np.inf)), Tensor(0.0), 3)

    def test_gradient_through_scores(self):
        rng = np.random.default_rng(6)
        weights = Tensor(rng.normal(size=(4, 5)))

        def f(scores):
            return ops.reduce_sum(sinkhorn(scores, Tensor(0.3), 5).log_assignment * weights)

        assert finite_diff_check(f, Tensor(rng.normal(size=(3, 4)))) < 1e-4

    def test_gradient_through_dustbin(self):
        rng = np.random.default_rng(7)
        scores = Tensor(rng.normal(size=(3, 3)))
        weights = Tensor(rng.normal(size=(4, 4)))

        def f(alpha):
            return ops.reduce_sum(sinkhorn(scores, alpha, 5).log_assignment * weights)

        assert finite_diff_check(f, Tensor(0.4)) < 1e-4

    def test_init_registers_two_dustbins(self):
        store = ParameterStore()
        init_matching(store, MatchingSettings(dustbin_init=0.5))
        assert store[SPARSE_DUSTBIN].item() == 0.5
        assert store[DENSE_DUSTBIN].item() == 0.5


class TestTopkSparse:
    def test_single_dominant_entry(self):
        scores = np.zeros((3, 3))
        scores[1, 2] = 10.0
        out = topk_sparse(sinkhorn(Tensor(scores), Tensor(0.0), 50), 1)
        assert (out.rows.tolist(), out.cols.tolist()) == ([1], [2])

    def test_uniform_matrix_uses_lexicographic_ties(self):
        out = topk_sparse(sinkhorn(Tensor(np.zeros((3, 3))), Tensor(0.0), 10), 3)
        assert list(zip(out.rows.tolist(), out.cols.tolist())) == [(0, 0), (0, 1), (0, 2)]

    def test_against_full_sort(self):
        soft = sinkhorn(Tensor(np.random.default_rng(8).normal(size=(6, 6))), Tensor(1.0), 20)
        z = soft.interior()
        expected = sorted(
            ((i, j) for i in range(6) for j in range(6)), key=lambda p: (-z[p], p[0], p[1])
        )[:8]
        out = topk_sparse(soft, 8)
        assert list(zip(out.rows.tolist(), out.cols.tolist())) == expected
        assert np.allclose(out.scores, [np.exp(z[p]) for p in expected])

    def test_fewer_entries_than_requested(self, caplog):
        with caplog.at_level(logging.INFO, logger="scanloop"):
            out = topk_sparse(sinkhorn(Tensor(np.zeros((2, 2))), Tensor(0.0), 5), 10)
        assert len(out) == 4
        assert out.truncated
        assert "fewer interior entries than requested" in caplog.text

    def test_count_must_be_positive(self):
        with pytest.raises(ContractError):
            topk_sparse(sinkhorn(Tensor(np.zeros((2, 2))), Tensor(0.0), 5), 0)


class TestGroupPatches:
    def test_single_keypoint_owns_everything(self):
        pts = np.random.default_rng(9).normal(size=(40, 3))
        grouping = group_patches(pts, np.zeros((1, 3)))
        assert grouping.members(0).tolist() == list(range(40))

    def test_tie_goes_to_lower_keypoint(self):
        keypoints = np.array(
            [[20.0, 0, 0], [30.0, 0, 0], [1.0, 0, 0], [40.0, 0, 0], [50.0, 0, 0], [-1.0, 0, 0]]
        )
        grouping = group_patches(np.zeros((1, 3)), keypoints)
        assert grouping.assignment.tolist() == [2]

    def test_against_brute_force(self):
        rng = np.random.default_rng(10)
        pts, kps = rng.uniform(0, 10, size=(500, 3)), rng.uniform(0, 10, size=(20, 3))
        grouping = group_patches(pts, kps)
        d = np.linalg.norm(pts[:, None] - kps[None], axis=2)
        assert np.array_equal(grouping.assignment, np.argmin(d, axis=1))
        assert grouping.sizes.sum() == 500
        assert sorted(np.concatenate([grouping.members(i) for i in range(20)])) == list(range(500))

    def test_cap_keeps_closest_members(self):
        pts = np.array([[3.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0], [0.5, 0, 0]])
        grouping = group_patches(pts, np.zeros((1, 3)))
        assert grouping.capped(0, 2).tolist() == [3, 1]

    def test_empty_patches_allowed(self):
        grouping = group_patches(np.zeros((3, 3)), np.array([[0.0, 0, 0], [9.0, 9, 9]]))
        assert grouping.members(1).size == 0

    def test_no_keypoints(self):
        with pytest.raises(ContractError):
            group_patches(np.zeros((3, 3)), np.zeros((0, 3)))


class TestPatchOverlap:
    def test_translated_copy(self):
        pts = np.array([[0.0, 0, 0], [0.2, 0, 0], [10.0, 0, 0], [10.2, 0, 0]])
        kps = np.array([[0.1, 0, 0], [10.1, 0, 0]])
        T = RigidTransform.from_yaw(0.0, (5.0, 1.0, 0.0))
        ga, gb = group_patches(pts, kps), group_patches(T.apply(pts), T.apply(kps))
        overlap = patch_overlap_matrix(ga, pts, gb, T.apply(pts), T, 0.05)
        assert np.array_equal(overlap, np.eye(2))

    def test_partial_overlap_fraction(self):
        pts_a = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0], [3.0, 0, 0]])
        pts_b = np.array([[0.0, 0, 0], [1.0, 0, 0]])
        ga = group_patches(pts_a, np.array([[1.5, 0, 0]]))
        gb = group_patches(pts_b, np.array([[0.5, 0, 0]]))
        overlap = patch_overlap_matrix(ga, pts_a, gb, pts_b, RigidTransform.identity(), 0.1)
        assert overlap[0, 0] == pytest.approx(0.5)


class TestDenseMatch:
    def test_single_strong_pair_deduplicated(self):
        grouping = group_patches(np.zeros((1, 3)), np.zeros((1, 3)))
        level = _level(np.zeros((1, 3)), [[10.0, 0.0]])
        sparse = SparseMatches(np.array([0]), np.array([0]), np.array([0.9]))
        out = dense_match(sparse, grouping, grouping, level, level, Tensor(0.0), 50)
        assert len(out) == 1
        assert (out.idx_a.tolist(), out.idx_b.tolist()) == ([0], [0])
        assert 0.99 < out.weights[0] <= 1.0

    def test_dustbin_row_emits_nothing(self):
        pts_a = np.array([[0.0, 0, 0], [0.1, 0, 0]])
        ga = group_patches(pts_a, np.zeros((1, 3)))
        gb = group_patches(np.zeros((1, 3)), np.zeros((1, 3)))
        level_a = _level(pts_a, [[5.0, 0.0], [-5.0, 0.0]])
        level_b = _level(np.zeros((1, 3)), [[5.0, 0.0]])
        sparse = SparseMatches(np.array([0]), np.array([0]), np.array([1.0]))
        out = dense_match(sparse, ga, gb, level_a, level_b, Tensor(0.0), 50)
        assert out.idx_a.tolist() == [0]

    def test_union_rule_against_enumeration(self):
        rng = np.random.default_rng(11)
        pts_a, pts_b = rng.uniform(0, 4, size=(14, 3)), rng.uniform(0, 4, size=(12, 3))
        kps_a = np.array([[1.0, 1, 1], [3.0, 3, 3]])
        kps_b = np.array([[3.0, 3, 3], [1.0, 1, 1]])
        ga, gb = group_patches(pts_a, kps_a), group_patches(pts_b, kps_b)
        level_a = _level(pts_a, rng.normal(size=(14, 4)) * 3)
        level_b = _level(pts_b, rng.normal(size=(12, 4)) * 3)
        sparse = SparseMatches(np.array([0, 1]), np.array([1, 0]), np.array([0.5, 0.4]))
        out = dense_match(sparse, ga, gb, level_a, level_b, Tensor(0.5), 20)

        expected = {}
        for patch in out.patches:
            z = patch.soft.log_assignment.numpy()
            m, n = len(patch.members_a), len(patch.members_b)
            for i in range(m):
                for j in range(n):
                    row_max = z[i, j] == z[i, : n + 1].max() and np.argmax(z[i, : n + 1]) == j
                    col_max = z[i, j] == z[: m + 1, j].max() and np.argmax(z[: m + 1, j]) == i
                    if row_max or col_max:
                        key = (int(patch.members_a[i]), int(patch.members_b[j]))
                        expected[key] = (np.exp(z[i, j]), patch.patch_id)
        got = {
            (int(a), int(b)): (w, int(p))
            for a, b, w, p in zip(out.idx_a, out.idx_b, out.weights, out.patch_ids)
        }
        assert set(got) == set(expected)
        for key, (w, p) in got.items():
            assert w == pytest.approx(min(1.0, expected[key][0]), abs=1e-15)
            assert p == expected[key][1]
            assert ga.assignment[key[0]] == sparse.rows[p]
            assert gb.assignment[key[1]] == sparse.cols[p]

    def test_everything_in_dustbins(self):
        grouping = group_patches(np.zeros((1, 3)), np.zeros((1, 3)))
        level = _level(np.zeros((1, 3)), [[0.1, 0.0]])
        sparse = SparseMatches(np.array([0]), np.array([0]), np.array([0.1]))
        with pytest.raises(NoMatchesError):
            dense_match(sparse, grouping, grouping, level, level, Tensor(50.0), 50)

    def test_gradient_reaches_dense_features(self):
        rng = np.random.default_rng(12)
        pts = rng.uniform(0, 2, size=(6, 3))
        grouping = group_patches(pts, np.array([[1.0, 1.0, 1.0]]))
        sparse = SparseMatches(np.array([0]), np.array([0]), np.array([1.0]))
        weights = Tensor(rng.normal(size=(7, 7)))
        base = rng.normal(size=(6, 3)) * 3
        feats_b = Tensor(base)

        def f(F):
            out = dense_match(
                sparse, grouping, grouping, _level(pts, F), _level(pts, feats_b), Tensor(0.2), 5
            )
            return ops.reduce_sum(out.patches[0].soft.log_assignment * weights)

        assert finite_diff_check(f, Tensor(base)) < 1e-4

    def test_csv_export_columns(self, tmp_path):
        grouping = group_patches(np.zeros((1, 3)), np.zeros((1, 3)))
        level = _level(np.array([[1.0, 2.0, 3.0]]), [[10.0, 0.0]])
        sparse = SparseMatches(np.array([0]), np.array([0]), np.array([0.9]))
        out = dense_match(sparse, grouping, grouping, level, level, Tensor(0.0), 50)
        path = out.to_csv(tmp_path / "matches.csv")
        assert path.read_text().splitlines()[0] == "patch_id,idx_a,idx_b,weight,xa,ya,za,xb,yb,zb"
        loaded = read_correspondences_csv(path)
        assert np.array_equal(loaded.source, out.source)
        assert np.array_equal(loaded.weights, out.weights)
