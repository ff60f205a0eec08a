"""Oracle checks runnable on a fresh checkout in a few seconds."""

import logging
import tempfile
import time
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from scanloop.common.exceptions import OracleError
from scanloop.compute.gradcheck import finite_diff_check
from scanloop.compute.tensor import Tensor
from scanloop.geometry.cloud import PointCloud
from scanloop.geometry.transform import RigidTransform, random_transform, se3_exp, se3_log
from scanloop.harness.kitti import read_kitti_bin, write_kitti_bin
from scanloop.harness.scenes import SceneSpec, generate_scene_pair
from scanloop.losses.triplet import triplet_loss
from scanloop.matching.assignment import sinkhorn
from scanloop.registration.metrics import registration_metrics
from scanloop.registration.oracle import oracle_correspondences
from scanloop.registration.solvers import lgr, ransac_estimate, weighted_svd
from scanloop.retrieval.metrics import f1_max, roc_auc
from scanloop.roformer.rotary import apply_rotation
from scanloop.slam.graph import Edge, PoseGraph, optimize_pose_graph
from scanloop.votes.encoder import predict_centroids

logger = logging.getLogger(__name__)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float

    def as_dict(self) -> dict:
        return asdict(self)


def _expect(condition: bool, message: str) -> None:
    if not condition:
        raise OracleError(message)


def check_solvers() -> str:
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        T = random_transform(rng, max_translation=6.0)
        corr = oracle_correspondences(T, rng, patches=4, inlier_ratio=1.0)
        for est in (
            weighted_svd(corr.source, corr.target, corr.weights),
            lgr(corr).transform,
            ransac_estimate(corr, 200, seed=seed).transform,
        ):
            m = registration_metrics(est, T)
            worst = max(worst, m.rte, np.radians(m.rre))
    _expect(worst < 1e-6, f"worst pose error {worst:.3e}")
    return f"100 noise-free pairs, worst error {worst:.1e}"


def check_sinkhorn() -> str:
    scores = np.random.default_rng(4).normal(scale=0.3, size=(32, 32))
    soft = sinkhorn(Tensor(scores), Tensor(1.0), 100)
    residual = max(soft.row_residual(), soft.col_residual())
    _expect(residual <= 1e-6, f"normalisation residual {residual:.3e}")
    return f"32x32 residual {residual:.1e}"


def check_rotary() -> str:
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        ti, tj = rng.uniform(-10, 10, size=(2, 4))
        v = rng.normal(size=8)
        relative = apply_rotation(-ti, apply_rotation(tj, v))
        worst = max(worst, float(np.max(np.abs(relative - apply_rotation(tj - ti, v)))))
    _expect(worst < 1e-12, f"relative rotation error {worst:.3e}")
    return f"relative identity within {worst:.1e}"


def _centroids_by_hand(S: np.ndarray, d: float) -> np.ndarray:
    within = cdist(S, S) <= d
    labeled = np.zeros(len(S), dtype=bool)
    centers = []
    for i in range(len(S)):
        if labeled[i]:
            continue
        centers.append(S[within[i]].mean(axis=0))
        labeled |= within[i]
    return np.asarray(centers).reshape(-1, 3)


def check_centroids() -> str:
    for seed in range(50):
        S = np.random.default_rng(seed).uniform(0, 8, size=(80, 3))
        got = predict_centroids(S, 1.0).centers
        _expect(
            np.allclose(got, _centroids_by_hand(S, 1.0), atol=1e-12, rtol=0),
            f"centroid prediction differs for proposal set {seed}",
        )
    return "50 proposal sets"


def check_gradients() -> str:
    rng = np.random.default_rng(2)
    positives, negatives = rng.normal(size=(3, 6)), rng.normal(size=(4, 6)) + 2.0

    def loss(q: Tensor) -> Tensor:
        return triplet_loss(q, positives, negatives, 0.5)

    worst = 0.0
    for k in range(10):
        worst = max(worst, finite_diff_check(loss, Tensor(rng.normal(size=6)), seed=k))
    _expect(worst < 1e-4, f"triplet gradient error {worst:.3e}")
    return f"triplet loss, 10 instances, worst {worst:.1e}"


def check_retrieval_metrics() -> str:
    scores, labels = [0.9, 0.8, 0.7, 0.6], [True, False, True, False]
    auc, f1 = roc_auc(scores, labels), f1_max(scores, labels)
    _expect(auc == 0.75, f"AUC {auc} != 0.75")
    _expect(abs(f1 - 0.8) < 1e-12, f"F1max {f1} != 0.8")
    return "hand-enumerated AUC and F1max"


def check_se3() -> str:
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        T = random_transform(rng, max_angle=np.pi - 0.1, max_translation=5.0)
        worst = max(worst, float(np.max(np.abs(se3_exp(se3_log(T)).matrix - T.matrix))))
    _expect(worst < 1e-9, f"exp(log(T)) error {worst:.3e}")
    return f"exp(log(T)) within {worst:.1e}"


def check_kitti_round_trip() -> str:
    rng = np.random.default_rng(5)
    values = rng.normal(scale=20.0, size=(256, 4)).astype(np.float32).astype(np.float64)
    cloud = PointCloud(values[:, :3], values[:, 3])
    with tempfile.TemporaryDirectory() as tmp:
        back = read_kitti_bin(write_kitti_bin(Path(tmp) / "scan.bin", cloud))
    _expect(np.array_equal(back.points, cloud.points), "points changed in the round trip")
    _expect(np.array_equal(back.intensity, cloud.intensity), "intensity changed")
    return "256 points bit-identical"


def check_scene_labels() -> str:
    spec = SceneSpec(kind="urban-blocks", extent=15.0, ground_density=1.0, seed=3)
    pair = generate_scene_pair(spec, overlap=0.5, max_range=15.0)
    matches = pair.true_matches()
    gap = np.linalg.norm(
        pair.T_gt.apply(pair.cloud_a.points[matches[:, 0]]) - pair.cloud_b.points[matches[:, 1]],
        axis=1,
    )
    _expect(bool(np.all(gap <= 0.5)), f"true match {gap.max():.3f} m apart")
    _expect(
        pair.label_overlap() <= pair.overlap + 1e-12,
        f"label overlap {pair.label_overlap():.3f} exceeds geometric {pair.overlap:.3f}",
    )
    return f"{len(matches)} labelled matches, overlap {pair.overlap:.2f}"


def check_pose_graph() -> str:
    graph = PoseGraph()
    poses = [RigidTransform.from_yaw(0.3 * k, (2.0 * k, 0.5 * k, 0.0)) for k in range(5)]
    for k, pose in enumerate(poses):
        graph.add_node(k, pose)
        if k:
            graph.add_edge(Edge(k - 1, k, poses[k - 1].inverse() @ pose))
    result = optimize_pose_graph(graph)
    worst = max(float(np.max(np.abs(result.poses[k].matrix - poses[k].matrix))) for k in range(5))
    _expect(worst < 1e-6, f"consistent chain moved by {worst:.3e}")
    return f"consistent chain kept within {worst:.1e}"


CHECKS: dict[str, Callable[[], str]] = {
    "solvers": check_solvers,
    "sinkhorn": check_sinkhorn,
    "rotary": check_rotary,
    "centroids": check_centroids,
    "gradients": check_gradients,
    "retrieval-metrics": check_retrieval_metrics,
    "se3": check_se3,
    "kitti": check_kitti_round_trip,
    "scene-labels": check_scene_labels,
    "pose-graph": check_pose_graph,
}


def run_selftest(only: Sequence[str] | None = None) -> list[CheckResult]:
    names = list(CHECKS) if not only else list(only)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise OracleError(f"unknown checks: {', '.join(unknown)}")
    results = []
    for name in names:
        started = time.perf_counter()
        try:
            detail, passed = CHECKS[name](), True
        except Exception as exc:
            detail, passed = f"{type(exc).__name__}: {exc}", False
            logger.error("self-test check failed", extra={"fields": {"check": name}})
        results.append(CheckResult(name, passed, detail, time.perf_counter() - started))
    return results
