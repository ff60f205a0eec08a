"""Experiment orchestration and provenance.

Every result record embeds the :class:`ExperimentConfig` it was produced
under, settings included, so a record alone is enough to re-run it.
"""

import logging
import time
from collections.abc import Callable, Iterable, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Literal, Protocol

import numpy as np
from pydantic import BaseModel, Field

from scanloop.common.config import ScanloopSettings, SlamSettings
from scanloop.common.exceptions import ContractError, RegistrationFailedError, ScanloopError
from scanloop.common.jsonl import append_jsonl
from scanloop.geometry.cloud import PointCloud
from scanloop.geometry.transform import RigidTransform, random_transform
from scanloop.harness.registrar import OracleRegistrar
from scanloop.harness.scenes import (
    ScanSequence,
    ScenePair,
    SceneSpec,
    generate_scene,
    generate_scene_pair,
    simulate_sequence,
)
from scanloop.losses.trainer import TripletSample
from scanloop.matching.dense import CorrespondenceSet
from scanloop.matching.grouping import patch_overlap_matrix
from scanloop.registration.metrics import match_quality, registration_metrics
from scanloop.registration.oracle import oracle_correspondences
from scanloop.registration.solvers import RegistrationResult, lgr, ransac_estimate
from scanloop.retrieval.database import DescriptorDatabase
from scanloop.retrieval.metrics import RetrievalReport, retrieval_metrics
from scanloop.slam.events import EventLog
from scanloop.slam.keyframes import KeyframeRecord
from scanloop.slam.registrar import Registrar
from scanloop.slam.system import SlamRun, SlamSystem, SyncScheduler, ThreadedScheduler
from scanloop.slam.trajectory import ape

logger = logging.getLogger(__name__)

Task = Literal["register", "retrieve", "slam", "train", "ladder", "ablation", "eval"]


class ExperimentConfig(BaseModel):
    """Provenance of one experiment run."""

    task: Task
    seed: int = 0
    parameters: dict[str, Any] = Field(default_factory=dict)
    thresholds: dict[str, float] = Field(default_factory=dict)
    output: Path | None = None
    settings: dict[str, Any] = Field(default_factory=dict)

    @classmethod
    def capture(
        cls,
        task: Task,
        settings: ScanloopSettings,
        seed: int = 0,
        output: str | Path | None = None,
        **parameters,
    ) -> "ExperimentConfig":
        reg = settings.registration
        return cls(
            task=task,
            seed=seed,
            parameters=parameters,
            thresholds={
                "rre_deg": reg.rre_threshold_deg,
                "rte": reg.rte_threshold,
                "inlier": reg.inlier_threshold,
                "overlap_eps": reg.overlap_eps,
            },
            output=Path(output) if output is not None else None,
            settings=settings.model_dump(mode="json"),
        )

    def record(self, **fields) -> dict[str, Any]:
        return {**fields, "config": self.model_dump(mode="json")}

    def emit(self, **fields) -> dict[str, Any]:
        """Build the record and append it to ``output`` when one is set."""
        record = self.record(**fields)
        if self.output is not None:
            append_jsonl(self.output, record)
        return record


def solve(corr: CorrespondenceSet, solver: str, settings: ScanloopSettings) -> RegistrationResult:
    reg = settings.registration
    if solver == "lgr":
        return lgr(corr, reg.acceptance_radius, reg.refinements)
    if solver == "ransac":
        return ransac_estimate(
            corr, reg.ransac_iterations, reg.acceptance_radius, seed=reg.ransac_seed
        )
    raise ContractError(f"unknown solver {solver!r}")


def _mean(values: Iterable[float | None]) -> float | None:
    kept = [float(v) for v in values if v is not None]
    return float(np.mean(kept)) if kept else None


# ── Robustness ladder ──


@dataclass
class LadderRow:
    inlier_ratio: float
    solver: str
    trials: int
    registration_recall: float
    mean_rre: float | None
    mean_rte: float | None
    mean_seconds: float
    failures: int

    def as_dict(self) -> dict:
        return asdict(self)


def robustness_ladder(
    settings: ScanloopSettings,
    ratios: Sequence[float] = (0.2, 0.4, 0.6, 0.8, 1.0),
    seeds: int = 50,
    patches: int = 10,
    per_patch: int = 20,
    noise: float = 0.02,
    solvers: Sequence[str] = ("lgr", "ransac"),
) -> list[LadderRow]:
    """LGR against RANSAC on oracle correspondences at controlled inlier ratios."""
    reg = settings.registration
    rows = []
    for ratio in ratios:
        outcomes: dict[str, list] = {solver: [] for solver in solvers}
        for seed in range(seeds):
            rng = np.random.default_rng(seed)
            T = random_transform(rng, max_angle=np.pi / 4, max_translation=10.0)
            corr = oracle_correspondences(T, rng, patches, per_patch, ratio, noise)
            for solver in solvers:
                started = time.perf_counter()
                try:
                    result = solve(corr, solver, settings)
                except RegistrationFailedError:
                    outcomes[solver].append((None, time.perf_counter() - started))
                    continue
                metrics = registration_metrics(
                    result.transform, T, reg.rre_threshold_deg, reg.rte_threshold
                )
                outcomes[solver].append((metrics, time.perf_counter() - started))
        for solver, items in outcomes.items():
            solved = [m for m, _ in items if m is not None]
            rows.append(
                LadderRow(
                    inlier_ratio=float(ratio),
                    solver=solver,
                    trials=len(items),
                    registration_recall=sum(m.success for m in solved) / max(len(items), 1),
                    mean_rre=_mean(m.rre for m in solved),
                    mean_rte=_mean(m.rte for m in solved),
                    mean_seconds=float(np.mean([s for _, s in items])) if items else 0.0,
                    failures=len(items) - len(solved),
                )
            )
    return rows


# ── Registration on scene pairs ──


class PairRegistrar(Protocol):
    settings: ScanloopSettings

    def match(self, cloud_a: PointCloud, cloud_b: PointCloud, use_votes: bool | None = None): ...


@dataclass
class PairEvaluation:
    result: RegistrationResult
    metrics: dict
    quality: dict


def evaluate_pair(
    network: PairRegistrar,
    pair: ScenePair,
    solver: str = "lgr",
    use_votes: bool | None = None,
) -> PairEvaluation:
    """Match, solve and score one scene pair against its ground truth."""
    s = network.settings
    reg = s.registration
    started = time.perf_counter()
    fwd, corr = network.match(pair.cloud_a, pair.cloud_b, use_votes)
    result = solve(corr, solver, s)
    result.seconds = time.perf_counter() - started
    patches = patch_overlap_matrix(
        fwd.grouping_a,
        fwd.dense_a.points,
        fwd.grouping_b,
        fwd.dense_b.points,
        pair.T_gt,
        reg.overlap_eps,
    )
    quality = match_quality(
        corr,
        fwd.sparse,
        fwd.dense_a.points,
        fwd.dense_b.points,
        pair.T_gt,
        patches,
        reg.inlier_threshold,
    )
    metrics = registration_metrics(
        result.transform, pair.T_gt, reg.rre_threshold_deg, reg.rte_threshold
    )
    return PairEvaluation(result, metrics.as_dict(), quality.as_dict())


ABLATION_KEYS = ("ir", "mr", "hr", "pir", "pmr", "phr", "rte", "rre", "success")


@dataclass
class AblationRow:
    variant: str
    pairs: int
    failures: int
    means: dict[str, float | None] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


def votes_ablation(
    network: PairRegistrar,
    spec: SceneSpec,
    seeds: Sequence[int],
    overlap: float = 0.5,
    rotation: float = np.radians(30.0),
    max_range: float = 30.0,
) -> list[AblationRow]:
    """The same pairs matched with voted keypoints and with plain uniform keypoints."""
    variants = {"votes": True, "uniform": False}
    samples: dict[str, list[dict]] = {name: [] for name in variants}
    failures = dict.fromkeys(variants, 0)
    eps = network.settings.registration.overlap_eps
    for seed in seeds:
        pair = generate_scene_pair(
            spec.model_copy(update={"seed": seed}),
            rotation,
            overlap,
            eps=eps,
            max_range=max_range,
        )
        for name, use_votes in variants.items():
            try:
                evaluation = evaluate_pair(network, pair, "lgr", use_votes)
            except ScanloopError as exc:
                failures[name] += 1
                logger.warning(
                    "ablation pair failed",
                    extra={"fields": {"seed": seed, "variant": name, "code": exc.code}},
                )
                continue
            row = {**evaluation.quality, **evaluation.metrics}
            row["success"] = float(row["success"])
            samples[name].append(row)
    return [
        AblationRow(
            name,
            len(items),
            failures[name],
            {key: _mean(item.get(key) for item in items) for key in ABLATION_KEYS},
        )
        for name, items in samples.items()
    ]


def summarize_registration(records: Iterable[dict]) -> dict:
    """RR over all records; RTE/RRE/RYE means over the successful ones."""
    records = list(records)
    successes = [r["metrics"] for r in records if r.get("metrics", {}).get("success")]
    return {
        "pairs": len(records),
        "registration_recall": len(successes) / len(records) if records else None,
        "mean_rte": _mean(m["rte"] for m in successes),
        "mean_rre": _mean(m["rre"] for m in successes),
        "mean_rye": _mean(m["rye"] for m in successes),
    }


# ── Retrieval ──


class Describer(Protocol):
    def describe(self, cloud: PointCloud) -> np.ndarray: ...


@dataclass
class RetrievalRun:
    report: RetrievalReport
    database: int
    queries: int

    def as_dict(self) -> dict:
        return {"database": self.database, "queries": self.queries, **self.report.as_dict()}


def retrieval_experiment(
    describer: Describer,
    sequence: ScanSequence,
    positive_radius: float = 5.0,
    stride: int = 5,
    normalize: bool = False,
    partitions: int = 0,
    database_path: str | Path | None = None,
) -> RetrievalRun:
    """First-lap scans form the database; second-lap scans query it.

    A database entry is a true candidate for a query when the two sensors
    are within ``positive_radius``. AUC and F1max score every
    (query, entry) pair by negated descriptor distance.
    """
    split = sequence.first_revisit()
    if split is None:
        raise ContractError("retrieval needs a sequence that revisits its start")
    positions = sequence.positions()
    db_ids = list(range(0, split, stride))
    query_ids = list(range(split, len(sequence), stride))
    if not db_ids or not query_ids:
        raise ContractError("stride leaves no database entries or no queries")

    first = describer.describe(sequence.scans[db_ids[0]].cloud)
    database = DescriptorDatabase(
        np.asarray(first).size, normalize=normalize, partitions=partitions, path=database_path
    )
    database.add(first)
    for i in db_ids[1:]:
        database.add(describer.describe(sequence.scans[i].cloud))

    scores: list[tuple[float, bool]] = []
    ranks: list[list[bool]] = []
    db_positions = positions[db_ids]
    for q in query_ids:
        hit = database.query(describer.describe(sequence.scans[q].cloud), len(database))
        near = np.linalg.norm(db_positions - positions[q], axis=1) <= positive_radius
        truth = [bool(near[i]) for i in hit.ids]
        ranks.append(truth)
        scores.extend((-float(d), t) for d, t in zip(hit.distances, truth))
    return RetrievalRun(retrieval_metrics(scores, ranks), len(database), len(query_ids))


# ── Training data ──


def training_pairs(
    spec: SceneSpec,
    count: int,
    overlap: float = 0.5,
    rotation: float = np.radians(30.0),
    max_range: float = 30.0,
    eps: float = 0.5,
) -> list[ScenePair]:
    """``count`` pairs, one world per seed starting at ``spec.seed``."""
    return [
        generate_scene_pair(
            spec.model_copy(update={"seed": spec.seed + i}),
            rotation,
            overlap,
            eps=eps,
            max_range=max_range,
        )
        for i in range(count)
    ]


def training_triplets(
    sequence: ScanSequence,
    positives: int,
    negatives: int,
    positive_radius: float = 5.0,
    negative_radius: float = 20.0,
    stride: int = 5,
    seed: int = 0,
) -> list[TripletSample]:
    """Anchors every ``stride`` scans; positives within, negatives beyond the radii."""
    rng = np.random.default_rng(seed)
    positions = sequence.positions()
    samples = []
    for i in range(0, len(sequence), stride):
        gap = np.linalg.norm(positions - positions[i], axis=1)
        near = np.flatnonzero(gap <= positive_radius)
        near = near[near != i]
        far = np.flatnonzero(gap > negative_radius)
        if len(near) < positives or len(far) < negatives:
            continue
        pos = np.sort(rng.choice(near, positives, replace=False))
        neg = np.sort(rng.choice(far, negatives, replace=False))
        samples.append(
            TripletSample(
                sequence.scans[i].cloud,
                [sequence.scans[j].cloud for j in pos],
                [sequence.scans[j].cloud for j in neg],
            )
        )
    return samples


# ── SLAM ──


def run_slam(
    scans: Sequence[tuple[float, PointCloud]],
    registrar: Registrar,
    settings: SlamSettings,
    relocalization: bool = True,
    loop_closing: bool = True,
    threaded: bool = False,
    events_path: str | Path | None = None,
) -> SlamRun:
    system = SlamSystem(registrar, settings, relocalization, loop_closing, EventLog(events_path))
    scheduler = ThreadedScheduler(system) if threaded else SyncScheduler(system)
    return scheduler.run(scans)


def degeneracy_recall(
    keyframes: Sequence[KeyframeRecord],
    reference: Callable[[float], RigidTransform],
    threshold: float = 1.0,
) -> tuple[float | None, int]:
    """Share of keyframes with relative translation error above ``threshold`` flagged degenerated.

    The relative pose runs from the previous keyframe, using tracking
    estimates. Returns (recall or None, number of ground-truth degenerated keyframes).
    """
    flagged = hits = 0
    for prev, cur in zip(keyframes, keyframes[1:]):
        est = prev.pose.inverse() @ cur.pose
        gt = reference(prev.timestamp).inverse() @ reference(cur.timestamp)
        if np.linalg.norm(est.translation - gt.translation) > threshold:
            flagged += 1
            hits += int(cur.degenerated)
    return (hits / flagged if flagged else None), flagged


def exclusion_respected(run: SlamRun, loop_exclusion: int) -> bool:
    window = max(1, loop_exclusion)
    return all(loop.keyframe_id - loop.match_id >= window for loop in run.loops)


SLAM_VARIANTS = {
    "odometry": (False, False),
    "relocalization": (True, False),
    "full": (True, True),
}


@dataclass
class SlamComparison:
    seed: int
    ape: dict[str, dict] = field(default_factory=dict)
    summaries: dict[str, dict] = field(default_factory=dict)
    detector_recall: float | None = None
    gt_degenerated: int = 0
    exclusion_respected: bool = True

    def as_dict(self) -> dict:
        return asdict(self)


def slam_comparison(
    spec: SceneSpec,
    settings: ScanloopSettings,
    seeds: Sequence[int],
    speed: float = 2.0,
    rate: float = 5.0,
    laps: float = 1.2,
    max_range: float = 15.0,
    corridor_factor: float = 0.4,
    gt_threshold: float = 1.0,
    variants: Sequence[str] = tuple(SLAM_VARIANTS),
) -> list[SlamComparison]:
    """Odometry only, plus relocalization, plus loop closing, on the same simulated drive."""
    rows = []
    for seed in seeds:
        scene = generate_scene(spec.model_copy(update={"seed": seed}))
        sequence = simulate_sequence(scene, speed, rate, laps, max_range, corridor_factor)
        reference = sequence.ground_truth()
        by_time = {p.timestamp: p.pose for p in reference}
        row = SlamComparison(seed)
        for name in variants:
            relocalization, loop_closing = SLAM_VARIANTS[name]
            registrar = OracleRegistrar(settings, max_range=max_range, seed=seed)
            run = run_slam(
                registrar.observe_sequence(sequence),
                registrar,
                settings.slam,
                relocalization,
                loop_closing,
            )
            row.ape[name] = ape(run.trajectory, reference).as_dict()
            row.summaries[name] = run.summary()
            row.exclusion_respected &= exclusion_respected(run, settings.slam.loop_exclusion)
            if name == "odometry":
                row.detector_recall, row.gt_degenerated = degeneracy_recall(
                    run.keyframes, by_time.__getitem__, gt_threshold
                )
            logger.info(
                "slam variant finished",
                extra={"fields": {"seed": seed, "variant": name, **row.ape[name]}},
            )
        rows.append(row)
    return rows
