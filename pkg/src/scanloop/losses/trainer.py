"""Two-stage semi-online training at toy scale.

Stage 1 trains the whole network on cloud pairs with the keypoint,
boundary, sparse and dense losses. Stage 2 loads a stage-1 checkpoint,
freezes everything but the retrieval head, and trains it with the triplet
loss on precomputed positive/negative features and online anchors.
"""

import csv
import json
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Protocol

import numpy as np

from scanloop.backbone.pyramid import encode
from scanloop.common.config import ScanloopSettings
from scanloop.common.exceptions import (
    CheckpointError,
    ContractError,
    DegenerateKeypointsError,
    InsufficientStructureError,
    NonFiniteError,
    TrainingDivergedError,
)
from scanloop.compute import ops
from scanloop.compute.optim import Adam, step_decay
from scanloop.compute.params import ParameterStore
from scanloop.compute.tensor import Tensor, backward, fresh_tape, no_grad
from scanloop.geometry.cloud import PointCloud
from scanloop.geometry.transform import RigidTransform
from scanloop.losses.gap import dense_gap_loss, sparse_ground_truth, sparse_gap_loss
from scanloop.losses.keypoint import boundary_penalty, keypoint_loss
from scanloop.losses.report import TERMS, LossReport
from scanloop.losses.triplet import descriptor_distances, triplet_loss
from scanloop.matching.assignment import DENSE_DUSTBIN, SparseMatches
from scanloop.matching.dense import patch_assignments
from scanloop.matching.grouping import patch_overlap_matrix
from scanloop.pipeline import PairForward, RegistrationNetwork
from scanloop.retrieval.head import HEAD_PREFIX, describe_global

logger = logging.getLogger(__name__)

CURVE_HEADER = ["stage", "epoch", "lr", "steps", "skipped", "total", *TERMS, "overflow"]


class PairSample(Protocol):
    cloud_a: PointCloud
    cloud_b: PointCloud
    T_gt: RigidTransform  # maps A into B


@dataclass
class TrainingPair:
    cloud_a: PointCloud
    cloud_b: PointCloud
    T_gt: RigidTransform


@dataclass
class TripletSample:
    anchor: PointCloud
    positives: list[PointCloud]
    negatives: list[PointCloud]


@dataclass
class EpochRecord:
    stage: int
    epoch: int
    lr: float
    steps: int
    skipped: int
    total: float
    terms: dict[str, float] = field(default_factory=dict)
    overflow: float | None = None  # share of rotary angles beyond pi

    def row(self) -> list:
        values = [self.terms.get(t, "") for t in TERMS]
        overflow = "" if self.overflow is None else self.overflow
        head = [self.stage, self.epoch, self.lr, self.steps, self.skipped, self.total]
        return [*head, *values, overflow]


@dataclass
class TrainingRun:
    stage: int
    curves: list[EpochRecord] = field(default_factory=list)
    checkpoint: Path | None = None
    metrics: dict[str, float] = field(default_factory=dict)

    @property
    def losses(self) -> list[float]:
        return [r.total for r in self.curves]

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(CURVE_HEADER)
            for record in self.curves:
                writer.writerow(record.row())
        return path


def augment(
    cloud: PointCloud,
    rng: np.random.Generator,
    yaw_deg: float,
    jitter: float,
) -> tuple[PointCloud, RigidTransform]:
    """Random yaw about the origin plus Gaussian jitter; returns the cloud and the yaw applied."""
    yaw = np.radians(rng.uniform(-yaw_deg, yaw_deg)) if yaw_deg > 0 else 0.0
    T = RigidTransform.from_yaw(yaw)
    points = T.apply(cloud.points)
    if jitter > 0:
        points = points + rng.normal(0.0, jitter, size=points.shape)
    return PointCloud(points, cloud.intensity), T


def augment_pair(
    pair: PairSample, rng: np.random.Generator, yaw_deg: float, jitter: float
) -> TrainingPair:
    cloud_a, Ta = augment(pair.cloud_a, rng, yaw_deg, jitter)
    cloud_b, Tb = augment(pair.cloud_b, rng, yaw_deg, jitter)
    return TrainingPair(cloud_a, cloud_b, Tb @ pair.T_gt @ Ta.inverse())


class Trainer:
    """Runs the two training stages on one network, checkpointing into ``output_dir``."""

    def __init__(
        self,
        network: RegistrationNetwork,
        output_dir: str | Path | None = None,
    ):
        self.network = network
        self.settings: ScanloopSettings = network.settings
        self.output_dir = Path(output_dir) if output_dir is not None else None
        self.rng = np.random.default_rng(self.settings.training.seed)

    @property
    def store(self) -> ParameterStore:
        return self.network.store

    # ── Stage 1 ──

    def pair_losses(self, pair: PairSample) -> tuple[LossReport, PairForward]:
        """All stage-1 terms for one pair; L_f is left out when no patch pair overlaps."""
        s = self.settings
        iterations = s.matching.train_sinkhorn_iterations
        fwd = self.network.forward_pair(pair.cloud_a, pair.cloud_b, iterations=iterations)
        report = LossReport()

        if fwd.voted_a.proposals is not None and fwd.voted_b.proposals is not None:
            report.s1, report.s2 = keypoint_loss(
                fwd.voted_a.proposals.proposals,
                fwd.voted_b.proposals.proposals,
                pair.cloud_a.points,
                pair.cloud_b.points,
                pair.T_gt,
            )
        thetas = [fwd.enhanced.embedding_a.theta, fwd.enhanced.embedding_b.theta]
        report.p = boundary_penalty(thetas)

        overlap = patch_overlap_matrix(
            fwd.grouping_a,
            fwd.dense_a.points,
            fwd.grouping_b,
            fwd.dense_b.points,
            pair.T_gt,
            s.registration.overlap_eps,
        )
        targets = sparse_ground_truth(overlap, s.losses.patch_overlap_min)
        report.c = sparse_gap_loss(fwd.soft, targets, s.losses.gap_margin)

        rows, cols = np.nonzero(overlap >= s.losses.patch_overlap_min)
        if rows.size:
            gt_pairs = SparseMatches(rows, cols, overlap[rows, cols])
            patches = patch_assignments(
                gt_pairs,
                fwd.grouping_a,
                fwd.grouping_b,
                fwd.dense_a,
                fwd.dense_b,
                self.store[DENSE_DUSTBIN],
                iterations,
                s.matching.patch_cap,
            )
            if patches:
                report.f = dense_gap_loss(
                    patches,
                    fwd.dense_a.points,
                    fwd.dense_b.points,
                    pair.T_gt,
                    s.losses.dense_tau,
                    s.losses.gap_margin,
                )
        if report.f is None:
            logger.debug("no overlapping patch pair; dense loss skipped")
        return report, fwd

    def run_stage1(
        self, pairs: Sequence[PairSample], epochs: int | None = None
    ) -> TrainingRun:
        if not pairs:
            raise ContractError("stage 1 needs at least one training pair")
        t = self.settings.training
        weights = self.settings.losses.weights
        epochs = epochs or t.epochs
        self.store.unfreeze_all()
        optimizer = Adam(self.store, lr=t.learning_rate)
        run = TrainingRun(stage=1)

        for epoch in range(epochs):
            optimizer.lr = step_decay(t.learning_rate, epoch, t.decay, t.decay_every)
            totals: list[float] = []
            terms: dict[str, list[float]] = {}
            overflow: list[float] = []
            skipped = 0
            for step, index in enumerate(self.rng.permutation(len(pairs))):
                pair = augment_pair(pairs[index], self.rng, t.augment_yaw_deg, t.augment_jitter)
                context = {"stage": 1, "epoch": epoch, "step": step, "pair": int(index)}
                try:
                    with fresh_tape():
                        report, fwd = self.pair_losses(pair)
                        total = self._checked_total(report, weights, context, optimizer)
                        backward(total)
                except NonFiniteError as exc:
                    raise self._diverged(exc.message, context, optimizer, {}) from exc
                except (DegenerateKeypointsError, InsufficientStructureError) as exc:
                    logger.warning(
                        "skipping training pair",
                        extra={"fields": {**context, "code": exc.code}},
                    )
                    skipped += 1
                    continue
                self._apply(optimizer, context)
                totals.append(total.item())
                for name, value in report.as_dict().items():
                    terms.setdefault(name, []).append(value)
                overflow.append(
                    0.5 * fwd.enhanced.embedding_a.overflow_fraction()
                    + 0.5 * fwd.enhanced.embedding_b.overflow_fraction()
                )
            record = self._record(1, epoch, optimizer.lr, totals, terms, skipped, overflow)
            run.curves.append(record)

        run.metrics = self._summary(run)
        run.checkpoint = self._save(run, "stage1")
        return run

    # ── Stage 2 ──

    def _coarse_features(self, cloud: PointCloud) -> Tensor:
        with no_grad():
            pyr = encode(cloud, self.store, self.settings.backbone)
        return pyr.coarsest.descriptors.detach()

    def triplet_losses(
        self, sample: TripletSample, cache: dict[int, Tensor]
    ) -> LossReport:
        """L_t for one anchor; positive and negative features come from ``cache``."""
        t = self.settings.training
        anchor, _ = augment(sample.anchor, self.rng, t.augment_yaw_deg, t.augment_jitter)
        cfg = self.settings.retrieval
        query = describe_global(self._coarse_features(anchor), self.store, cfg)
        positives = self._described(sample.positives[: t.positives], cache)
        negatives = self._described(sample.negatives[: t.negatives], cache)
        return LossReport(
            t=triplet_loss(query, positives, negatives, self.settings.losses.triplet_margin)
        )

    def _cached(self, cache: dict[int, Tensor], cloud: PointCloud) -> Tensor:
        key = id(cloud)
        if key not in cache:
            cache[key] = self._coarse_features(cloud)
        return cache[key]

    def _described(self, clouds: Sequence[PointCloud], cache: dict[int, Tensor]) -> Tensor:
        """Global descriptors of cached clouds, one row each."""
        cfg = self.settings.retrieval
        rows = [describe_global(self._cached(cache, c), self.store, cfg) for c in clouds]
        return ops.concat([ops.reshape(r, (1, r.shape[0])) for r in rows], axis=0)

    def run_stage2(
        self, samples: Sequence[TripletSample], epochs: int | None = None
    ) -> TrainingRun:
        if not samples:
            raise ContractError("stage 2 needs at least one triplet sample")
        for sample in samples:
            if not sample.positives or not sample.negatives:
                raise ContractError("every triplet sample needs a positive and a negative")
        t = self.settings.training
        weights = self.settings.losses.weights
        epochs = epochs or t.epochs
        self.store.freeze_all_except([HEAD_PREFIX])
        optimizer = Adam(self.store, lr=t.learning_rate)
        cache: dict[int, Tensor] = {}
        for sample in samples:
            for cloud in (*sample.positives[: t.positives], *sample.negatives[: t.negatives]):
                self._cached(cache, cloud)
        run = TrainingRun(stage=2)

        for epoch in range(epochs):
            optimizer.lr = step_decay(t.learning_rate, epoch, t.decay, t.decay_every)
            order = self.rng.permutation(len(samples))
            totals: list[float] = []
            for start in range(0, len(order), t.batch_size):
                batch = order[start : start + t.batch_size]
                context = {"stage": 2, "epoch": epoch, "batch": start // t.batch_size}
                batch_total = 0.0
                for index in batch:
                    try:
                        with fresh_tape():
                            report = self.triplet_losses(samples[index], cache)
                            total = self._checked_total(report, weights, context, optimizer)
                            backward(ops.scale(total, 1.0 / len(batch)))
                    except NonFiniteError as exc:
                        raise self._diverged(exc.message, context, optimizer, {}) from exc
                    batch_total += total.item()
                self._apply(optimizer, context)
                totals.append(batch_total / len(batch))
            run.curves.append(self._record(2, epoch, optimizer.lr, totals, {"t": totals}, 0, []))

        run.metrics = self._summary(run)
        run.metrics["triplet_accuracy"] = self.triplet_accuracy(samples, cache)
        run.checkpoint = self._save(run, "stage2")
        return run

    def triplet_accuracy(
        self, samples: Sequence[TripletSample], cache: dict[int, Tensor]
    ) -> float:
        """Share of anchors whose farthest positive is closer than their nearest negative."""
        cfg = self.settings.retrieval
        hits = 0
        with no_grad():
            for sample in samples:
                q = describe_global(self._coarse_features(sample.anchor), self.store, cfg)
                d_pos = descriptor_distances(q, self._described(sample.positives, cache))
                d_neg = descriptor_distances(q, self._described(sample.negatives, cache))
                hits += int(d_pos.numpy().max() < d_neg.numpy().min())
        return hits / len(samples)

    # ── Shared plumbing ──

    def _checked_total(
        self,
        report: LossReport,
        weights: dict[str, float],
        context: dict,
        optimizer: Adam,
    ) -> Tensor:
        try:
            report.check_finite()
            return report.total(weights)
        except TrainingDivergedError as exc:
            raise self._diverged(str(exc), context, optimizer, exc.dump) from exc

    def _apply(self, optimizer: Adam, context: dict) -> None:
        norm = self.store.grad_norm()
        if not np.isfinite(norm):
            raise self._diverged("gradient is not finite", context, optimizer, {})
        try:
            optimizer.step()
        except NonFiniteError as exc:
            raise self._diverged(exc.message, context, optimizer, {"grad_norm": norm}) from exc
        finally:
            self.store.zero_grad()

    def _diverged(
        self, message: str, context: dict, optimizer: Adam, terms: dict
    ) -> TrainingDivergedError:
        dump = {**context, "lr": optimizer.lr, "optimizer_steps": optimizer.steps, "terms": terms}
        if self.output_dir is not None:
            self.output_dir.mkdir(parents=True, exist_ok=True)
            path = self.output_dir / "divergence.json"
            path.write_text(json.dumps(dump, indent=2, default=str), encoding="utf-8")
            dump["path"] = str(path)
        logger.error("training diverged", extra={"fields": dump})
        return TrainingDivergedError(message, dump=dump)

    def _record(
        self,
        stage: int,
        epoch: int,
        lr: float,
        totals: list[float],
        terms: dict[str, list[float]],
        skipped: int,
        overflow: list[float],
    ) -> EpochRecord:
        if not totals:
            raise TrainingDivergedError(
                f"stage {stage} epoch {epoch}: every sample was skipped",
                dump={"stage": stage, "epoch": epoch, "skipped": skipped},
            )
        record = EpochRecord(
            stage=stage,
            epoch=epoch,
            lr=lr,
            steps=len(totals),
            skipped=skipped,
            total=float(np.mean(totals)),
            terms={k: float(np.mean(v)) for k, v in terms.items() if k in TERMS},
            overflow=float(np.mean(overflow)) if overflow else None,
        )
        logger.info(
            "epoch finished",
            extra={"fields": {"stage": stage, "epoch": epoch, "loss": record.total, "lr": lr}},
        )
        return record

    def _summary(self, run: TrainingRun) -> dict[str, float]:
        first, last = run.losses[0], run.losses[-1]
        reduction = 1.0 - last / first if first > 0 else 0.0
        return {"initial_loss": first, "final_loss": last, "reduction": reduction}

    def _save(self, run: TrainingRun, name: str) -> Path | None:
        if self.output_dir is None:
            return None
        run.to_csv(self.output_dir / f"{name}_curves.csv")
        return self.network.save(self.output_dir / f"{name}.ckpt")


def train_toy(
    dataset: Sequence[PairSample] | Sequence[TripletSample],
    stage: Literal[1, 2],
    settings: ScanloopSettings,
    checkpoint: str | Path | None = None,
    output_dir: str | Path | None = None,
    epochs: int | None = None,
) -> TrainingRun:
    """Run one training stage and return its curves, metrics and checkpoint path."""
    if stage == 1:
        network = (
            RegistrationNetwork.load(checkpoint, settings)
            if checkpoint is not None
            else RegistrationNetwork(settings)
        )
        return Trainer(network, output_dir).run_stage1(dataset, epochs)
    if stage == 2:
        if checkpoint is None:
            raise CheckpointError("stage 2 starts from a stage-1 checkpoint")
        network = RegistrationNetwork.load(checkpoint, settings)
        return Trainer(network, output_dir).run_stage2(dataset, epochs)
    raise ContractError(f"unknown training stage {stage!r}")
