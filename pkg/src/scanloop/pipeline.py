"""Registration network: encoder, rotary attention, votes, matching and pose solving."""

import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from scanloop.backbone.pyramid import (
    FeatureLevel,
    Pyramid,
    decode,
    encode,
    init_backbone,
)
from scanloop.common.config import ScanloopSettings, get_settings
from scanloop.common.exceptions import ContractError
from scanloop.compute.params import ParameterStore
from scanloop.compute.tensor import no_grad
from scanloop.geometry.cloud import PointCloud
from scanloop.matching.assignment import (
    DENSE_DUSTBIN,
    SoftAssignment,
    SparseMatches,
    init_matching,
    match_keypoints,
    topk_sparse,
)
from scanloop.matching.dense import CorrespondenceSet, dense_match
from scanloop.matching.grouping import PatchGrouping, group_patches
from scanloop.registration.solvers import RegistrationResult, lgr, ransac_estimate
from scanloop.retrieval.head import describe_global, init_retrieval
from scanloop.roformer.attention import EnhancedPair, enhance, init_roformer
from scanloop.votes.encoder import VotedKeypoints, init_votes, vote_encode

logger = logging.getLogger(__name__)

SOLVERS = ("lgr", "ransac")


@dataclass(eq=False)
class PairForward:
    """Everything one forward pass over a cloud pair produces."""

    pyramid_a: Pyramid
    pyramid_b: Pyramid
    enhanced: EnhancedPair
    voted_a: VotedKeypoints
    voted_b: VotedKeypoints
    soft: SoftAssignment
    sparse: SparseMatches
    dense_a: FeatureLevel
    dense_b: FeatureLevel
    grouping_a: PatchGrouping
    grouping_b: PatchGrouping


def init_parameters(
    store: ParameterStore, settings: ScanloopSettings, rng: np.random.Generator
) -> ParameterStore:
    """Register every learned tensor of the network in ``store``."""
    coarse = settings.backbone.widths[-1]
    init_backbone(store, settings.backbone, rng)
    init_roformer(store, settings.roformer, coarse, rng)
    init_votes(
        store, coarse, settings.votes.descriptor_dim, settings.backbone.kernel_points, rng
    )
    init_retrieval(store, settings.retrieval, coarse, rng)
    init_matching(store, settings.matching)
    return store


class RegistrationNetwork:
    """The full pair pipeline over one parameter store.

    Satisfies the registrar protocol used by the SLAM harness:
    ``describe(cloud)`` and ``register(cloud_a, cloud_b)``.
    """

    def __init__(
        self,
        settings: ScanloopSettings | None = None,
        store: ParameterStore | None = None,
        seed: int | None = None,
    ):
        self.settings = settings or get_settings()
        if store is None:
            seed = self.settings.training.seed if seed is None else seed
            store = init_parameters(ParameterStore(), self.settings, np.random.default_rng(seed))
        self.store = store

    @classmethod
    def load(cls, path: str | Path, settings: ScanloopSettings | None = None):
        return cls(settings, ParameterStore.load(path))

    def save(self, path: str | Path) -> Path:
        return self.store.save(path)

    # ── Forward ──

    def forward_pair(
        self,
        cloud_a: PointCloud,
        cloud_b: PointCloud,
        iterations: int | None = None,
        use_votes: bool | None = None,
    ) -> PairForward:
        s = self.settings
        iterations = iterations or s.matching.sinkhorn_iterations
        pyr_a = encode(cloud_a, self.store, s.backbone)
        pyr_b = encode(cloud_b, self.store, s.backbone)
        coarse_a, coarse_b = pyr_a.coarsest, pyr_b.coarsest
        enhanced = enhance(
            coarse_a.points,
            coarse_a.descriptors,
            coarse_b.points,
            coarse_b.descriptors,
            self.store,
            s.roformer,
        )
        level_a = FeatureLevel(coarse_a.points, enhanced.features_a, coarse_a.level, coarse_a.cell)
        level_b = FeatureLevel(coarse_b.points, enhanced.features_b, coarse_b.level, coarse_b.cell)
        voted_a = vote_encode(level_a, self.store, s, use_votes)
        voted_b = vote_encode(level_b, self.store, s, use_votes)
        soft = match_keypoints(voted_a.descriptors, voted_b.descriptors, self.store, iterations)
        sparse = topk_sparse(soft, s.matching.num_correspondences)
        dense_a = decode(pyr_a, enhanced.features_a, self.store)
        dense_b = decode(pyr_b, enhanced.features_b, self.store)
        return PairForward(
            pyr_a,
            pyr_b,
            enhanced,
            voted_a,
            voted_b,
            soft,
            sparse,
            dense_a,
            dense_b,
            group_patches(dense_a.points, voted_a.centers),
            group_patches(dense_b.points, voted_b.centers),
        )

    def correspondences(self, fwd: PairForward, iterations: int | None = None) -> CorrespondenceSet:
        s = self.settings.matching
        return dense_match(
            fwd.sparse,
            fwd.grouping_a,
            fwd.grouping_b,
            fwd.dense_a,
            fwd.dense_b,
            self.store[DENSE_DUSTBIN],
            iterations or s.sinkhorn_iterations,
            s.patch_cap,
        )

    def match(
        self, cloud_a: PointCloud, cloud_b: PointCloud, use_votes: bool | None = None
    ) -> tuple[PairForward, CorrespondenceSet]:
        with no_grad():
            fwd = self.forward_pair(cloud_a, cloud_b, use_votes=use_votes)
            return fwd, self.correspondences(fwd)

    # ── Registrar protocol ──

    def register(
        self,
        cloud_a: PointCloud,
        cloud_b: PointCloud,
        solver: str = "lgr",
        use_votes: bool | None = None,
    ) -> RegistrationResult:
        """Pose mapping A into B."""
        if solver not in SOLVERS:
            raise ContractError(f"unknown solver {solver!r}; expected one of {SOLVERS}")
        started = time.perf_counter()
        _, corr = self.match(cloud_a, cloud_b, use_votes)
        reg = self.settings.registration
        if solver == "lgr":
            result = lgr(corr, reg.acceptance_radius, reg.refinements)
        else:
            result = ransac_estimate(
                corr, reg.ransac_iterations, reg.acceptance_radius, seed=reg.ransac_seed
            )
        result.seconds = time.perf_counter() - started
        logger.debug(
            "pair registered",
            extra={
                "fields": {"solver": solver, "pairs": len(corr), "inliers": result.inliers}
            },
        )
        return result

    def describe(self, cloud: PointCloud) -> np.ndarray:
        """Global descriptor (G,) of the coarsest encoder features."""
        with no_grad():
            pyr = encode(cloud, self.store, self.settings.backbone)
            return describe_global(
                pyr.coarsest.descriptors, self.store, self.settings.retrieval
            ).numpy().copy()
