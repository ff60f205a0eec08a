"""Offset voting from uniform keypoints, centroid prediction and descriptor aggregation."""

import logging
from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from scanloop.backbone.kernel import KernelLayout, influence_matrices
from scanloop.backbone.pyramid import FeatureLevel
from scanloop.common.config import ScanloopSettings
from scanloop.common.exceptions import ContractError, DegenerateKeypointsError, DimensionError
from scanloop.compute import ops
from scanloop.compute.params import ParameterStore, he_normal
from scanloop.compute.tensor import Tensor
from scanloop.geometry.neighbors import NeighborIndex

logger = logging.getLogger(__name__)

Params = Mapping[str, Tensor] | ParameterStore


@dataclass(eq=False)
class ProposalSet:
    """S = P^ + dP, with S and dP kept on the tape for the keypoint loss."""

    keypoints: np.ndarray
    offsets: Tensor
    proposals: Tensor

    def __len__(self) -> int:
        return len(self.keypoints)

    @property
    def positions(self) -> np.ndarray:
        return self.proposals.numpy()


@dataclass(eq=False)
class Centroids:
    """Centers found by scanning proposals in index order; ``owner[i]`` labels proposal i."""

    centers: np.ndarray
    owner: np.ndarray

    def __len__(self) -> int:
        return len(self.centers)


@dataclass(eq=False)
class VotedKeypoints:
    centers: np.ndarray
    descriptors: Tensor
    proposals: ProposalSet | None = None
    owner: np.ndarray | None = None

    def __post_init__(self):
        if self.descriptors.ndim != 2 or self.descriptors.shape[0] != len(self.centers):
            raise ContractError(
                f"{len(self.centers)} centers but descriptors {self.descriptors.shape}"
            )

    def __len__(self) -> int:
        return len(self.centers)


def init_votes(
    store: ParameterStore,
    width: int,
    descriptor_dim: int,
    kernel_points: int,
    rng: np.random.Generator,
) -> None:
    """Vote MLP d -> d -> d/2 -> 3 (last layer zero) and the aggregation kernel."""
    half = max(1, width // 2)
    store.add("vote.W1", he_normal(rng, (width, width), width))
    store.add("vote.b1", np.zeros(width))
    store.add("vote.W2", he_normal(rng, (width, half), width))
    store.add("vote.b2", np.zeros(half))
    store.add("vote.W3", np.zeros((half, 3)))
    store.add("vote.b3", np.zeros(3))
    fan_in = kernel_points * width
    store.add("vote.agg.W", he_normal(rng, (kernel_points, width, descriptor_dim), fan_in))


def vote_offsets(
    keypoints: np.ndarray,
    features: Tensor,
    params: Params,
    vote_radius: float,
) -> ProposalSet:
    """dP = r_vote * tanh(MLP(F~)) / sqrt(3), so every offset norm stays within r_vote."""
    keypoints = np.asarray(keypoints, dtype=np.float64).reshape(-1, 3)
    if len(keypoints) < 1:
        raise ContractError("voting needs at least one keypoint")
    if features.ndim != 2 or features.shape[0] != len(keypoints):
        raise DimensionError(f"{len(keypoints)} keypoints but features {features.shape}")
    h = ops.relu(ops.linear(features, params["vote.W1"], params["vote.b1"]))
    h = ops.relu(ops.linear(h, params["vote.W2"], params["vote.b2"]))
    raw = ops.linear(h, params["vote.W3"], params["vote.b3"])
    offsets = ops.scale(ops.tanh(raw), vote_radius / np.sqrt(3.0))
    return ProposalSet(keypoints, offsets, Tensor(keypoints) + offsets)


def predict_centroids(proposals: np.ndarray | ProposalSet, d: float) -> Centroids:
    """Scan proposals in order; each unlabeled one emits the mean of its d-ball in S.

    The ball is searched over the whole proposal set, labeled members included.
    Members already labeled keep their first owner.
    """
    if d <= 0:
        raise ContractError(f"centroid search range must be positive, got {d}")
    S = proposals.positions if isinstance(proposals, ProposalSet) else proposals
    S = np.asarray(S, dtype=np.float64).reshape(-1, 3)
    index = NeighborIndex(S)
    owner = np.full(len(S), -1, dtype=np.int64)
    centers = []
    for i in range(len(S)):
        if owner[i] >= 0:
            continue
        members = index.radius(S[i], d)
        centers.append(S[members].mean(axis=0))
        fresh = members[owner[members] < 0]
        owner[fresh] = len(centers) - 1
    return Centroids(np.asarray(centers).reshape(-1, 3), owner)


def aggregate_descriptors(
    centers: np.ndarray,
    level: FeatureLevel,
    radius: float,
    W: Tensor,
) -> tuple[Tensor, np.ndarray]:
    """KPConv of [P^ | F~] around each center; returns descriptors and the kept center ids.

    Centers with no keypoint within ``radius`` are dropped.
    """
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    layout = KernelLayout.for_support(radius, W.shape[0])
    neighbors = NeighborIndex(level.points).radius_batch(centers, radius)
    kept = np.array([i for i, nb in enumerate(neighbors) if len(nb)], dtype=np.int64)
    if kept.size == 0:
        raise DegenerateKeypointsError(
            f"none of {len(centers)} centers has a keypoint within {radius:.3f} m"
        )
    if kept.size < len(centers):
        logger.warning(
            "dropping neighborless centers",
            extra={"fields": {"dropped": int(len(centers) - kept.size), "kept": int(kept.size)}},
        )
    kept_neighbors = [neighbors[i] for i in kept]
    influences = influence_matrices(centers[kept], level.points, kept_neighbors, layout)
    return ops.kernel_conv(level.descriptors, W, influences), kept


def vote_encode(
    level: FeatureLevel,
    params: Params,
    settings: ScanloopSettings,
    use_votes: bool | None = None,
) -> VotedKeypoints:
    """[S^ | H] from enhanced keypoints; with votes off, [P^ | F~] passes through unchanged."""
    use_votes = settings.votes.enabled if use_votes is None else use_votes
    if not use_votes:
        return VotedKeypoints(level.points, level.descriptors)
    if settings.aggregation_radius <= settings.centroid_radius:
        raise ContractError("aggregation radius must exceed the centroid search range")
    proposals = vote_offsets(level.points, level.descriptors, params, settings.vote_radius)
    clusters = predict_centroids(proposals, settings.centroid_radius)
    H, kept = aggregate_descriptors(
        clusters.centers, level, settings.aggregation_radius, params["vote.agg.W"]
    )
    remap = np.full(len(clusters), -1, dtype=np.int64)
    remap[kept] = np.arange(kept.size)
    return VotedKeypoints(clusters.centers[kept], H, proposals, remap[clusters.owner])
