"""VoteEncoder: salient keypoints from enhanced uniform features."""

from scanloop.votes.encoder import (
    Centroids,
    ProposalSet,
    VotedKeypoints,
    aggregate_descriptors,
    init_votes,
    predict_centroids,
    vote_encode,
    vote_offsets,
)

__all__ = [
    "Centroids",
    "ProposalSet",
    "VotedKeypoints",
    "aggregate_descriptors",
    "init_votes",
    "predict_centroids",
    "vote_encode",
    "vote_offsets",
]
