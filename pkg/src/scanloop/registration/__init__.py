"""Pose solvers and registration metrics."""

from scanloop.registration.metrics import (
    MatchQualityReport,
    RegistrationMetrics,
    match_quality,
    registration_metrics,
)
from scanloop.registration.oracle import oracle_correspondences
from scanloop.registration.report import export_result, registration_record
from scanloop.registration.solvers import (
    RegistrationResult,
    inlier_mask,
    lgr,
    ransac_estimate,
    weighted_svd,
)

__all__ = [
    "MatchQualityReport",
    "RegistrationMetrics",
    "RegistrationResult",
    "export_result",
    "inlier_mask",
    "lgr",
    "match_quality",
    "oracle_correspondences",
    "ransac_estimate",
    "registration_metrics",
    "registration_record",
    "weighted_svd",
]
