"""Simulated scenes, KITTI ingestion, experiments and self-checks."""

from scanloop.harness.experiments import (
    ExperimentConfig,
    LadderRow,
    SlamComparison,
    evaluate_pair,
    retrieval_experiment,
    robustness_ladder,
    run_slam,
    slam_comparison,
    summarize_registration,
    training_pairs,
    training_triplets,
    votes_ablation,
)
from scanloop.harness.kitti import KittiSequence, read_kitti_bin, write_kitti_bin
from scanloop.harness.registrar import OracleRegistrar, ring_height_descriptor
from scanloop.harness.scenes import (
    Scan,
    Scene,
    ScenePair,
    ScanSequence,
    SceneSpec,
    generate_scene,
    generate_scene_pair,
    simulate_scan,
    simulate_sequence,
)
from scanloop.harness.selftest import CheckResult, run_selftest

__all__ = [
    "CheckResult",
    "ExperimentConfig",
    "KittiSequence",
    "LadderRow",
    "OracleRegistrar",
    "Scan",
    "ScanSequence",
    "Scene",
    "ScenePair",
    "SceneSpec",
    "SlamComparison",
    "evaluate_pair",
    "generate_scene",
    "generate_scene_pair",
    "read_kitti_bin",
    "retrieval_experiment",
    "ring_height_descriptor",
    "robustness_ladder",
    "run_slam",
    "run_selftest",
    "simulate_scan",
    "simulate_sequence",
    "slam_comparison",
    "summarize_registration",
    "training_pairs",
    "training_triplets",
    "votes_ablation",
    "write_kitti_bin",
]
