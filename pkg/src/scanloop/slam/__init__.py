"""Keyframe SLAM harness: tracking, relocalization, loop closing and evaluation."""

from scanloop.slam.events import EventLog
from scanloop.slam.graph import Edge, PGOResult, PoseGraph, optimize_pose_graph
from scanloop.slam.keyframes import (
    KeyframeDatabase,
    KeyframeDecision,
    KeyframeRecord,
    KeyframeSelector,
)
from scanloop.slam.loop_closing import LoopCloser, LoopClosure
from scanloop.slam.registrar import Registrar
from scanloop.slam.relocalization import RelocalizationOutcome, Relocalizer
from scanloop.slam.system import SlamRun, SlamSystem, SyncScheduler, ThreadedScheduler
from scanloop.slam.tracking import (
    IcpResult,
    Tracker,
    TrackerState,
    TrackResult,
    point_to_plane_icp,
)
from scanloop.slam.trajectory import (
    APEReport,
    StampedPose,
    ape,
    associate,
    read_kitti_poses,
    read_tum,
    write_kitti_poses,
    write_tum,
)

__all__ = [
    "APEReport",
    "Edge",
    "EventLog",
    "IcpResult",
    "KeyframeDatabase",
    "KeyframeDecision",
    "KeyframeRecord",
    "KeyframeSelector",
    "LoopCloser",
    "LoopClosure",
    "PGOResult",
    "PoseGraph",
    "Registrar",
    "RelocalizationOutcome",
    "Relocalizer",
    "SlamRun",
    "SlamSystem",
    "StampedPose",
    "SyncScheduler",
    "ThreadedScheduler",
    "TrackResult",
    "Tracker",
    "TrackerState",
    "ape",
    "associate",
    "optimize_pose_graph",
    "point_to_plane_icp",
    "read_kitti_poses",
    "read_tum",
    "write_kitti_poses",
    "write_tum",
]
