"""Scanloop: LiDAR registration, place recognition and loop closing."""

from scanloop.common.config import ScanloopSettings, get_settings, load_settings
from scanloop.geometry import PointCloud, RigidTransform
from scanloop.pipeline import RegistrationNetwork

__all__ = [
    "PointCloud",
    "RegistrationNetwork",
    "RigidTransform",
    "ScanloopSettings",
    "get_settings",
    "load_settings",
]
__version__ = "0.1.0"
