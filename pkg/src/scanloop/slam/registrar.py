"""What the SLAM back end needs from a registration pipeline."""

from typing import Protocol, runtime_checkable

import numpy as np

from scanloop.geometry.cloud import PointCloud
from scanloop.registration.solvers import RegistrationResult


@runtime_checkable
class Registrar(Protocol):
    def describe(self, cloud: PointCloud) -> np.ndarray:
        """Global descriptor of one scan."""
        ...

    def register(self, cloud_a: PointCloud, cloud_b: PointCloud) -> RegistrationResult:
        """Pose mapping ``cloud_a`` into ``cloud_b``, with its reliability score."""
        ...
