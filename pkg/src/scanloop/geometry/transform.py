"""SE(3) transforms, exponential and logarithm maps.

Twists are ordered rotation first: xi = (omega_x, omega_y, omega_z, v_x, v_y, v_z).
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from scanloop.common.exceptions import ContractError, DegenerateLogError, DimensionError
from scanloop.geometry.cloud import PointCloud

ORTHO_TOL = 1e-9
LOG_SINGULARITY_TOL = 1e-6


def hat(w: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector."""
    return np.array(
        [
            [0.0, -w[2], w[1]],
            [w[2], 0.0, -w[0]],
            [-w[1], w[0], 0.0],
        ]
    )


def project_to_rotation(m: np.ndarray) -> np.ndarray:
    """Nearest proper rotation to a 3x3 matrix."""
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """p' = R p + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise DimensionError(f"rotation {R.shape} / translation {t.shape} are not 3x3 / 3")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ContractError("transform holds non-finite values")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL:
            raise ContractError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ContractError("rotation determinant is not +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "RigidTransform":
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape not in ((4, 4), (3, 4)):
            raise DimensionError(f"expected a 4x4 or 3x4 matrix, got {matrix.shape}")
        return cls(matrix[:3, :3], matrix[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(Rotation.from_rotvec(np.asarray(rotvec, float)).as_matrix(), translation)

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls.from_rotvec([0.0, 0.0, yaw], translation)

    @property
    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: x -> self(other(x))."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    @property
    def yaw(self) -> float:
        """Yaw under the ZYX Euler convention (radians)."""
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))

    @property
    def angle(self) -> float:
        """Geodesic rotation angle (radians)."""
        return rotation_angle(self.rotation)

    def __repr__(self) -> str:
        t = ", ".join(f"{v:.4f}" for v in self.translation)
        return f"RigidTransform(angle={np.degrees(self.angle):.3f} deg, t=({t}))"


def rotation_angle(R: np.ndarray) -> float:
    cos_angle = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.arccos(cos_angle))


def apply_transform(T: RigidTransform, cloud: PointCloud) -> PointCloud:
    if not isinstance(T, RigidTransform):
        raise ContractError("apply_transform needs a RigidTransform")
    return PointCloud(T.apply(cloud.points), cloud.intensity)


def _v_matrix(omega: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    W = hat(omega)
    if theta < 1e-8:
        return np.eye(3) + 0.5 * W + W @ W / 6.0
    a = (1.0 - np.cos(theta)) / theta**2
    b = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + a * W + b * (W @ W)


def se3_exp(xi) -> RigidTransform:
    xi = np.asarray(xi, dtype=np.float64).reshape(-1)
    if xi.shape != (6,):
        raise DimensionError(f"twist must have 6 entries, got {xi.shape}")
    omega, v = xi[:3], xi[3:]
    R = Rotation.from_rotvec(omega).as_matrix()
    return RigidTransform(R, _v_matrix(omega) @ v)


def se3_log(T: RigidTransform) -> np.ndarray:
    omega = Rotation.from_matrix(T.rotation).as_rotvec()
    theta = float(np.linalg.norm(omega))
    if abs(np.pi - theta) < LOG_SINGULARITY_TOL:
        raise DegenerateLogError(f"rotation angle {theta:.9f} rad is within tolerance of pi")
    W = hat(omega)
    if theta < 1e-8:
        V_inv = np.eye(3) - 0.5 * W + W @ W / 12.0
    else:
        coef = (1.0 - theta * np.sin(theta) / (2.0 * (1.0 - np.cos(theta)))) / theta**2
        V_inv = np.eye(3) - 0.5 * W + coef * (W @ W)
    return np.concatenate([omega, V_inv @ T.translation])


def random_transform(
    rng: np.random.Generator,
    max_angle: float = np.pi,
    max_translation: float = 1.0,
    yaw_only: bool = False,
) -> RigidTransform:
    """Uniform axis, angle in [0, max_angle), translation in a ball of radius max_translation."""
    if yaw_only:
        axis = np.array([0.0, 0.0, 1.0])
    else:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
    angle = rng.uniform(-max_angle, max_angle) if yaw_only else rng.uniform(0.0, max_angle)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    t = direction * max_translation * rng.uniform(0.0, 1.0) ** (1.0 / 3.0)
    return RigidTransform.from_rotvec(axis * angle, t)
