"""Scanloop exception hierarchy."""

from typing import Any


class ScanloopError(Exception):
    """Base exception for all Scanloop errors."""

    def __init__(self, message: str = "", code: str = "SCANLOOP_ERROR"):
        self.message = message
        self.code = code
        super().__init__(message)


class DimensionError(ScanloopError):
    """Raised when tensor or array shapes do not conform."""

    def __init__(self, message: str = "Shape mismatch"):
        super().__init__(message, code="DIMENSION_MISMATCH")


class ContractError(ScanloopError):
    """Raised when a precondition of an operation is violated."""

    def __init__(self, message: str = "Contract violated"):
        super().__init__(message, code="CONTRACT_VIOLATION")


class StaleTapeError(ContractError):
    """Raised when backward is replayed on a tape that was already consumed."""

    def __init__(self, message: str = "Tape already consumed; re-run the forward pass"):
        super().__init__(message)
        self.code = "STALE_TAPE"


class NonFiniteError(ContractError):
    """Raised when a tensor would hold NaN or infinite values."""

    def __init__(self, message: str = "Non-finite tensor values"):
        super().__init__(message)
        self.code = "NON_FINITE"


class OracleError(ScanloopError):
    """Raised when a verification oracle cannot produce a trustworthy answer."""

    def __init__(self, message: str = "Oracle check failed"):
        super().__init__(message, code="ORACLE_ERROR")


class DegenerateLogError(ScanloopError):
    """Raised when se3_log is asked for a rotation too close to pi."""

    def __init__(self, message: str = "Rotation angle at the logarithm singularity"):
        super().__init__(message, code="DEGENERATE_LOG")


class InsufficientStructureError(ScanloopError):
    """Raised when a cloud collapses below the minimum coarse-level size."""

    def __init__(self, message: str = "Too few points at the coarsest level"):
        super().__init__(message, code="INSUFFICIENT_STRUCTURE")


class DegenerateKeypointsError(ScanloopError):
    """Raised when every voted center ends up without support neighbors."""

    def __init__(self, message: str = "All voted centers are neighborless"):
        super().__init__(message, code="DEGENERATE_KEYPOINTS")


class DegenerateGeometryError(ScanloopError):
    """Raised when the weighted cross-covariance is rank deficient."""

    def __init__(self, message: str = "Point configuration is degenerate"):
        super().__init__(message, code="DEGENERATE_GEOMETRY")


class NoMatchesError(ScanloopError):
    """Raised when dense matching leaves no correspondence."""

    def __init__(self, message: str = "No dense matches survived dustbin filtering"):
        super().__init__(message, code="NO_MATCHES")


class RegistrationFailedError(ScanloopError):
    """Raised when no pose hypothesis can be solved or verified."""

    def __init__(
        self,
        message: str = "Registration failed",
        diagnostics: dict[str, Any] | None = None,
    ):
        super().__init__(message, code="REGISTRATION_FAILED")
        self.diagnostics = diagnostics or {}


class GroundTruthError(ScanloopError):
    """Raised when a supervision matrix cannot be built consistently."""

    def __init__(self, message: str = "Invalid ground-truth assignment"):
        super().__init__(message, code="GROUND_TRUTH")


class TrainingDivergedError(ScanloopError):
    """Raised when a training loss becomes non-finite."""

    def __init__(
        self,
        message: str = "Training loss is not finite",
        dump: dict[str, Any] | None = None,
    ):
        super().__init__(message, code="TRAINING_DIVERGED")
        self.dump = dump or {}


class RelocalizationFailedError(ScanloopError):
    """Raised when both relocalization attempts fail."""

    def __init__(self, message: str = "Relocalization failed"):
        super().__init__(message, code="RELOCALIZATION_FAILED")


class AssociationError(ScanloopError):
    """Raised when trajectories cannot be associated by timestamp."""

    def __init__(self, message: str = "Trajectory timestamps do not associate"):
        super().__init__(message, code="ASSOCIATION")


class KittiFormatError(ScanloopError):
    """Raised when a KITTI velodyne file is malformed."""

    def __init__(self, message: str = "Malformed KITTI file", offset: int = 0):
        super().__init__(message, code="KITTI_FORMAT")
        self.offset = offset


class SceneGenerationError(ScanloopError):
    """Raised when a synthetic scene cannot meet its requested overlap."""

    def __init__(self, message: str = "Scene generation failed"):
        super().__init__(message, code="SCENE_GENERATION")


class CheckpointError(ScanloopError):
    """Raised when a parameter container cannot be read."""

    def __init__(self, message: str = "Invalid parameter container"):
        super().__init__(message, code="CHECKPOINT")
