"""Scanloop configuration via pydantic-settings.

Values marked "config default" are choices made for desk-scale runs; the
source method leaves them unstated. Every key is documented in
``config/default.yaml``.
"""

import warnings
from contextvars import ContextVar
from functools import lru_cache
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, Field, model_validator
from pydantic_settings import (
    BaseSettings,
    PydanticBaseSettingsSource,
    SettingsConfigDict,
    YamlConfigSettingsSource,
)

_CONFIG_FILE: ContextVar[Path | None] = ContextVar("scanloop_config_file", default=None)


class BackboneSettings(BaseModel):
    cells: list[float] = Field(default_factory=lambda: [0.3, 0.6, 1.2, 2.4])
    widths: list[int] = Field(default_factory=lambda: [32, 64, 128, 256])
    kernel_points: int = Field(default=15, ge=1)
    sigma_factor: float = Field(default=1.5, gt=0)  # sigma = factor * cell
    dense_dim: int = Field(default=32, ge=1)  # decoder output width
    min_coarse_points: int = Field(default=4, ge=1)

    @model_validator(mode="after")
    def _check_levels(self) -> "BackboneSettings":
        if len(self.cells) != len(self.widths) or not self.cells:
            raise ValueError("backbone.cells and backbone.widths need the same non-zero length")
        if any(c <= 0 for c in self.cells):
            raise ValueError("backbone.cells must be positive")
        if any(b <= a for a, b in zip(self.cells, self.cells[1:])):
            raise ValueError("backbone.cells must be strictly increasing")
        return self


class RoformerSettings(BaseModel):
    blocks: int = Field(default=3, ge=1)
    scale_logits: bool = True  # 1/sqrt(d) on attention logits
    rotary_mode: Literal["linear", "sigmoid"] = "linear"
    feedforward_factor: int = Field(default=2, ge=1)


class VoteSettings(BaseModel):
    enabled: bool = True
    vote_radius_factor: float = Field(default=2.0, gt=0)  # r_vote = factor * coarsest cell
    centroid_radius_factor: float = Field(default=0.5, gt=0)  # d = factor * coarsest cell
    aggregation_factor: float = Field(default=2.0, gt=1.0)  # r_agg = factor * d
    descriptor_dim: int = Field(default=128, ge=1)  # keypoint descriptor width


class RetrievalSettings(BaseModel):
    clusters: int = Field(default=32, ge=1)
    descriptor_dim: int = Field(default=256, ge=1)  # global descriptor width
    normalize: bool = False
    partitions: int = Field(default=0, ge=0)  # 0 = plain linear scan


class MatchingSettings(BaseModel):
    sinkhorn_iterations: int = Field(default=100, ge=1)
    train_sinkhorn_iterations: int = Field(default=5, ge=1)
    num_correspondences: int = Field(default=64, ge=1)  # top-k keypoint pairs
    patch_cap: int = Field(default=64, ge=1)
    dustbin_init: float = 1.0


class RegistrationSettings(BaseModel):
    acceptance_radius: float = Field(default=0.6, gt=0)  # LGR inlier radius
    refinements: int = Field(default=5, ge=0)  # LGR refit rounds
    ransac_iterations: int = Field(default=5000, ge=1)
    ransac_seed: int = 0
    rre_threshold_deg: float = Field(default=5.0, gt=0)
    rte_threshold: float = Field(default=2.0, gt=0)
    inlier_threshold: float = Field(default=0.6, gt=0)  # inlier-ratio radius
    overlap_eps: float = Field(default=0.5, gt=0)


class LossSettings(BaseModel):
    dense_tau: float = Field(default=0.45, gt=0)
    gap_margin: float = Field(default=0.5, ge=0)
    triplet_margin: float = Field(default=0.5, ge=0)
    patch_overlap_min: float = Field(default=0.1, gt=0, le=1)
    weights: dict[str, float] = Field(
        default_factory=lambda: {"s1": 1.0, "s2": 1.0, "p": 1.0, "t": 1.0, "c": 1.0, "f": 1.0}
    )


class TrainingSettings(BaseModel):
    learning_rate: float = Field(default=1e-4, gt=0)
    decay: float = Field(default=0.05, ge=0, lt=1)  # rate *= (1 - decay) every decay_every epochs
    decay_every: int = Field(default=4, ge=1)
    epochs: int = Field(default=20, ge=1)
    batch_size: int = Field(default=6, ge=1)  # stage-2 triplets per step
    positives: int = Field(default=6, ge=1)
    negatives: int = Field(default=6, ge=1)
    anchors: int = Field(default=1, ge=1)
    augment_yaw_deg: float = Field(default=10.0, ge=0)
    augment_jitter: float = Field(default=0.01, ge=0)
    seed: int = 0


class SlamSettings(BaseModel):
    lambda_threshold: float = Field(default=30.0, ge=0)
    reliability_threshold: float = Field(default=0.3, ge=0)  # registration reliability gate
    descriptor_threshold: float = Field(default=1.0, gt=0)  # descriptor distance gate
    keyframe_distance: float = Field(default=2.0, gt=0)
    degenerate_period: float = Field(default=3.0, gt=0)  # seconds before a forced keyframe
    loop_exclusion: int = Field(default=100, ge=0)
    local_map_size: int = Field(default=10, ge=1)
    relocalization_hz: float = Field(default=2.5, gt=0)
    loop_closing_hz: float = Field(default=1.0, gt=0)
    odometry_weight: float = Field(default=1.0, gt=0)
    loop_weight: float = Field(default=1.0, gt=0)
    relocalization_weight: float = Field(default=1.0, gt=0)
    icp_iterations: int = Field(default=20, ge=1)
    icp_max_correspondence: float = Field(default=1.0, gt=0)
    icp_crop_radius: float = Field(default=12.0, gt=0)
    map_cell: float = Field(default=0.2, gt=0)  # local map voxel size
    normal_neighbors: int = Field(default=10, ge=3)
    pgo_max_iterations: int = Field(default=50, ge=1)
    pgo_damping: float = Field(default=1e-4, gt=0)


class HarnessSettings(BaseModel):
    data_root: Path = Path("./data")
    output_dir: Path = Path("./runs")
    scan_range: float = Field(default=30.0, gt=0)
    noise_sigma: float = Field(default=0.02, ge=0)


class ScanloopSettings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="SCANLOOP_", env_nested_delimiter="__")

    log_level: str = "INFO"
    data_root: Path | None = None  # SCANLOOP_DATA_ROOT; overrides harness.data_root

    backbone: BackboneSettings = Field(default_factory=BackboneSettings)
    roformer: RoformerSettings = Field(default_factory=RoformerSettings)
    votes: VoteSettings = Field(default_factory=VoteSettings)
    retrieval: RetrievalSettings = Field(default_factory=RetrievalSettings)
    matching: MatchingSettings = Field(default_factory=MatchingSettings)
    registration: RegistrationSettings = Field(default_factory=RegistrationSettings)
    losses: LossSettings = Field(default_factory=LossSettings)
    training: TrainingSettings = Field(default_factory=TrainingSettings)
    slam: SlamSettings = Field(default_factory=SlamSettings)
    harness: HarnessSettings = Field(default_factory=HarnessSettings)

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> tuple[PydanticBaseSettingsSource, ...]:
        # init kwargs > environment > YAML file
        sources: list[PydanticBaseSettingsSource] = [init_settings, env_settings]
        path = _CONFIG_FILE.get()
        if path is not None:
            sources.append(YamlConfigSettingsSource(settings_cls, yaml_file=path))
        return tuple(sources)

    @property
    def resolved_data_root(self) -> Path:
        return self.data_root if self.data_root is not None else self.harness.data_root

    @property
    def coarsest_cell(self) -> float:
        return self.backbone.cells[-1]

    @property
    def vote_radius(self) -> float:
        return self.votes.vote_radius_factor * self.coarsest_cell

    @property
    def centroid_radius(self) -> float:
        return self.votes.centroid_radius_factor * self.coarsest_cell

    @property
    def aggregation_radius(self) -> float:
        return self.votes.aggregation_factor * self.centroid_radius

    def warn_on_desk_limits(self) -> None:
        """Warn when a configuration is likely too heavy for a CPU-only run."""
        if max(self.backbone.widths) > 512 or self.retrieval.descriptor_dim > 1024:
            warnings.warn(
                "Feature widths above 512 or descriptors above 1024 are slow on the numpy engine",
                UserWarning,
                stacklevel=2,
            )


def load_settings(path: str | Path | None = None, **overrides) -> ScanloopSettings:
    """Build settings from an optional YAML file, overlaid by SCANLOOP_* variables."""
    token = _CONFIG_FILE.set(Path(path) if path is not None else None)
    try:
        settings = ScanloopSettings(**overrides)
    finally:
        _CONFIG_FILE.reset(token)
    settings.warn_on_desk_limits()
    return settings


@lru_cache
def get_settings() -> ScanloopSettings:
    return load_settings()
