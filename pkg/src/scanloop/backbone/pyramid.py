"""Hierarchical KPConv encoder and skip-connection decoder."""

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from scanloop.backbone.kernel import KernelLayout, influence_matrices
from scanloop.common.config import BackboneSettings
from scanloop.common.exceptions import ContractError, InsufficientStructureError
from scanloop.compute import ops
from scanloop.compute.params import ParameterStore, he_normal
from scanloop.compute.tensor import Tensor
from scanloop.geometry.cloud import PointCloud
from scanloop.geometry.neighbors import NeighborIndex
from scanloop.geometry.sampling import grid_subsample

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class FeatureLevel:
    """Points of one pyramid level and their descriptors, row for row."""

    points: np.ndarray
    descriptors: Tensor
    level: int
    cell: float

    def __post_init__(self):
        if self.descriptors.ndim != 2 or self.descriptors.shape[0] != len(self.points):
            raise ContractError(
                f"level {self.level}: {len(self.points)} points but descriptors "
                f"{self.descriptors.shape}"
            )

    def __len__(self) -> int:
        return len(self.points)

    @property
    def width(self) -> int:
        return self.descriptors.shape[1]


@dataclass(eq=False)
class PyramidStructure:
    """Parameter-free geometry of a pyramid: points, neighbourhoods and pooling maps."""

    points: list[np.ndarray]
    cells: list[float]
    layouts: list[KernelLayout]
    neighbors: list[list[np.ndarray]]
    conv_influences: list[list[sparse.csr_matrix]]
    down_influences: list[list[sparse.csr_matrix] | None]
    parents: list[np.ndarray]

    @property
    def depth(self) -> int:
        return len(self.points)

    def ancestors(self, level: int) -> np.ndarray:
        """Coarsest-level id reached by following parent links from each point of ``level``."""
        ids = np.arange(len(self.points[level]))
        for l in range(level, self.depth - 1):
            ids = self.parents[l][ids]
        return ids


@dataclass(eq=False)
class Pyramid:
    structure: PyramidStructure
    levels: list[FeatureLevel] = field(default_factory=list)

    @property
    def coarsest(self) -> FeatureLevel:
        return self.levels[-1]

    @property
    def parents(self) -> list[np.ndarray]:
        return self.structure.parents


def build_structure(cloud: PointCloud, cfg: BackboneSettings) -> PyramidStructure:
    """Subsample level by level and precompute every neighbourhood the encoder needs."""
    if cloud.is_empty:
        raise ContractError("cannot encode an empty cloud")
    points: list[np.ndarray] = []
    current = cloud
    for cell in cfg.cells:
        current = grid_subsample(current, cell)
        points.append(current.points)
    if len(points[-1]) < cfg.min_coarse_points:
        raise InsufficientStructureError(
            f"{len(points[-1])} points at the coarsest level (cell {cfg.cells[-1]} m), "
            f"need at least {cfg.min_coarse_points}"
        )

    layouts = [KernelLayout.fibonacci(cfg.sigma_factor * c, cfg.kernel_points) for c in cfg.cells]
    neighbors, conv, down, parents = [], [], [], []
    for l, pts in enumerate(points):
        index = NeighborIndex(pts)
        nb = index.radius_batch(pts, layouts[l].support_radius)
        neighbors.append(nb)
        conv.append(influence_matrices(pts, pts, nb, layouts[l]))
        if l == 0:
            down.append(None)
        else:
            finer = points[l - 1]
            nb_down = NeighborIndex(finer).radius_batch(pts, layouts[l].support_radius)
            down.append(influence_matrices(pts, finer, nb_down, layouts[l]))
        if l + 1 < len(points):
            parents.append(NeighborIndex(points[l + 1]).nearest(pts)[0])
    logger.debug("pyramid built", extra={"fields": {"sizes": [len(p) for p in points]}})
    return PyramidStructure(points, list(cfg.cells), layouts, neighbors, conv, down, parents)


def init_backbone(store: ParameterStore, cfg: BackboneSettings, rng: np.random.Generator) -> None:
    K = cfg.kernel_points
    widths = cfg.widths
    d_prev = 1
    for l, w in enumerate(widths):
        if l > 0:
            store.add(f"backbone.level{l}.down.W", he_normal(rng, (K, d_prev, w), K * d_prev))
            d_prev = w
        store.add(f"backbone.level{l}.conv.W", he_normal(rng, (K, d_prev, w), K * d_prev))
        d_prev = w
    for l in range(len(widths) - 2, 0, -1):
        fan_in = widths[l + 1] + widths[l]
        store.add(f"backbone.level{l}.up.W", he_normal(rng, (fan_in, widths[l]), fan_in))
        store.add(f"backbone.level{l}.up.b", np.zeros(widths[l]))
    head_in = widths[1] if len(widths) > 1 else widths[0]
    store.add("backbone.head.W", he_normal(rng, (head_in, cfg.dense_dim), head_in))
    store.add("backbone.head.b", np.zeros(cfg.dense_dim))


def _norm_act(x: Tensor) -> Tensor:
    return ops.relu(ops.layer_norm_rows(x))


def encode(
    cloud: PointCloud,
    store: ParameterStore,
    cfg: BackboneSettings,
    structure: PyramidStructure | None = None,
) -> Pyramid:
    """L levels of grid-subsampled points with KPConv features; the last one is [P^ | F^]."""
    structure = structure if structure is not None else build_structure(cloud, cfg)
    feats = Tensor(np.ones((len(structure.points[0]), 1)))
    levels = []
    for l in range(structure.depth):
        if l > 0:
            W_down = store[f"backbone.level{l}.down.W"]
            feats = _norm_act(ops.kernel_conv(feats, W_down, structure.down_influences[l]))
        W = store[f"backbone.level{l}.conv.W"]
        feats = _norm_act(ops.kernel_conv(feats, W, structure.conv_influences[l]))
        levels.append(FeatureLevel(structure.points[l], feats, l, structure.cells[l]))
    return Pyramid(structure, levels)


def decode(pyr: Pyramid, enhanced: Tensor, store: ParameterStore) -> FeatureLevel:
    """Upsample enhanced coarse features by nearest-parent copy and fuse skips down to level 1."""
    depth = len(pyr.levels)
    if enhanced.ndim != 2 or enhanced.shape[0] != len(pyr.coarsest):
        raise ContractError(
            f"enhanced features {enhanced.shape} do not match {len(pyr.coarsest)} coarse points"
        )
    x = enhanced
    for l in range(depth - 2, 0, -1):
        up = ops.take_rows(x, pyr.parents[l])
        fused = ops.concat([up, pyr.levels[l].descriptors], axis=1)
        W, b = store[f"backbone.level{l}.up.W"], store[f"backbone.level{l}.up.b"]
        x = ops.relu(ops.linear(fused, W, b))
    dense = ops.linear(x, store["backbone.head.W"], store["backbone.head.b"])
    out = 1 if depth > 1 else 0
    return FeatureLevel(pyr.levels[out].points, dense, out, pyr.levels[out].cell)


def level_sizes(pyr: Pyramid | PyramidStructure) -> Sequence[int]:
    structure = pyr.structure if isinstance(pyr, Pyramid) else pyr
    return [len(p) for p in structure.points]
