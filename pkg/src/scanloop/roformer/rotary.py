"""Rotary position embedding driven by point coordinates."""

from collections.abc import Mapping
from dataclasses import dataclass
from typing import Literal

import numpy as np

from scanloop.common.exceptions import ContractError, DimensionError
from scanloop.compute import ops
from scanloop.compute.params import ParameterStore, he_normal
from scanloop.compute.tensor import Tensor

RotaryMode = Literal["linear", "sigmoid"]

ROTARY_INIT_STD = 0.05  # keeps desk-scale coordinates (tens of meters) mostly inside [-pi, pi]


@dataclass(frozen=True, eq=False)
class RotaryEmbedding:
    """Per-point rotation angles (n x d/2, radians) and the positions they came from."""

    theta: Tensor
    positions: np.ndarray

    def __post_init__(self):
        if self.theta.ndim != 2 or self.theta.shape[0] != len(self.positions):
            raise DimensionError(
                f"theta {self.theta.shape} does not match {len(self.positions)} positions"
            )

    @property
    def width(self) -> int:
        """Feature width d the angles rotate (two channels per angle)."""
        return 2 * self.theta.shape[1]

    def overflow_fraction(self) -> float:
        """Share of angles with |theta| > pi."""
        if self.theta.size == 0:
            return 0.0
        return float(np.mean(np.abs(self.theta.data) > np.pi))


def init_rotary(
    store: ParameterStore,
    width: int,
    rng: np.random.Generator,
    mode: RotaryMode = "linear",
) -> None:
    if width % 2:
        raise ContractError(f"rotary embedding needs an even feature width, got {width}")
    half = width // 2
    if mode == "linear":
        store.add("roformer.rotary.W", rng.normal(0.0, ROTARY_INIT_STD, size=(3, half)))
    else:
        store.add("roformer.rotary.W1", he_normal(rng, (3, width), 3))
        store.add("roformer.rotary.b1", np.zeros(width))
        store.add("roformer.rotary.W2", rng.normal(0.0, ROTARY_INIT_STD, size=(width, half)))
        store.add("roformer.rotary.b2", np.zeros(half))


def rotary_embed(
    positions: np.ndarray,
    params: Mapping[str, Tensor] | ParameterStore,
    mode: RotaryMode = "linear",
) -> RotaryEmbedding:
    """Theta = positions @ W_rot, so theta_j - theta_i depends only on p_j - p_i.

    ``mode="sigmoid"`` is the nonlinear variant 2*pi*sigmoid(MLP(p)), which
    gives up that identity.
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    P = Tensor(positions)
    if mode == "linear":
        theta = P @ params["roformer.rotary.W"]
    elif mode == "sigmoid":
        W1, b1 = params["roformer.rotary.W1"], params["roformer.rotary.b1"]
        W2, b2 = params["roformer.rotary.W2"], params["roformer.rotary.b2"]
        raw = ops.linear(ops.relu(ops.linear(P, W1, b1)), W2, b2)
        theta = ops.scale(ops.sigmoid(raw), 2.0 * np.pi)
    else:
        raise ContractError(f"unknown rotary mode {mode!r}")
    return RotaryEmbedding(theta, positions)


def apply_rotation(theta_row: np.ndarray, vec: np.ndarray) -> np.ndarray:
    """Rotate each channel pair (x_2k, x_2k+1) of ``vec`` by theta_k."""
    theta_row = np.asarray(theta_row, dtype=np.float64).reshape(-1)
    vec = np.asarray(vec, dtype=np.float64).reshape(-1)
    if vec.size % 2 or vec.size != 2 * theta_row.size:
        raise DimensionError(f"cannot rotate {vec.size} channels by {theta_row.size} angles")
    c, s = np.cos(theta_row), np.sin(theta_row)
    x, y = vec[0::2], vec[1::2]
    out = np.empty_like(vec)
    out[0::2] = x * c - y * s
    out[1::2] = x * s + y * c
    return out
