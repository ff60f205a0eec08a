"""Keypoint detection and rotary boundary losses."""

from collections.abc import Sequence

import numpy as np

from scanloop.common.exceptions import ContractError
from scanloop.compute import ops
from scanloop.compute.tensor import Tensor
from scanloop.geometry.neighbors import NeighborIndex
from scanloop.geometry.transform import RigidTransform


def _nearest_sq_sum(queries: Tensor, support: Tensor) -> Tensor:
    """sum_i min_j |q_i - s_j|^2; the argmin is chosen on values, the distance is differentiable."""
    nn, _ = NeighborIndex(support.numpy()).nearest(queries.numpy())
    return ops.reduce_sum(ops.square(queries - ops.take_rows(support, nn)))


def _check(name: str, proposals: Tensor) -> None:
    if proposals.ndim != 2 or proposals.shape[1] != 3 or proposals.shape[0] == 0:
        raise ContractError(f"{name} must be a non-empty (n, 3) array, got {proposals.shape}")


def keypoint_loss(
    S_a: Tensor,
    S_b: Tensor,
    P_a: np.ndarray,
    P_b: np.ndarray,
    T_gt: RigidTransform,
) -> tuple[Tensor, Tensor]:
    """(L_s1, L_s2).

    L_s1 pulls A's proposals, moved into frame B by ``T_gt``, and B's
    proposals onto each other; L_s2 pulls every proposal onto its own raw
    cloud. Both are sums of squared nearest distances in both directions.
    """
    _check("S_a", S_a)
    _check("S_b", S_b)
    if len(P_a) == 0 or len(P_b) == 0:
        raise ContractError("raw clouds must be non-empty")
    aligned = S_a @ Tensor(T_gt.rotation.T) + Tensor(T_gt.translation)
    L_s1 = _nearest_sq_sum(aligned, S_b) + _nearest_sq_sum(S_b, aligned)
    L_s2 = _nearest_sq_sum(S_a, Tensor(P_a)) + _nearest_sq_sum(S_b, Tensor(P_b))
    return L_s1, L_s2


def boundary_penalty(thetas: Sequence[Tensor] | Tensor) -> Tensor:
    """Mean of [|theta| - pi]_+ over every entry of every tensor."""
    if isinstance(thetas, Tensor):
        thetas = [thetas]
    count = sum(t.size for t in thetas)
    if count == 0:
        raise ContractError("boundary penalty over no entries")
    total = Tensor(0.0)
    for theta in thetas:
        total = total + ops.reduce_sum(ops.relu(ops.abs_(theta) - np.pi))
    return ops.scale(total, 1.0 / count)
