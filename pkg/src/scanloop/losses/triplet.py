"""Triplet loss for the global descriptor head."""

from collections.abc import Sequence

import numpy as np

from scanloop.common.exceptions import ContractError, DimensionError
from scanloop.compute import ops
from scanloop.compute.tensor import Tensor, as_tensor

Descriptors = Tensor | np.ndarray | Sequence[Tensor | np.ndarray]


def _stack(name: str, values: Descriptors, width: int) -> Tensor:
    if isinstance(values, (Tensor, np.ndarray)):
        stacked = as_tensor(values)
        if stacked.ndim == 1:
            stacked = ops.reshape(stacked, (1, stacked.shape[0]))
    else:
        if not values:
            raise ContractError(f"triplet loss needs at least one {name} descriptor")
        stacked = ops.concat([ops.reshape(as_tensor(v), (1, width)) for v in values], axis=0)
    if stacked.ndim != 2 or stacked.shape[0] == 0:
        raise ContractError(f"triplet loss needs at least one {name} descriptor")
    if stacked.shape[1] != width:
        raise DimensionError(f"{name} width {stacked.shape[1]} != query width {width}")
    return stacked


def descriptor_distances(query: Tensor, others: Tensor) -> Tensor:
    """Euclidean distance from ``query`` (G,) to every row of ``others``."""
    return ops.row_norms(others - ops.broadcast_rows(query, others.shape[0]))


def triplet_loss(
    query: Tensor,
    positives: Descriptors,
    negatives: Descriptors,
    margin: float = 0.5,
) -> Tensor:
    """N_p * [margin + max_p d(q, p) - mean_n d(q, n)]_+."""
    query = as_tensor(query)
    if query.ndim != 1:
        query = ops.reshape(query, (query.size,))
    width = query.shape[0]
    pos = _stack("positive", positives, width)
    neg = _stack("negative", negatives, width)
    d_pos = ops.reshape(descriptor_distances(query, pos), (1, pos.shape[0]))
    hardest = ops.masked_max_rows(d_pos, np.ones(d_pos.shape, dtype=bool))
    spread = ops.reduce_mean(descriptor_distances(query, neg))
    gap = ops.relu(hardest - spread + margin)
    return ops.scale(ops.reshape(gap, ()), float(pos.shape[0]))
