"""Coarse differentiable primitives.

Each op computes its forward result with numpy/scipy and records a single tape
node whose closure returns the gradients of its inputs.
"""

from collections.abc import Sequence

import numpy as np
from scipy import sparse, special

from scanloop.common.exceptions import ContractError, DimensionError
from scanloop.compute.tensor import Tensor, as_tensor, make_result, unbroadcast


def _require_matrix(x: Tensor, op: str) -> None:
    if x.ndim != 2:
        raise DimensionError(f"{op} needs a matrix, got shape {x.shape}")


# ── Affine ──


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """y = xW + b."""
    _require_matrix(x, "linear")
    if W.ndim != 2 or x.shape[1] != W.shape[0]:
        raise DimensionError(f"linear: x {x.shape} does not conform with W {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} does not match output width {W.shape[1]}")
    out = x.data @ W.data
    if b is None:
        return make_result(out, (x, W), lambda g: (g @ W.data.T, x.data.T @ g))
    return make_result(
        out + b.data,
        (x, W, b),
        lambda g: (g @ W.data.T, x.data.T @ g, g.sum(axis=0)),
    )


def scale(x: Tensor, c: float) -> Tensor:
    return make_result(x.data * c, (x,), lambda g: (g * c,))


# ── Elementwise ──


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    y = special.expit(x.data)
    return make_result(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make_result(y, (x,), lambda g: (g * (1.0 - y * y),))


def abs_(x: Tensor) -> Tensor:
    return make_result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return make_result(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ContractError("log of a non-positive value")
    return make_result(np.log(x.data), (x,), lambda g: (g / x.data,))


def square(x: Tensor) -> Tensor:
    return make_result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def cos(x: Tensor) -> Tensor:
    return make_result(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),))


def sin(x: Tensor) -> Tensor:
    return make_result(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),))


# ── Reductions ──


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        return make_result(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))
    out = x.data.sum(axis=axis)
    return make_result(
        out,
        (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),),
    )


def reduce_mean(x: Tensor, axis: int | None = None) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    if count == 0:
        raise ContractError("mean over an empty axis")
    return scale(reduce_sum(x, axis), 1.0 / count)


def masked_max_rows(x: Tensor, mask: np.ndarray) -> Tensor:
    """Per-row maximum over entries where mask is true; gradient goes to the first argmax."""
    _require_matrix(x, "masked_max_rows")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise DimensionError(f"mask {mask.shape} does not match {x.shape}")
    if not np.all(mask.any(axis=1)):
        raise ContractError("masked_max_rows: a row has no selectable entry")
    filled = np.where(mask, x.data, -np.inf)
    cols = np.argmax(filled, axis=1)
    rows = np.arange(x.shape[0])

    def _backward(g):
        dx = np.zeros(x.shape)
        dx[rows, cols] = g
        return (dx,)

    return make_result(x.data[rows, cols], (x,), _backward)


# ── Row-wise normalisations ──


def softmax_rows(x: Tensor) -> Tensor:
    _require_matrix(x, "softmax_rows")
    y = special.softmax(x.data, axis=1)

    def _backward(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return make_result(y, (x,), _backward)


def log_sum_exp_rows(x: Tensor) -> Tensor:
    """Stable log sum_j exp(x_ij), one value per row."""
    _require_matrix(x, "log_sum_exp_rows")
    if x.shape[1] == 1:
        out = x.data[:, 0].copy()
    else:
        out = special.logsumexp(x.data, axis=1)
    p = np.exp(x.data - out[:, None])
    return make_result(out, (x,), lambda g: (g[:, None] * p,))


def log_sum_exp_cols(x: Tensor) -> Tensor:
    _require_matrix(x, "log_sum_exp_cols")
    if x.shape[0] == 1:
        out = x.data[0, :].copy()
    else:
        out = special.logsumexp(x.data, axis=0)
    p = np.exp(x.data - out[None, :])
    return make_result(out, (x,), lambda g: (g[None, :] * p,))


def layer_norm_rows(x: Tensor, eps: float = 1e-5) -> Tensor:
    _require_matrix(x, "layer_norm_rows")
    mu = x.data.mean(axis=1, keepdims=True)
    s = np.sqrt(x.data.var(axis=1, keepdims=True) + eps)
    xhat = (x.data - mu) / s

    def _backward(g):
        gm = g.mean(axis=1, keepdims=True)
        gx = (g * xhat).mean(axis=1, keepdims=True)
        return ((g - gm - xhat * gx) / s,)

    return make_result(xhat, (x,), _backward)


def row_norms(x: Tensor) -> Tensor:
    """Euclidean norm of each row; zero subgradient where a row is zero."""
    _require_matrix(x, "row_norms")
    n = np.sqrt((x.data * x.data).sum(axis=1))
    safe = np.where(n > 0, n, 1.0)

    def _backward(g):
        return (np.where(n[:, None] > 0, g[:, None] * x.data / safe[:, None], 0.0),)

    return make_result(n, (x,), _backward)


# ── Shape plumbing ──


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from exc
    return make_result(out, (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of nothing")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat shapes {[t.shape for t in tensors]} do not conform") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(out, tensors, _backward)


def take_rows(x: Tensor, index: Sequence[int] | np.ndarray) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise DimensionError(f"row index out of range for {x.shape[0]} rows")

    def _backward(g):
        dx = np.zeros(x.shape)
        np.add.at(dx, index, g)
        return (dx,)

    return make_result(x.data[index], (x,), _backward)


def take_elements(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    _require_matrix(x, "take_elements")
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if rows.shape != cols.shape:
        raise DimensionError("take_elements: row and column index arrays differ in shape")

    def _backward(g):
        dx = np.zeros(x.shape)
        np.add.at(dx, (rows, cols), g)
        return (dx,)

    return make_result(x.data[rows, cols], (x,), _backward)


def pad_dustbin(x: Tensor, alpha: Tensor) -> Tensor:
    """Append one row and one column filled with the scalar ``alpha``."""
    _require_matrix(x, "pad_dustbin")
    if alpha.size != 1:
        raise DimensionError("dustbin parameter must be a scalar")
    m, n = x.shape
    out = np.empty((m + 1, n + 1))
    out[:m, :n] = x.data
    out[m, :] = alpha.item()
    out[:, n] = alpha.item()

    def _backward(g):
        d_alpha = g[m, :].sum() + g[:m, n].sum()
        return (g[:m, :n].copy(), np.full(alpha.shape, d_alpha))

    return make_result(out, (x, alpha), _backward)


# ── Geometry-aware ops ──


def rotate_pairs(x: Tensor, theta: Tensor) -> Tensor:
    """Rotate channel pairs (x_2k, x_2k+1) of each row by theta_k."""
    _require_matrix(x, "rotate_pairs")
    n, d = x.shape
    if d % 2:
        raise DimensionError(f"rotate_pairs needs an even width, got {d}")
    if theta.shape != (n, d // 2):
        raise DimensionError(f"theta {theta.shape} does not match ({n}, {d // 2})")
    c, s = np.cos(theta.data), np.sin(theta.data)
    xe, xo = x.data[:, 0::2], x.data[:, 1::2]
    out = np.empty_like(x.data)
    out[:, 0::2] = xe * c - xo * s
    out[:, 1::2] = xe * s + xo * c

    def _backward(g):
        ge, go = g[:, 0::2], g[:, 1::2]
        dx = np.empty_like(g)
        dx[:, 0::2] = ge * c + go * s
        dx[:, 1::2] = -ge * s + go * c
        dtheta = -ge * out[:, 1::2] + go * out[:, 0::2]
        return dx, dtheta

    return make_result(out, (x, theta), _backward)


def kernel_conv(
    features: Tensor,
    weights: Tensor,
    influences: Sequence[sparse.csr_matrix],
) -> Tensor:
    """out = sum_k A_k F W_k for sparse influence matrices A_k (queries x supports)."""
    _require_matrix(features, "kernel_conv")
    if weights.ndim != 3 or weights.shape[0] != len(influences):
        raise DimensionError(
            f"kernel weights {weights.shape} do not match {len(influences)} kernel points"
        )
    if weights.shape[1] != features.shape[1]:
        raise DimensionError(
            f"kernel weights expect width {weights.shape[1]}, features have {features.shape[1]}"
        )
    n_q = influences[0].shape[0] if influences else 0
    gathered = [A @ features.data for A in influences]
    out = np.zeros((n_q, weights.shape[2]))
    for k, AF in enumerate(gathered):
        out += AF @ weights.data[k]

    def _backward(g):
        dF = np.zeros(features.shape)
        dW = np.empty(weights.shape)
        for k, A in enumerate(influences):
            dF += A.T @ (g @ weights.data[k].T)
            dW[k] = gathered[k].T @ g
        return dF, dW

    return make_result(out, (features, weights), _backward)


def broadcast_rows(x: Tensor, n: int) -> Tensor:
    """Repeat a single row ``n`` times."""
    if x.ndim == 1:
        x = reshape(x, (1, x.shape[0]))
    if x.shape[0] != 1:
        raise DimensionError(f"broadcast_rows expects one row, got {x.shape}")
    out = np.repeat(x.data, n, axis=0)
    return make_result(out, (x,), lambda g: (unbroadcast(g, x.shape),))
