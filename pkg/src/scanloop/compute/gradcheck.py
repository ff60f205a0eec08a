"""Central finite-difference verification of tape gradients."""

from collections.abc import Callable

import numpy as np

from scanloop.common.exceptions import ContractError, OracleError
from scanloop.compute.tensor import Tensor, backward, fresh_tape, no_grad


def _evaluate(f: Callable[[Tensor], Tensor], data: np.ndarray) -> float:
    with no_grad():
        value = f(Tensor(data))
    if value.size != 1:
        raise ContractError(f"finite_diff_check needs a scalar function, got shape {value.shape}")
    return value.item()


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-6,
    samples: int = 20,
    seed: int = 0,
) -> float:
    """Max relative error between the tape gradient and central differences.

    The error at a coordinate is ``|analytic - numeric| / max(1, |numeric|)``;
    up to ``samples`` coordinates are drawn with a seeded generator.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"eps must lie in [1e-7, 1e-3], got {eps}")

    base = np.array(x.data, dtype=np.float64)
    first = _evaluate(f, base)
    second = _evaluate(f, base)
    if first != second:
        raise OracleError(f"function is not deterministic ({first!r} != {second!r})")

    with fresh_tape():
        leaf = Tensor(base, requires_grad=True)
        loss = f(leaf)
        if not loss.requires_grad:
            analytic = np.zeros(base.shape)
        else:
            backward(loss)
            analytic = leaf.grad if leaf.grad is not None else np.zeros(base.shape)

    flat = base.reshape(-1)
    rng = np.random.default_rng(seed)
    if flat.size <= samples:
        coords = np.arange(flat.size)
    else:
        coords = np.sort(rng.choice(flat.size, size=samples, replace=False))

    worst = 0.0
    grad_flat = analytic.reshape(-1)
    for i in coords:
        plus = flat.copy()
        minus = flat.copy()
        plus[i] += eps
        minus[i] -= eps
        numeric = (_evaluate(f, plus.reshape(base.shape)) - _evaluate(f, minus.reshape(base.shape)))
        numeric /= 2.0 * eps
        err = abs(grad_flat[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return float(worst)
