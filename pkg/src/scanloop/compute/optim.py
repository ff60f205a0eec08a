"""Adam over a ParameterStore, plus the step-decay learning-rate schedule."""

import numpy as np

from scanloop.compute.params import ParameterStore


def step_decay(base_lr: float, epoch: int, decay: float = 0.05, every: int = 4) -> float:
    """Multiply the rate by ``1 - decay`` once per ``every`` epochs."""
    return base_lr * (1.0 - decay) ** (epoch // every)


class Adam:
    def __init__(
        self,
        store: ParameterStore,
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.store = store
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.steps = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self) -> int:
        """Apply one update to every trainable parameter holding a gradient.

        Returns the number of parameters updated.
        """
        self.steps += 1
        b1, b2 = self.beta1, self.beta2
        updated = 0
        for name in self.store.trainable():
            param = self.store[name]
            if param.grad is None:
                continue
            g = param.grad
            m = self._m.get(name, np.zeros_like(g))
            v = self._v.get(name, np.zeros_like(g))
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            self._m[name], self._v[name] = m, v
            m_hat = m / (1.0 - b1**self.steps)
            v_hat = v / (1.0 - b2**self.steps)
            self.store.replace(name, param.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))
            updated += 1
        return updated
