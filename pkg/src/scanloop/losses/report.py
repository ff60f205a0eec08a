"""Weighted sum of the training losses."""

from collections.abc import Mapping
from dataclasses import dataclass, fields

import numpy as np

from scanloop.common.exceptions import TrainingDivergedError
from scanloop.compute.tensor import Tensor

TERMS = ("s1", "s2", "p", "t", "c", "f")


@dataclass(eq=False)
class LossReport:
    """Per-term scalar losses; a term left as ``None`` is not part of this stage."""

    s1: Tensor | None = None
    s2: Tensor | None = None
    p: Tensor | None = None
    t: Tensor | None = None
    c: Tensor | None = None
    f: Tensor | None = None

    def terms(self) -> dict[str, Tensor]:
        present = ((f.name, getattr(self, f.name)) for f in fields(self))
        return {name: value for name, value in present if value is not None}

    def total(self, weights: Mapping[str, float] | None = None) -> Tensor:
        """sum_k w_k L_k over the present terms; missing weights count as 1."""
        weights = weights or {}
        present = self.terms()
        if not present:
            raise TrainingDivergedError("loss report holds no terms")
        out = Tensor(0.0)
        for name, value in present.items():
            out = out + value * float(weights.get(name, 1.0))
        return out

    def as_dict(self, weights: Mapping[str, float] | None = None) -> dict[str, float]:
        values = {name: value.item() for name, value in self.terms().items()}
        values["total"] = self.total(weights).item() if values else 0.0
        return values

    def check_finite(self) -> None:
        """Raise TrainingDivergedError naming every non-finite or negative term."""
        bad = {
            name: value.item()
            for name, value in self.terms().items()
            if not np.isfinite(value.item()) or value.item() < 0
        }
        if bad:
            raise TrainingDivergedError(f"invalid loss terms: {sorted(bad)}", dump=bad)
