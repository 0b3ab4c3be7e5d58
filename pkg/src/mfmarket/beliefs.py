"""Per-aggregator hourly price beliefs updated by stochastic approximation."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np


@dataclass
class BeliefVector:
    values: np.ndarray
    delta: float = 0.7
    allow_any_delta: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).copy()
        if not np.all(np.isfinite(self.values)):
            raise ValueError("belief values must be finite")
        if not 0.5 <= self.delta <= 1.0:
            if not self.allow_any_delta:
                raise ValueError(f"delta={self.delta} outside [0.5, 1]")
            warnings.warn(f"belief learning rate {self.delta} outside [0.5, 1]", stacklevel=2)

    @property
    def H(self):
        return len(self.values)

    def step_size(self, t):
        return self.delta / math.sqrt(t // self.H + 1)


def update_belief(b: BeliefVector, t: int, realized_lmp: float) -> BeliefVector:
    """Move the current hour's entry toward the realized price; other hours untouched."""
    h = t % b.H
    vals = b.values.copy()
    vals[h] = vals[h] - b.step_size(t) * (vals[h] - realized_lmp)
    out = BeliefVector.__new__(BeliefVector)
    out.values, out.delta, out.allow_any_delta = vals, b.delta, b.allow_any_delta
    return out
