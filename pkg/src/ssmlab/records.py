"""Shared record types for attacks and perturbation bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["PerturbationRecord"]


@dataclass
class PerturbationRecord:
    """One input/state perturbation with its budget, norms, and outcome.

    ``budget`` is a position count B for discrete edits or an l-inf radius
    epsilon for continuous deltas; whichever of ``positions``/``delta`` is
    present must respect it exactly (validated at construction).
    """

    strategy: str
    budget: float
    positions: tuple = ()
    delta: np.ndarray | None = None
    objective_initial: float = 0.0
    objective_final: float = 0.0
    output_delta_norm: float = 0.0
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.positions:
            if len(set(self.positions)) > int(self.budget):
                raise ValueError("modified positions exceed budget B")
            object.__setattr__(self, "positions", tuple(int(p) for p in self.positions))
        if self.delta is not None:
            linf = float(np.max(np.abs(self.delta))) if self.delta.size else 0.0
            if linf > self.budget * (1.0 + 1e-12) + 1e-300:
                raise ValueError("delta exceeds l-inf budget epsilon")
