"""Training-time ramps for the perturbation radius and the worst-case weight."""

from __future__ import annotations

import math
from dataclasses import dataclass

KAPPA_SHAPES = ("dqn", "ppo", "const")


@dataclass(frozen=True)
class Schedules:
    total_steps: int
    eps_target: float
    kappa_target: float
    kappa_shape: str = "ppo"
    eps_start_frac: float = 0.1
    eps_end_frac: float = 0.6
    # rate of the exponential approach in the dqn shape, per unit of the
    # remaining training fraction
    kappa_rate: float = 8.0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.kappa_shape not in KAPPA_SHAPES:
            raise ValueError(f"unknown kappa schedule {self.kappa_shape!r}")
        if not 0.0 <= self.eps_start_frac <= self.eps_end_frac <= 1.0:
            raise ValueError("need 0 <= eps_start_frac <= eps_end_frac <= 1")
        if self.eps_target < 0 or self.kappa_target < 0:
            raise ValueError("schedule targets must be non-negative")

    def eps_of(self, t: int) -> float:
        """0 until ``eps_start_frac``, linear to the target by ``eps_end_frac``."""
        f = t / self.total_steps
        if f <= self.eps_start_frac:
            return 0.0
        if f >= self.eps_end_frac:
            return self.eps_target
        return self.eps_target * (f - self.eps_start_frac) / (self.eps_end_frac - self.eps_start_frac)

    def kappa_wst_of(self, t: int) -> float:
        f = min(max(t / self.total_steps, 0.0), 1.0)
        if self.kappa_shape == "const":
            return self.kappa_target
        if self.kappa_shape == "ppo":
            return self.kappa_target * f
        # flat for the first third, then an exponential approach that lands
        # exactly on the target at the end of training
        if f <= 1 / 3:
            return 0.0
        x = (f - 1 / 3) * 1.5
        rise = (1 - math.exp(-self.kappa_rate * x)) / (1 - math.exp(-self.kappa_rate))
        return self.kappa_target * rise

    def values(self, t: int) -> dict:
        return {"eps": self.eps_of(t), "kappa_wst": self.kappa_wst_of(t)}
