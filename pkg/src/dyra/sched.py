"""ConstCosine learning-rate schedule: a constant phase, then a half-cosine decay."""
from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass
class ConstCosineSchedule:
    base_lr: float
    total_steps: int
    switch_step: int | None = None
    final_lr: float = 0.0

    def __post_init__(self):
        if self.switch_step is None:
            self.switch_step = (2 * self.total_steps) // 3
        if not self.base_lr > 0:
            raise ValueError("base_lr must be positive")
        if not self.final_lr >= 0:
            raise ValueError("final_lr must be non-negative")
        if self.total_steps < 1 or not 0 <= self.switch_step < self.total_steps:
            raise ValueError("need 0 <= switch_step < total_steps")

    def lr_at(self, step: int) -> float:
        if not 0 <= step <= self.total_steps:
            raise ValueError(f"step {step} outside [0, {self.total_steps}]")
        if step <= self.switch_step:
            return self.base_lr
        if step == self.total_steps:
            return self.final_lr
        frac = (step - self.switch_step) / (self.total_steps - self.switch_step)
        # cos(pi * frac) written as sin(pi * (1/2 - frac)), which is exactly 0 at the midpoint;
        # mid + half * c stays monotone under rounding and the clamp pins it to [final, base]
        mid = 0.5 * (self.base_lr + self.final_lr)
        half = 0.5 * (self.base_lr - self.final_lr)
        c = math.sin(math.pi * (0.5 - frac))
        return min(self.base_lr, max(self.final_lr, mid + half * c))

    __call__ = lr_at

    def rows(self):
        return [(t, self.lr_at(t)) for t in range(self.total_steps + 1)]


def lr_at(step: int, schedule: ConstCosineSchedule) -> float:
    return schedule.lr_at(step)
