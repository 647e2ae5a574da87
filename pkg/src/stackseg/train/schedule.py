"""Learning-rate schedule: linear warmup, then exponential decay."""

from __future__ import annotations

from dataclasses import dataclass

from ..errors import ConfigError


@dataclass(frozen=True)
class ScheduleConfig:
    peak_lr: float = 2e-3
    warmup_steps: int = 25
    decay_rate: float = 0.998

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ConfigError(f"peak_lr must be positive, got {self.peak_lr}")
        if self.warmup_steps < 1:
            raise ConfigError(f"warmup_steps must be >= 1, got {self.warmup_steps}")
        if not 0 < self.decay_rate <= 1:
            raise ConfigError(f"decay_rate must be in (0, 1], got {self.decay_rate}")


def lr_at(step: int, sched: ScheduleConfig) -> float:
    if step < sched.warmup_steps:
        return sched.peak_lr * (step + 1) / sched.warmup_steps
    return sched.peak_lr * sched.decay_rate ** (step - sched.warmup_steps)
