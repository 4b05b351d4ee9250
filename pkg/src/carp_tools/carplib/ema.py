"""Teacher maintenance by exponential moving average, and cosine schedules."""

import dataclasses
import logging
import math

import numpy as np

from .errors import require
from .model import ModelParams

log = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class CosineSchedule:
    start: float
    end: float
    total_steps: int

    def __post_init__(self):
        require(self.total_steps >= 1, f"total_steps must be >= 1, got {self.total_steps}")


def schedule_value(s: CosineSchedule, step: int) -> float:
    """end + (start - end) * (1 + cos(pi * step / total)) / 2, exact at both ends"""
    require(0 <= step <= s.total_steps, f"step {step} outside [0, {s.total_steps}]")
    if step == 0:
        return s.start
    if step == s.total_steps:
        return s.end
    return s.end + 0.5 * (s.start - s.end) * (1.0 + math.cos(math.pi * step / s.total_steps))


@dataclasses.dataclass(frozen=True)
class EmaSchedule:
    eta_start: float = 0.99
    eta_end: float = 1.0
    total_steps: int = 1

    def __post_init__(self):
        require(
            0.0 <= self.eta_start <= self.eta_end <= 1.0,
            f"need 0 <= eta_start <= eta_end <= 1, got {self.eta_start} {self.eta_end}",
        )

    def value(self, step: int) -> float:
        return schedule_value(CosineSchedule(self.eta_start, self.eta_end, self.total_steps), step)


def ema_update(teacher: ModelParams, student: ModelParams, eta: float) -> ModelParams:
    """In place: every teacher leaf becomes eta * teacher + (1 - eta) * student"""
    require(0.0 <= eta <= 1.0, f"eta must be in [0, 1], got {eta}")
    require(teacher.same_shapes(student), "teacher and student parameter trees differ")
    src = student.leaves()
    for name, dst in teacher.leaves().items():
        if eta == 0.0:
            np.copyto(dst, src[name])
        elif eta != 1.0:
            dst *= eta
            dst += (1.0 - eta) * src[name]
    return teacher
