"""Curriculum weight schedules and the learnable rho pair."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

from .errors import InvalidParameter, InvalidStep
from .losses import RhoPair

KINDS = ("exponential", "linear", "constant", "learnable-only")


@dataclass(frozen=True)
class CurriculumSchedule:
    """lambda(t) for the fuzzy branch.

    ``exponential``: ``max(clamp_min, lambda0 * exp(-alpha * t))``;
    ``linear``: ``max(clamp_min, lambda0 * (1 - t / t_end))``;
    ``constant``: ``lambda0``; ``learnable-only``: 1.0, leaving the annealing
    to the rho dynamics.
    """

    kind: str = "exponential"
    lambda0: float = 1.0
    alpha: float = 0.0
    t_end: int = 1
    clamp_min: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidParameter(f"unknown schedule kind {self.kind!r}; expected one of {KINDS}")
        if self.lambda0 < 0 or self.alpha < 0 or self.clamp_min < 0:
            raise InvalidParameter("lambda0, alpha and clamp_min must be non-negative")
        if self.kind == "linear" and self.t_end <= 0:
            raise InvalidParameter("linear schedule needs t_end >= 1")

    @classmethod
    def default_for(cls, total_steps, lambda0=1.0):
        """Exponential decay reaching ``lambda0 / 100`` at ``total_steps``."""
        return cls(kind="exponential", lambda0=lambda0, alpha=math.log(100.0) / max(1, total_steps))

    def to_dict(self):
        return asdict(self)


def lambda_at(schedule: CurriculumSchedule, t) -> float:
    if t < 0:
        raise InvalidStep(f"step must be >= 0, got {t}")
    kind = schedule.kind
    if kind == "exponential":
        return max(schedule.clamp_min, schedule.lambda0 * math.exp(-schedule.alpha * t))
    if kind == "linear":
        return max(schedule.clamp_min, schedule.lambda0 * (1.0 - t / schedule.t_end))
    if kind == "constant":
        return schedule.lambda0
    return 1.0


def make_rho(init1=0.5, init2=0.5) -> RhoPair:
    return RhoPair.from_values(init1, init2)


@dataclass
class CurriculumState:
    schedule: CurriculumSchedule
    rho: RhoPair = field(default_factory=make_rho)
    step: int = 0

    @property
    def lam(self):
        return lambda_at(self.schedule, self.step)

    def advance(self, d_rho1_raw, d_rho2_raw, lr):
        self.rho = self.rho.step(d_rho1_raw, d_rho2_raw, lr)
        self.step += 1
