"""Temporal pacing law and prefix arithmetic shared by both curriculum modes.

The schedule grows the student's horizon k linearly with the learner step:
k = min(k_start + floor(n / eta), cap). Forward mode truncates rollouts at
k turns; backward mode replays the first L - k turns of a stored expert
trajectory and lets the student finish.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError


@dataclass(frozen=True)
class CurriculumSchedule:
    k_start: int
    eta: int
    cap: int
    total_steps: int

    def __post_init__(self):
        if self.k_start < 1:
            raise ConfigError(f"k_start must be >= 1, got {self.k_start}")
        if self.eta < 1:
            raise ConfigError(f"eta must be >= 1, got {self.eta}")
        if self.cap < self.k_start:
            raise ConfigError(
                f"cap ({self.cap}) must be >= k_start ({self.k_start})"
            )
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {self.total_steps}")


def horizon_at(schedule: CurriculumSchedule, n: int) -> int:
    """Active horizon at training step n: min(k_start + n // eta, cap).

    Monotone non-decreasing in n and saturating at the cap. Any n >= 0 is
    accepted; the published (n, k) pairs are covered by the same formula.
    """
    if n < 0:
        raise ConfigError(f"step index must be >= 0, got {n}")
    return min(schedule.k_start + n // schedule.eta, schedule.cap)


def b2f_prefix_len(L: int, k: int) -> int:
    """Expert-prefix length for backward mode: max(L - k, 0).

    L is the stored trajectory's length. Once k >= L the prefix is empty
    and the student executes the episode end to end.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if L < 1:
        raise ConfigError(f"L must be >= 1, got {L}")
    return max(L - k, 0)


def steps_to_full_horizon(schedule: CurriculumSchedule, target: int) -> int:
    """First step n at which horizon_at(schedule, n) reaches ``target``.

    Used by config validation to warn when total_steps is too small for the
    prefix to vanish (or the truncation to reach the full horizon).
    """
    if target <= schedule.k_start:
        return 0
    if target > schedule.cap:
        raise ConfigError(
            f"target horizon {target} exceeds schedule cap {schedule.cap}"
        )
    return (target - schedule.k_start) * schedule.eta
