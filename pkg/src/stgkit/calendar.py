"""Calendar indices and the window value type."""
from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime

import numpy as np

from .errors import DataError

MINUTES_PER_DAY = 1440


def steps_per_day(interval_minutes: int) -> int:
    if interval_minutes <= 0 or MINUTES_PER_DAY % interval_minutes:
        raise DataError(f"interval {interval_minutes} min does not divide a day")
    return MINUTES_PER_DAY // interval_minutes


@dataclass(frozen=True)
class CalendarIndex:
    """1-based day of week (Monday = 1) and step of day."""

    day_of_week: int
    step_of_day: int


def calendar_arrays(start: datetime, n_steps: int, interval_minutes: int) -> tuple[np.ndarray, np.ndarray]:
    """Day-of-week in [1, 7] and step-of-day in [1, steps_per_day] for each step."""
    spd = steps_per_day(interval_minutes)
    minute0 = start.hour * 60 + start.minute
    if minute0 % interval_minutes or start.second or start.microsecond:
        raise DataError(f"start {start.isoformat()} is not aligned to {interval_minutes}-minute steps")
    step0 = minute0 // interval_minutes
    absolute = step0 + np.arange(n_steps)
    sod = absolute % spd + 1
    dow = (start.isoweekday() - 1 + absolute // spd) % 7 + 1
    return dow.astype(np.int64), sod.astype(np.int64)


def validate_calendar(dow: np.ndarray, sod: np.ndarray, spd: int) -> None:
    bad_dow = np.flatnonzero((dow < 1) | (dow > 7))
    if bad_dow.size:
        raise DataError(f"day_of_week out of range [1, 7] at step {int(bad_dow[0])}: {int(dow.flat[bad_dow[0]])}")
    bad_sod = np.flatnonzero((sod < 1) | (sod > spd))
    if bad_sod.size:
        raise DataError(
            f"step_of_day out of range [1, {spd}] at step {int(bad_sod[0])}: {int(sod.flat[bad_sod[0]])}"
        )


@dataclass
class StWindow:
    """``T`` steps of readings ``[T, N, C_in]`` with per-step calendar indices.

    Arrays may carry a leading batch axis, in which case ``dow``/``sod`` are ``[B, T]``.
    """

    x: np.ndarray
    day_of_week: np.ndarray
    step_of_day: np.ndarray

    @property
    def steps(self) -> int:
        return self.x.shape[-3]

    @property
    def n_nodes(self) -> int:
        return self.x.shape[-2]
