"""Censored two-arm samples, event grids, Kaplan-Meier curves, and binning."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import (
    EmptyArmError,
    GridMismatchError,
    InputFormatError,
    InvalidWidthError,
    NegativeTimeError,
)

# Log-jump magnitude standing in for "survival reached zero": exp(-CAP) ~ 1e-12.
CAP = 27.63


@dataclass(frozen=True)
class Subject:
    """One observation: follow-up time, event indicator, treatment arm."""

    time: float
    event: bool
    arm: int

    def __post_init__(self):
        if self.time < 0:
            raise NegativeTimeError(f"follow-up time must be >= 0, got {self.time}")
        if self.arm not in (0, 1):
            raise ValueError(f"arm must be 0 or 1, got {self.arm}")


@dataclass(frozen=True)
class Cohort:
    """An immutable collection of subjects from a two-arm trial."""

    subjects: tuple[Subject, ...]

    @classmethod
    def from_arrays(cls, times, events, arms) -> "Cohort":
        times = np.asarray(times, dtype=float)
        events = np.asarray(events)
        arms = np.asarray(arms)
        if not (times.shape == events.shape == arms.shape):
            raise ValueError("times, events, arms must have equal shapes")
        return cls(
            tuple(
                Subject(float(t), bool(e), int(a))
                for t, e, a in zip(times, events, arms)
            )
        )

    @property
    def n(self) -> int:
        return len(self.subjects)

    @cached_property
    def times(self) -> np.ndarray:
        out = np.array([s.time for s in self.subjects], dtype=float)
        out.flags.writeable = False
        return out

    @cached_property
    def events(self) -> np.ndarray:
        out = np.array([s.event for s in self.subjects], dtype=bool)
        out.flags.writeable = False
        return out

    @cached_property
    def arms(self) -> np.ndarray:
        out = np.array([s.arm for s in self.subjects], dtype=int)
        out.flags.writeable = False
        return out

    def arm_size(self, arm: int) -> int:
        return int(np.sum(self.arms == arm))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class EventGrid:
    """Unique ordered event times with per-arm event and at-risk counts.

    ``times`` holds t_1 < ... < t_m, ``d[j, a]`` the number of events in arm
    ``a`` at ``times[j]`` and ``r[j, a]`` the number at risk (Y_i >= t_j).
    """

    times: np.ndarray
    d: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "times", _frozen(np.asarray(self.times, dtype=float)))
        object.__setattr__(self, "d", _frozen(np.asarray(self.d, dtype=int)))
        object.__setattr__(self, "r", _frozen(np.asarray(self.r, dtype=int)))
        m = self.times.shape[0]
        if self.d.shape != (m, 2) or self.r.shape != (m, 2):
            raise ValueError("d and r must have shape (m, 2)")
        if m and np.any(np.diff(self.times) <= 0):
            raise ValueError("grid times must be strictly increasing")
        if np.any(self.d.sum(axis=1) < 1):
            raise ValueError("every grid time must carry at least one event")
        if np.any(self.d > self.r):
            raise ValueError("event counts cannot exceed at-risk counts")

    @property
    def m(self) -> int:
        return self.times.shape[0]


@dataclass(frozen=True)
class StepSurvival:
    """Right-continuous step survival curve stored as log-jumps on a grid.

    S(t) = exp(sum of logjumps at grid times <= t); S(0) = 1 and the curve is
    flat after the last grid time.  All jumps lie in [-CAP, 0].
    """

    times: np.ndarray
    logjumps: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "times", _frozen(np.asarray(self.times, dtype=float)))
        object.__setattr__(
            self, "logjumps", _frozen(np.asarray(self.logjumps, dtype=float))
        )
        if self.times.shape != self.logjumps.shape:
            raise ValueError("times and logjumps must have equal length")
        if np.any(self.logjumps > 1e-12) or np.any(self.logjumps < -CAP - 1e-9):
            raise ValueError("log-jumps must lie in [-CAP, 0]")

    @cached_property
    def grid_survival(self) -> np.ndarray:
        """Survival values S(t_j) at the grid times."""
        return _frozen(np.exp(np.cumsum(self.logjumps)))

    def evaluate(self, t):
        """Right-continuous evaluation of S at scalar or array times."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="right")
        cumlog = np.concatenate([[0.0], np.cumsum(self.logjumps)])
        out = np.exp(cumlog[idx])
        return float(out) if out.ndim == 0 else out

    def same_grid(self, other: "StepSurvival") -> bool:
        return self.times.shape == other.times.shape and np.array_equal(
            self.times, other.times
        )


def build_event_grid(cohort: Cohort) -> EventGrid:
    """Build the event-time grid with per-arm event and at-risk counts.

    Raises EmptyArmError when an arm has no observed events.
    """
    if cohort.n == 0:
        raise EmptyArmError("cohort is empty")
    times, events, arms = cohort.times, cohort.events, cohort.arms
    for a in (0, 1):
        if not np.any(events & (arms == a)):
            raise EmptyArmError(f"arm {a} has no observed events")
    grid_times = np.unique(times[events])
    m = grid_times.shape[0]
    d = np.zeros((m, 2), dtype=int)
    r = np.zeros((m, 2), dtype=int)
    for a in (0, 1):
        in_arm = arms == a
        ya = np.sort(times[in_arm])
        # at risk: Y_i >= t_j, counted with the literal indicator (censoring
        # tied with an event time still counts as at risk at that time)
        r[:, a] = ya.shape[0] - np.searchsorted(ya, grid_times, side="left")
        ev = np.sort(times[in_arm & events])
        d[:, a] = np.searchsorted(ev, grid_times, side="right") - np.searchsorted(
            ev, grid_times, side="left"
        )
    return EventGrid(times=grid_times, d=d, r=r)


def km_logjumps(grid: EventGrid, arm: int) -> np.ndarray:
    """Kaplan-Meier log-jumps for one arm: log(1 - d/R), capped at -CAP."""
    d = grid.d[:, arm].astype(float)
    r = grid.r[:, arm].astype(float)
    u = np.zeros(grid.m)
    alive = (r > 0) & (d > 0)
    full = alive & (d >= r)
    partial = alive & ~full
    u[partial] = np.log1p(-d[partial] / r[partial])
    u[full] = -CAP
    return u


def kaplan_meier(grid: EventGrid, arm: int) -> StepSurvival:
    """Unconstrained Kaplan-Meier estimate for one arm on the shared grid."""
    if arm not in (0, 1):
        raise ValueError(f"arm must be 0 or 1, got {arm}")
    return StepSurvival(times=grid.times, logjumps=km_logjumps(grid, arm))


def bin_followup(cohort: Cohort, width: float) -> Cohort:
    """Replace each follow-up time by the midpoint of its half-open bin
    [k*width, (k+1)*width); events and arms are unchanged."""
    if width <= 0:
        raise InvalidWidthError(f"bin width must be > 0, got {width}")
    mid = (np.floor(cohort.times / width) + 0.5) * width
    return Cohort.from_arrays(mid, cohort.events, cohort.arms)


def require_same_grid(s0: StepSurvival, s1: StepSurvival) -> None:
    if not s0.same_grid(s1):
        raise GridMismatchError("step curves are defined on different grids")


CSV_HEADER = ("time", "event", "arm")


def read_cohort_csv(path) -> Cohort:
    """Read a cohort from CSV with header ``time,event,arm``.

    ``event`` and ``arm`` must be 0/1; times must be non-negative reals.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputFormatError(f"{path}: empty file") from None
        if tuple(h.strip() for h in header) != CSV_HEADER:
            raise InputFormatError(
                f"{path}: expected header 'time,event,arm', got {','.join(header)!r}"
            )
        times, events, arms = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 3:
                raise InputFormatError(f"{path}:{lineno}: expected 3 columns")
            try:
                t = float(row[0])
            except ValueError:
                raise InputFormatError(
                    f"{path}:{lineno}: bad time {row[0]!r}"
                ) from None
            if row[1].strip() not in ("0", "1"):
                raise InputFormatError(f"{path}:{lineno}: event must be 0 or 1")
            if row[2].strip() not in ("0", "1"):
                raise InputFormatError(f"{path}:{lineno}: arm must be 0 or 1")
            if t < 0:
                raise InputFormatError(f"{path}:{lineno}: negative time {t}")
            times.append(t)
            events.append(int(row[1]))
            arms.append(int(row[2]))
    if not times:
        raise InputFormatError(f"{path}: no data rows")
    return Cohort.from_arrays(times, events, arms)
