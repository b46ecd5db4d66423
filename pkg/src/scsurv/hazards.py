"""Crossing constraints on discrete hazards, and presentation smoothing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .constraints import ConstraintSystem, CrossingParams, v_index
from .data import CAP, Cohort, EventGrid
from .errors import DegenerateWindowError
from .mle import SolverOptions
from .profile import SccFit, scc_fit


@dataclass(frozen=True)
class DiscreteHazards:
    """Per-arm discrete hazards h_ja = 1 - exp(u_ja) on the event grid."""

    times: np.ndarray
    h: np.ndarray  # m x 2

    def __post_init__(self):
        object.__setattr__(self, "times", np.asarray(self.times, dtype=float))
        object.__setattr__(self, "h", np.asarray(self.h, dtype=float))
        if self.h.shape != (self.times.shape[0], 2):
            raise ValueError("h must have shape (m, 2)")
        if np.any(self.h < 0) or np.any(self.h > 1 - np.exp(-CAP) + 1e-12):
            raise ValueError("discrete hazards must lie in [0, 1 - exp(-CAP)]")

    @classmethod
    def from_logjumps(cls, times, u0, u1) -> "DiscreteHazards":
        return cls(times=times, h=np.column_stack([-np.expm1(u0), -np.expm1(u1)]))

    @classmethod
    def from_fit(cls, fit: SccFit) -> "DiscreteHazards":
        return cls.from_logjumps(fit.grid.times, fit.fit.u0, fit.fit.u1)

    def logjumps(self) -> tuple[np.ndarray, np.ndarray]:
        """Inverse map back to log-jumps, u = log(1 - h)."""
        return np.log1p(-self.h[:, 0]), np.log1p(-self.h[:, 1])


def build_hazard_constraints(grid: EventGrid, params: CrossingParams) -> ConstraintSystem:
    """Pointwise single-crossing system on the discrete hazards: for
    gamma = +1, u_j0 >= u_j1 (h_j0 <= h_j1) up to theta and reversed after;
    both directions flip for gamma = -1."""
    return ConstraintSystem(
        kind="hazard", m=grid.m, v=v_index(params.theta, grid), gamma=params.gamma
    )


def scc_hazard_fit(cohort: Cohort, opts: SolverOptions | None = None) -> SccFit:
    """Profile-likelihood fit under hazard-crossing constraints; the returned
    curves are the survival functions implied by the fitted hazards."""
    return scc_fit(cohort, opts, constraint="hazard")


@dataclass(frozen=True)
class SmoothedHazards:
    """Locally weighted linear fits of the discrete hazards, with a check of
    whether the smoothed curves still cross at most once (smoothing does not
    enforce that)."""

    times: np.ndarray
    h0: np.ndarray
    h1: np.ndarray
    single_crossing: bool
    first_violation_time: float | None


def _lowess_fit(x, y, span, x_eval):
    """Local linear regression with tricube weights, no robustness passes."""
    n = x.shape[0]
    k = max(2, int(np.ceil(span * n)))
    k = min(k, n - 1)
    out = np.empty_like(x_eval)
    for i, xe in enumerate(x_eval):
        dist = np.abs(x - xe)
        bw = np.sort(dist)[k]
        if bw <= 0:
            bw = max(dist.max(), 1.0) * 1e-9
        w = np.clip(dist / bw, 0.0, 1.0)
        w = (1.0 - w**3) ** 3
        sw = w.sum()
        if sw <= 0:
            out[i] = y[np.argmin(dist)]
            continue
        xw = (w * x).sum() / sw
        yw = (w * y).sum() / sw
        sxx = (w * (x - xw) ** 2).sum()
        if sxx <= 1e-14 * max(1.0, xw * xw):
            out[i] = yw
        else:
            slope = (w * (x - xw) * (y - yw)).sum() / sxx
            out[i] = yw + slope * (xe - xw)
    return out


GRID_POINTS = 200


def smooth_hazards(hazards: DiscreteHazards, span: float = 2.0 / 3.0) -> SmoothedHazards:
    """Smooth both arms' discrete hazards onto a uniform grid over [0, t_m].

    No crossing constraint is imposed on the smoothed curves; the result
    reports whether they happen to satisfy one, and the first time they
    provably do not.
    """
    if not 0 < span <= 1:
        raise ValueError(f"span must lie in (0, 1], got {span}")
    m = hazards.times.shape[0]
    if m < 3:
        raise DegenerateWindowError(
            f"need at least 3 grid points to smooth, got {m}"
        )
    x_eval = np.linspace(0.0, hazards.times[-1], GRID_POINTS)
    h0 = _lowess_fit(hazards.times, hazards.h[:, 0], span, x_eval)
    h1 = _lowess_fit(hazards.times, hazards.h[:, 1], span, x_eval)
    ok, first_bad = _single_crossing_check(x_eval, h1 - h0)
    return SmoothedHazards(
        times=x_eval, h0=h0, h1=h1, single_crossing=ok, first_violation_time=first_bad
    )


def _single_crossing_check(times, diff, tol=1e-12):
    """At most one sign change in ``diff``; returns (ok, first_violation)."""
    signs = np.sign(diff)
    signs[np.abs(diff) <= tol] = 0
    changes = 0
    last = 0.0
    for t, s in zip(times, signs):
        if s == 0:
            continue
        if last != 0 and s != last:
            changes += 1
            if changes > 1:
                return False, float(t)
        last = s
    return True, None
