"""Profile-likelihood search over the discrete crossing-parameter candidates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .constraints import (
    ConstraintSystem,
    CrossingParams,
    build_constraints,
    v_index,
)
from .data import Cohort, EventGrid, StepSurvival, build_event_grid
from .errors import SolverFailureError
from .mle import FitResult, SolverOptions, fit_system, loglik


@dataclass(frozen=True)
class ProfileRow:
    """One profile-likelihood evaluation at a candidate (theta, gamma)."""

    theta: float
    gamma: int
    loglik: float


@dataclass(frozen=True)
class SccFit:
    """Single-crossing constrained fit: crossing parameters at the profile
    maximum, both fitted curves, and the full profile table."""

    theta_hat: float
    gamma_hat: int
    s0: StepSurvival
    s1: StepSurvival
    profile: tuple[ProfileRow, ...]
    loglik: float
    grid: EventGrid
    constraint: str
    fit: FitResult

    def hazard_matrix(self) -> np.ndarray:
        """Discrete hazards h_ja = 1 - exp(u_ja) of the fitted curves, m x 2."""
        return np.column_stack([-np.expm1(self.fit.u0), -np.expm1(self.fit.u1)])


def candidate_thetas(grid: EventGrid) -> np.ndarray:
    """Candidate crossing times {0, t_1, ..., t_{m-1}}; t_m is redundant
    because theta = 0 already covers both no-crossing orderings."""
    return np.concatenate([[0.0], grid.times[:-1]])


def profile_loglik(
    grid: EventGrid,
    params: CrossingParams,
    opts: SolverOptions | None = None,
    constraint: str = "survival",
) -> float:
    """Profile log-likelihood: the attained maximum of the conditional fit."""
    system = _system_for(grid, params, constraint)
    return fit_system(grid, system, opts).loglik


def _system_for(grid: EventGrid, params: CrossingParams, constraint: str) -> ConstraintSystem:
    if constraint == "survival":
        return build_constraints(grid, params)
    if constraint == "hazard":
        return ConstraintSystem(
            kind="hazard", m=grid.m, v=v_index(params.theta, grid), gamma=params.gamma
        )
    raise ValueError(f"unknown constraint {constraint!r}")


def curves_from_fit(fit: FitResult, grid: EventGrid) -> tuple[StepSurvival, StepSurvival]:
    """Rebuild both right-continuous step curves from fitted log-jumps."""
    return (
        StepSurvival(times=grid.times, logjumps=fit.u0),
        StepSurvival(times=grid.times, logjumps=fit.u1),
    )


# Profile values within this absolute window of the maximum count as tied;
# ties resolve to the smallest theta, then to gamma = +1.
TIE_TOL = 1e-9


def scc_fit(
    cohort: Cohort,
    opts: SolverOptions | None = None,
    constraint: str = "survival",
) -> SccFit:
    """Estimate (theta, gamma) by profile likelihood and return the
    single-crossing constrained curves at the maximum.

    Evaluates all 2m candidates in a fixed order (theta ascending, gamma = +1
    before -1) so results are reproducible; consecutive fits along theta are
    warm-started, which cannot change the attained maxima beyond the solver
    tolerance because every fit must meet the same KKT contract.
    """
    opts = opts or SolverOptions()
    grid = build_event_grid(cohort)
    thetas = candidate_thetas(grid)
    rows: list[ProfileRow] = []
    fits: list[FitResult] = []
    warm: dict[int, np.ndarray] = {}
    for theta in thetas:
        for gamma in (1, -1):
            system = _system_for(grid, CrossingParams(theta=float(theta), gamma=gamma), constraint)
            try:
                fit = fit_system(grid, system, opts, warm=warm.get(gamma))
            except SolverFailureError as err:
                raise SolverFailureError(
                    f"conditional fit failed at theta={theta:g}, gamma={gamma:+d}: {err}",
                    theta=float(theta),
                    gamma=gamma,
                ) from err
            warm[gamma] = np.concatenate([fit.u0, fit.u1])
            rows.append(ProfileRow(theta=float(theta), gamma=gamma, loglik=fit.loglik))
            fits.append(fit)
    best_value = max(row.loglik for row in rows)
    chosen = next(i for i, row in enumerate(rows) if row.loglik >= best_value - TIE_TOL)
    fit = fits[chosen]
    s0, s1 = curves_from_fit(fit, grid)
    return SccFit(
        theta_hat=rows[chosen].theta,
        gamma_hat=rows[chosen].gamma,
        s0=s0,
        s1=s1,
        profile=tuple(rows),
        loglik=rows[chosen].loglik,
        grid=grid,
        constraint=constraint,
        fit=fit,
    )


def km_loglik(grid: EventGrid) -> float:
    """Unconstrained maximum of the log-likelihood (attained by KM jumps)."""
    from .data import km_logjumps

    return loglik(km_logjumps(grid, 0), km_logjumps(grid, 1), grid)
