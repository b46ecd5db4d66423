"""Treatment-effect measures computed from fitted step curves and hazards."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import CAP, EventGrid, StepSurvival
from .errors import (
    CrossingOutOfRangeError,
    ExtrapolationWarning,
    ZeroSurvivalError,
)
from .hazards import DiscreteHazards
from .profile import SccFit

ZERO_SURVIVAL = np.exp(-CAP)


def milestone_diff(s1: StepSurvival, s0: StepSurvival, tstar: float) -> float:
    """Difference in survival probabilities S_1(t*) - S_0(t*)."""
    if tstar < 0:
        raise ValueError(f"milestone time must be >= 0, got {tstar}")
    return float(s1.evaluate(tstar) - s0.evaluate(tstar))


def surv_at_crossing(fit: SccFit) -> float:
    """Proportion surviving up to the crossing: the average of the two
    fitted curves at theta_hat (1 when theta_hat = 0)."""
    return float(0.5 * (fit.s1.evaluate(fit.theta_hat) + fit.s0.evaluate(fit.theta_hat)))


def _step_integral(s: StepSurvival, a: float, b: float) -> float:
    """Exact integral of the step curve over [a, b]."""
    if b <= a:
        return 0.0
    knots = np.concatenate([[0.0], s.times])
    values = np.concatenate([[1.0], s.grid_survival])
    edges = np.clip(knots, a, b)
    rights = np.concatenate([edges[1:], [b]])
    widths = np.maximum(rights - edges, 0.0)
    return float(np.sum(values * widths))


def rmst(s: StepSurvival, tau: float) -> float:
    """Restricted mean survival time: area under the curve on [0, tau]."""
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    if s.times.size and tau > s.times[-1]:
        warnings.warn(
            f"tau={tau:g} exceeds the last event time {s.times[-1]:g}; "
            "using the flat tail of the step curve",
            ExtrapolationWarning,
            stacklevel=2,
        )
    return _step_integral(s, 0.0, tau)


def rrml(s: StepSurvival, t: float, tau: float) -> float:
    """Restricted residual mean life: integral of S over (t, tau] divided
    by S(t)."""
    if not 0 <= t < tau:
        raise ValueError(f"need 0 <= t < tau, got t={t}, tau={tau}")
    st = s.evaluate(t)
    if st <= ZERO_SURVIVAL:
        raise ZeroSurvivalError(f"S({t:g}) is numerically zero")
    return _step_integral(s, t, tau) / st


def conditional_survival(s: StepSurvival, theta: float, t: float) -> float:
    """Survival past t conditional on surviving to theta: S(t)/S(theta)."""
    if t <= theta:
        raise ValueError(f"need t > theta, got t={t}, theta={theta}")
    s_theta = s.evaluate(theta)
    if s_theta <= ZERO_SURVIVAL:
        raise ZeroSurvivalError(f"S({theta:g}) is numerically zero")
    return float(s.evaluate(t) / s_theta)


def avg_hazard_ratios(
    hazards: DiscreteHazards, theta_hat: float, grid: EventGrid
) -> tuple[float, float]:
    """Pre- and post-crossing average treatment-to-total hazard ratios.

    Time-weighted averages of h_1/(h_0 + h_1) over (0, theta_hat] and
    (theta_hat, t_m], with t_0 = 0.  Terms where both hazards vanish
    contribute zero.
    """
    t_m = grid.times[-1]
    if not 0 < theta_hat < t_m:
        raise CrossingOutOfRangeError(
            f"theta_hat must lie strictly inside (0, {t_m:g}), got {theta_hat:g}"
        )
    times = hazards.times
    gaps = np.diff(np.concatenate([[0.0], times]))
    total = hazards.h.sum(axis=1)
    ratio = np.divide(
        hazards.h[:, 1], total, out=np.zeros_like(total), where=total > 0
    )
    pre = times <= theta_hat
    lam_pre = float(np.sum(ratio[pre] * gaps[pre]) / theta_hat)
    lam_post = float(np.sum(ratio[~pre] * gaps[~pre]) / (t_m - theta_hat))
    return lam_pre, lam_post


@dataclass(frozen=True)
class EstimandReport:
    """Named treatment-effect estimates together with the crossing
    parameters they were computed under."""

    theta_hat: float
    gamma_hat: int
    values: dict[str, float] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        out = {"theta_hat": self.theta_hat, "gamma_hat": self.gamma_hat}
        out.update(self.values)
        return out

    def rows(self) -> list[tuple[str, float]]:
        """(parameter, estimate) pairs in insertion order."""
        return list(self.values.items())


def _fmt(x: float) -> str:
    return f"{x:g}"


def build_report(
    fit: SccFit,
    tau: float | None = None,
    milestones: tuple[float, ...] = (),
    conditional_times: tuple[float, ...] = (),
    hazards: DiscreteHazards | None = None,
) -> EstimandReport:
    """Assemble the standard suite of estimands from a fitted model.

    ``tau`` defaults to the last event time.  Average hazard ratios are
    included only when the crossing estimate lies strictly inside the grid;
    ``hazards`` picks which fit's discrete hazards feed them (defaults to
    this fit's own).
    """
    t_m = float(fit.grid.times[-1])
    if tau is None:
        tau = t_m
    theta = fit.theta_hat
    values: dict[str, float] = {}
    values["theta"] = theta
    values["surv_at_crossing"] = surv_at_crossing(fit)
    values[f"rmst_diff({_fmt(tau)})"] = rmst(fit.s1, tau) - rmst(fit.s0, tau)
    try:
        values[f"rrml_diff(theta,{_fmt(tau)})"] = rrml(fit.s1, theta, tau) - rrml(
            fit.s0, theta, tau
        )
    except (ZeroSurvivalError, ValueError):
        pass
    for t in milestones:
        values[f"milestone_diff({_fmt(t)})"] = milestone_diff(fit.s1, fit.s0, t)
    for t in conditional_times:
        if t <= theta:
            continue
        try:
            values[f"cond_surv_diff({_fmt(t)})"] = conditional_survival(
                fit.s1, theta, t
            ) - conditional_survival(fit.s0, theta, t)
        except ZeroSurvivalError:
            continue
    if 0 < theta < t_m:
        h = hazards if hazards is not None else DiscreteHazards.from_fit(fit)
        pre, post = avg_hazard_ratios(h, theta, fit.grid)
        values["ahr_pre"] = pre
        values["ahr_post"] = post
    return EstimandReport(theta_hat=theta, gamma_hat=fit.gamma_hat, values=values)
