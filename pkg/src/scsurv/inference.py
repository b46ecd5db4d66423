"""Stratified bootstrap confidence intervals, joint tests, permutation test."""

from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data import Cohort
from .errors import (
    EmptyArmError,
    ReplicateFailureWarning,
    SolverFailureError,
    ZeroSurvivalError,
)
from .mle import SolverOptions
from .profile import scc_fit
from .rng import replicate_rng

# Fraction of failed replicates above which a warning is raised.
FAILURE_WARN_LEVEL = 0.01


@dataclass(frozen=True)
class BootstrapResult:
    """Percentile bootstrap summary for one estimand."""

    estimand: str
    point: float
    replicates: np.ndarray
    ci_lower: float
    ci_upper: float
    level: float
    B: int
    seed: int
    failures: int

    def to_json_dict(self) -> dict:
        return {
            "estimand": self.estimand,
            "point": self.point,
            "level": self.level,
            "B": self.B,
            "seed": self.seed,
            "ci": [self.ci_lower, self.ci_upper],
            "failures": self.failures,
        }


@dataclass(frozen=True)
class JointTestResult:
    """One-sided bootstrap test of a joint efficacy/crossing hypothesis."""

    eta: float
    ci_lower: float
    reject: bool
    spec: dict

    def to_json_dict(self) -> dict:
        return {
            "eta": self.eta,
            "ci_lower": self.ci_lower,
            "reject": self.reject,
            "spec": dict(self.spec),
        }


def _resample_stratified(cohort: Cohort, rng: np.random.Generator) -> Cohort:
    """Resample subjects with replacement within each treatment arm."""
    arms = cohort.arms
    times = cohort.times
    events = cohort.events
    pick = []
    for a in (0, 1):
        idx = np.flatnonzero(arms == a)
        pick.append(rng.choice(idx, size=idx.size, replace=True))
    pick = np.concatenate(pick)
    return Cohort.from_arrays(times[pick], events[pick], arms[pick])


def _bootstrap_one(cohort: Cohort, estimand, b: int, seed: int) -> float | None:
    rng = replicate_rng(seed, b)
    sample = _resample_stratified(cohort, rng)
    try:
        return float(estimand(sample))
    except (EmptyArmError, SolverFailureError, ZeroSurvivalError):
        return None


def bootstrap_replicates(
    cohort: Cohort,
    estimand: Callable[[Cohort], float],
    B: int,
    seed: int,
    workers: int = 1,
) -> tuple[np.ndarray, int]:
    """Stratified bootstrap replicates of an estimand.

    Replicates on which the pipeline degenerates (an arm without events, or
    a solver failure) are dropped; the count of drops is returned alongside.
    Each replicate has its own RNG substream, so the result is independent
    of ``workers``; with ``workers > 1`` the estimand must be picklable.
    """
    if B < 1:
        raise ValueError(f"B must be >= 1, got {B}")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            raw = list(
                pool.map(
                    _bootstrap_star,
                    [(cohort, estimand, b, seed) for b in range(B)],
                    chunksize=max(1, B // (4 * workers)),
                )
            )
    else:
        raw = [_bootstrap_one(cohort, estimand, b, seed) for b in range(B)]
    values = [v for v in raw if v is not None]
    failures = B - len(values)
    if failures > FAILURE_WARN_LEVEL * B:
        warnings.warn(
            f"{failures} of {B} bootstrap replicates failed and were excluded",
            ReplicateFailureWarning,
            stacklevel=2,
        )
    return np.asarray(values), failures


def _bootstrap_star(args) -> float | None:
    return _bootstrap_one(*args)


def stratified_bootstrap(
    cohort: Cohort,
    estimand: Callable[[Cohort], float],
    B: int,
    level: float = 0.95,
    seed: int = 0,
    estimand_id: str = "estimand",
    workers: int = 1,
) -> BootstrapResult:
    """Percentile confidence interval from within-arm resampling.

    Quantiles use linear interpolation of order statistics (numpy default),
    so intervals are reproducible bit for bit for a fixed seed.
    """
    if not 0 < level < 1:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    reps, failures = bootstrap_replicates(cohort, estimand, B, seed, workers)
    if reps.size == 0:
        raise SolverFailureError("every bootstrap replicate failed")
    alpha = (1.0 - level) / 2.0
    return BootstrapResult(
        estimand=estimand_id,
        point=float(estimand(cohort)),
        replicates=reps,
        ci_lower=float(np.quantile(reps, alpha)),
        ci_upper=float(np.quantile(reps, 1.0 - alpha)),
        level=level,
        B=B,
        seed=seed,
        failures=failures,
    )


def _scc_theta(cohort: Cohort, opts: SolverOptions | None, constraint: str) -> float:
    return scc_fit(cohort, opts, constraint=constraint).theta_hat


def _scc_surv_at_theta(cohort: Cohort, opts: SolverOptions | None, constraint: str) -> float:
    fit = scc_fit(cohort, opts, constraint=constraint)
    return float(fit.s1.evaluate(fit.theta_hat))


class _EtaTheta:
    """eta_1 = min(phi - phi*, theta* - theta_hat), picklable."""

    def __init__(self, phi, phi_star, theta_star, opts, constraint):
        self.phi = phi
        self.phi_star = phi_star
        self.theta_star = theta_star
        self.opts = opts
        self.constraint = constraint

    def __call__(self, cohort: Cohort) -> float:
        return min(
            self.phi(cohort) - self.phi_star,
            self.theta_star - _scc_theta(cohort, self.opts, self.constraint),
        )


class _EtaSurv:
    """eta_2 = min(phi - phi*, S_1(theta_hat) - p*), picklable."""

    def __init__(self, phi, phi_star, p_star, opts, constraint):
        self.phi = phi
        self.phi_star = phi_star
        self.p_star = p_star
        self.opts = opts
        self.constraint = constraint

    def __call__(self, cohort: Cohort) -> float:
        return min(
            self.phi(cohort) - self.phi_star,
            _scc_surv_at_theta(cohort, self.opts, self.constraint) - self.p_star,
        )


def joint_test_theta(
    cohort: Cohort,
    phi: Callable[[Cohort], float],
    phi_star: float,
    theta_star: float,
    B: int,
    level: float = 0.95,
    seed: int = 0,
    opts: SolverOptions | None = None,
    constraint: str = "survival",
    workers: int = 1,
) -> JointTestResult:
    """Test of "efficacy exceeds phi* and the crossing occurs before
    theta*" via a one-sided bootstrap interval for
    eta = min(phi - phi*, theta* - theta).

    theta* = 0 is allowed and makes the alternative unattainable.
    """
    if theta_star < 0:
        raise ValueError(f"theta_star must be >= 0, got {theta_star}")
    eta = _EtaTheta(phi, phi_star, theta_star, opts, constraint)
    return _one_sided_test(
        cohort, eta, B, level, seed, workers,
        spec={"phi_star": phi_star, "theta_star": theta_star, "level": level,
              "B": B, "seed": seed},
    )


def joint_test_surv(
    cohort: Cohort,
    phi: Callable[[Cohort], float],
    phi_star: float,
    p_star: float,
    B: int,
    level: float = 0.95,
    seed: int = 0,
    opts: SolverOptions | None = None,
    constraint: str = "survival",
    workers: int = 1,
) -> JointTestResult:
    """Test of "efficacy exceeds phi* and survival at the crossing exceeds
    p*" via eta = min(phi - phi*, S_1(theta) - p*).

    p* = 0 is allowed and reduces the test to the efficacy component.
    """
    if not 0 <= p_star < 1:
        raise ValueError(f"p_star must lie in [0, 1), got {p_star}")
    eta = _EtaSurv(phi, phi_star, p_star, opts, constraint)
    return _one_sided_test(
        cohort, eta, B, level, seed, workers,
        spec={"phi_star": phi_star, "p_star": p_star, "level": level,
              "B": B, "seed": seed},
    )


def _one_sided_test(cohort, eta, B, level, seed, workers, spec) -> JointTestResult:
    if not 0 < level < 1:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    reps, failures = bootstrap_replicates(cohort, eta, B, seed, workers)
    if reps.size == 0:
        raise SolverFailureError("every bootstrap replicate failed")
    lower = float(np.quantile(reps, 1.0 - level))
    spec = dict(spec)
    spec["failures"] = failures
    return JointTestResult(
        eta=float(eta(cohort)), ci_lower=lower, reject=bool(lower > 0), spec=spec
    )


def _permute_one(cohort_parts, statistic, b, seed) -> np.ndarray:
    times, events, arms = cohort_parts
    rng = replicate_rng(seed, b)
    perm = rng.permutation(arms.shape[0])
    sample = Cohort.from_arrays(times, events, arms[perm])
    return np.atleast_1d(np.asarray(statistic(sample), dtype=float))


def _permute_star(args) -> np.ndarray:
    return _permute_one(*args)


def permutation_test(
    cohort: Cohort,
    statistic: Callable[[Cohort], float | Sequence[float]],
    B: int,
    seed: int = 0,
    directions: Sequence[str] = ("greater",),
    workers: int = 1,
) -> float:
    """Monte Carlo permutation p-value under random arm-label permutations.

    ``directions`` states, per statistic component, whether larger
    ("greater") or smaller ("less") values are more extreme; a permuted
    statistic counts when every component is at least as extreme as the
    observed one.  The p-value is (count + 1) / (B + 1).
    """
    if B < 1:
        raise ValueError(f"B must be >= 1, got {B}")
    for d in directions:
        if d not in ("greater", "less"):
            raise ValueError(f"direction must be 'greater' or 'less', got {d!r}")
    observed = np.atleast_1d(np.asarray(statistic(cohort), dtype=float))
    if observed.size != len(directions):
        raise ValueError(
            f"statistic has {observed.size} components but "
            f"{len(directions)} directions were given"
        )
    signs = np.array([1.0 if d == "greater" else -1.0 for d in directions])
    parts = (cohort.times, cohort.events, cohort.arms)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            values = list(
                pool.map(
                    _permute_star,
                    [(parts, statistic, b, seed) for b in range(B)],
                    chunksize=max(1, B // (4 * workers)),
                )
            )
    else:
        values = [_permute_one(parts, statistic, b, seed) for b in range(B)]
    count = 0
    for value in values:
        if np.all(signs * value >= signs * observed - 1e-15):
            count += 1
    return (count + 1) / (B + 1)
