"""Piecewise-exponential data generation and the estimator MSE study."""

from __future__ import annotations

import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import Cohort, bin_followup, build_event_grid, kaplan_meier
from .errors import EmptyArmError, ScsurvError, SolverFailureError, ZeroSurvivalError
from .estimands import milestone_diff, rmst, rrml, surv_at_crossing
from .mle import SolverOptions
from .profile import scc_fit

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class PiecewiseExp:
    """Survival law with constant hazard on each interval between
    breakpoints (an implicit interval starts at 0)."""

    breakpoints: tuple[float, ...]
    rates: tuple[float, ...]

    def __post_init__(self):
        bp = tuple(float(b) for b in self.breakpoints)
        rt = tuple(float(r) for r in self.rates)
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "rates", rt)
        if len(rt) != len(bp) + 1:
            raise ValueError("need exactly one rate per interval (breakpoints + 1)")
        if any(r <= 0 for r in rt):
            raise ValueError("all hazard rates must be positive")
        if any(b <= 0 for b in bp) or any(
            b2 <= b1 for b1, b2 in zip(bp, bp[1:])
        ):
            raise ValueError("breakpoints must be positive and increasing")

    def _knots(self) -> np.ndarray:
        return np.concatenate([[0.0], np.asarray(self.breakpoints)])

    def cumhaz(self, t):
        """Cumulative hazard H(t), vectorized."""
        t = np.asarray(t, dtype=float)
        knots = self._knots()
        rates = np.asarray(self.rates)
        exposure = np.clip(t[..., None] - knots, 0.0, None)
        widths = np.diff(np.concatenate([knots, [np.inf]]))
        exposure = np.minimum(exposure, widths)
        return np.sum(rates * exposure, axis=-1)

    def survival(self, t):
        """P(T > t) = exp(-H(t))."""
        out = np.exp(-self.cumhaz(t))
        return float(out) if out.ndim == 0 else out

    def integrated_survival(self, a: float, b: float) -> float:
        """Exact integral of the survival function over [a, b]."""
        if b <= a:
            return 0.0
        knots = list(self._knots()) + [np.inf]
        total = 0.0
        for i, rate in enumerate(self.rates):
            lo = max(knots[i], a)
            hi = min(knots[i + 1], b)
            if hi <= lo:
                continue
            s_lo = self.survival(lo)
            total += s_lo * (1.0 - np.exp(-rate * (hi - lo))) / rate
        return float(total)

    def quantile_from_cumhaz(self, target: float) -> float:
        """Inverse of the cumulative hazard (exact, piecewise linear)."""
        knots = self._knots()
        h = 0.0
        for i, rate in enumerate(self.rates):
            width = (knots[i + 1] - knots[i]) if i + 1 < knots.size else np.inf
            gain = rate * width
            if target <= h + gain:
                return float(knots[i] + (target - h) / rate)
            h += gain
        return float(knots[-1] + (target - h) / self.rates[-1])

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Inverse-transform sampling through the cumulative hazard."""
        e = rng.exponential(size=size)
        return np.array([self.quantile_from_cumhaz(x) for x in e])


def pwexp_survival(dist: PiecewiseExp, t) -> float:
    """Survival function of a piecewise-exponential law."""
    return dist.survival(t)


def sample(dist: PiecewiseExp, rng: np.random.Generator, size: int = 1) -> np.ndarray:
    return dist.sample(rng, size)


def crossing_times(dist0: PiecewiseExp, dist1: PiecewiseExp) -> list[float]:
    """Times where the two survival curves swap strict dominance order.

    S_0 >= S_1 exactly when H_0 <= H_1, and the cumulative-hazard difference
    is piecewise linear, so sign changes are found exactly.
    """
    knots = np.unique(
        np.concatenate([dist0._knots(), dist1._knots()])
    )
    diff = dist0.cumhaz(knots) - dist1.cumhaz(knots)
    slopes = []
    for i in range(knots.size):
        r0 = dist0.rates[np.searchsorted(dist0._knots(), knots[i], side="right") - 1]
        r1 = dist1.rates[np.searchsorted(dist1._knots(), knots[i], side="right") - 1]
        slopes.append(r0 - r1)
    crossings = []
    sign = 0.0
    for i in range(knots.size):
        start, slope, value = knots[i], slopes[i], diff[i]
        end = knots[i + 1] if i + 1 < knots.size else np.inf
        if sign == 0.0 and abs(value) > 1e-15:
            sign = np.sign(value)
        if slope == 0.0:
            continue
        root = start + (0.0 - value) / slope
        if start < root < end or (root == end and end != np.inf):
            new_sign = np.sign(slope)
            if sign != 0.0 and new_sign != sign:
                crossings.append(float(root))
            sign = new_sign
        elif root <= start and abs(value) <= 1e-15:
            # leaves zero immediately in the slope's direction
            new_sign = np.sign(slope)
            if sign != 0.0 and new_sign != sign:
                crossings.append(float(start))
            sign = new_sign
    return crossings


@dataclass(frozen=True)
class ScenarioSpec:
    """One simulation design: two laws, a censoring window, and the implied
    crossing truth (validated at construction)."""

    label: str
    dist0: PiecewiseExp
    dist1: PiecewiseExp
    censoring: tuple[float, float] | None
    true_theta: float | None
    true_gamma: int | None

    def __post_init__(self):
        if self.censoring is not None:
            lo, hi = self.censoring
            if not 0 <= lo < hi:
                raise ValueError(f"bad censoring window {self.censoring}")
        roots = crossing_times(self.dist0, self.dist1)
        if self.true_theta is None:
            if len(roots) < 2:
                raise ValueError(
                    f"{self.label}: true_theta omitted but the laws cross "
                    f"{len(roots)} time(s)"
                )
            return
        if len(roots) > 1:
            raise ValueError(
                f"{self.label}: laws cross {len(roots)} times; true_theta "
                "must be omitted"
            )
        implied = roots[0] if roots else 0.0
        if abs(implied - self.true_theta) > 1e-9:
            raise ValueError(
                f"{self.label}: stated crossing {self.true_theta} does not "
                f"match the analytic crossing {implied}"
            )
        if self.true_gamma not in (-1, 1):
            raise ValueError(f"{self.label}: true_gamma must be -1 or +1")
        # gamma=+1: control on top before the crossing; with theta = 0 the
        # pre-crossing region is empty and the same value means the treatment
        # curve dominates everywhere
        if roots:
            probe = roots[0] / 2.0
            gap = self.dist0.cumhaz(probe) - self.dist1.cumhaz(probe)
            implied_gamma = 1 if gap < 0 else -1
        else:
            horizon = max(
                [1.0, *self.dist0.breakpoints, *self.dist1.breakpoints]
            )
            gaps = self.dist0.cumhaz(np.linspace(0.1, horizon + 1.0, 50)) - (
                self.dist1.cumhaz(np.linspace(0.1, horizon + 1.0, 50))
            )
            worst = gaps[np.argmax(np.abs(gaps))]
            if abs(worst) <= 1e-12:
                return  # identical laws: either gamma is acceptable
            implied_gamma = 1 if worst > 0 else -1
        if implied_gamma != self.true_gamma:
            raise ValueError(
                f"{self.label}: stated gamma {self.true_gamma:+d} does not "
                f"match the laws (implied {implied_gamma:+d})"
            )


TABLE_PARAMS = (
    "rmst_diff",
    "milestone_diff(2)",
    "milestone_diff(4)",
    "theta",
    "surv_at_crossing",
    "rrml_diff",
)
KM_PARAMS = ("rmst_diff", "milestone_diff(2)", "milestone_diff(4)")


def true_estimands(spec: ScenarioSpec, tau: float = 7.0) -> dict[str, float | None]:
    """Closed-form values of the study parameters for one scenario."""
    d0, d1 = spec.dist0, spec.dist1
    out: dict[str, float | None] = {
        "rmst_diff": d1.integrated_survival(0, tau) - d0.integrated_survival(0, tau),
        "milestone_diff(2)": d1.survival(2.0) - d0.survival(2.0),
        "milestone_diff(4)": d1.survival(4.0) - d0.survival(4.0),
    }
    if spec.true_theta is None:
        out["theta"] = None
        out["surv_at_crossing"] = None
        out["rrml_diff"] = None
        return out
    theta = spec.true_theta
    out["theta"] = theta
    out["surv_at_crossing"] = 0.5 * (d0.survival(theta) + d1.survival(theta))
    out["rrml_diff"] = d1.integrated_survival(theta, tau) / d1.survival(
        theta
    ) - d0.integrated_survival(theta, tau) / d0.survival(theta)
    return out


@dataclass(frozen=True)
class ReplicateRecord:
    """Per-replicate log entry of the study."""

    scenario: str
    n: int
    rep: int
    event_fraction: float
    failed: bool
    scc: dict[str, float] = field(default_factory=dict)
    km: dict[str, float] = field(default_factory=dict)


@dataclass
class MseTable:
    """Mean-squared errors per (scenario, n, estimator, parameter)."""

    mse: dict[tuple[str, int, str, str], float]
    counts: dict[tuple[str, int], int]
    failures: dict[tuple[str, int], int]
    records: list[ReplicateRecord]

    def get(self, scenario: str, n: int, estimator: str, param: str) -> float:
        return self.mse[(scenario, n, estimator, param)]


def _simulate_cohort(spec: ScenarioSpec, n: int, rng: np.random.Generator) -> Cohort:
    half = n // 2
    t0 = spec.dist0.sample(rng, half)
    t1 = spec.dist1.sample(rng, n - half)
    t = np.concatenate([t0, t1])
    arms = np.concatenate([np.zeros(half, dtype=int), np.ones(n - half, dtype=int)])
    if spec.censoring is None:
        return Cohort.from_arrays(t, np.ones(n, dtype=bool), arms)
    c = rng.uniform(spec.censoring[0], spec.censoring[1], size=n)
    return Cohort.from_arrays(np.minimum(t, c), t <= c, arms)


def _replicate(
    spec: ScenarioSpec,
    n: int,
    rep: int,
    stream: int,
    seed: int,
    tau: float,
    bin_width: float | None,
    opts: SolverOptions,
) -> ReplicateRecord:
    from .rng import replicate_rng

    rng = replicate_rng(seed, stream)
    cohort = _simulate_cohort(spec, n, rng)
    event_fraction = float(np.mean(cohort.events))
    if bin_width:
        cohort = bin_followup(cohort, bin_width)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fit = scc_fit(cohort, opts)
            grid = fit.grid
            km0, km1 = kaplan_meier(grid, 0), kaplan_meier(grid, 1)
            if fit.theta_hat < tau:
                rrml_est = rrml(fit.s1, fit.theta_hat, tau) - rrml(
                    fit.s0, fit.theta_hat, tau
                )
            else:
                rrml_est = 0.0  # no restricted residual life past truncation
            scc = {
                "rmst_diff": rmst(fit.s1, tau) - rmst(fit.s0, tau),
                "milestone_diff(2)": milestone_diff(fit.s1, fit.s0, 2.0),
                "milestone_diff(4)": milestone_diff(fit.s1, fit.s0, 4.0),
                "theta": fit.theta_hat,
                "surv_at_crossing": surv_at_crossing(fit),
                "rrml_diff": rrml_est,
            }
            km = {
                "rmst_diff": rmst(km1, tau) - rmst(km0, tau),
                "milestone_diff(2)": milestone_diff(km1, km0, 2.0),
                "milestone_diff(4)": milestone_diff(km1, km0, 4.0),
            }
    except (EmptyArmError, SolverFailureError, ZeroSurvivalError):
        return ReplicateRecord(
            scenario=spec.label, n=n, rep=rep,
            event_fraction=event_fraction, failed=True,
        )
    return ReplicateRecord(
        scenario=spec.label, n=n, rep=rep,
        event_fraction=event_fraction, failed=False, scc=scc, km=km,
    )


def run_mse_study(
    specs: list[ScenarioSpec],
    ns: list[int],
    reps: int,
    seed: int,
    tau: float = 7.0,
    bin_width: float | None = None,
    opts: SolverOptions | None = None,
    workers: int = 1,
) -> MseTable:
    """Monte Carlo comparison of constrained and Kaplan-Meier estimators.

    Each replicate draws an evenly split two-arm sample, censors it, fits
    the single-crossing model, and scores every study parameter against the
    scenario's analytic truth.  Failed replicates are excluded and counted.
    Results do not depend on ``workers``.
    """
    if reps < 1:
        raise ValueError(f"reps must be >= 1, got {reps}")
    opts = opts or SolverOptions()
    tasks = []
    for si, spec in enumerate(specs):
        for ni, n in enumerate(ns):
            for rep in range(reps):
                stream = (si * len(ns) + ni) * reps + rep
                tasks.append((spec, n, rep, stream, seed, tau, bin_width, opts))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_replicate_star, tasks, chunksize=8))
    else:
        records = [_replicate_star(t) for t in tasks]

    mse: dict[tuple[str, int, str, str], float] = {}
    counts: dict[tuple[str, int], int] = {}
    failures: dict[tuple[str, int], int] = {}
    for spec in specs:
        truth = true_estimands(spec, tau)
        for n in ns:
            cell = [
                r for r in records if r.scenario == spec.label and r.n == n
            ]
            good = [r for r in cell if not r.failed]
            counts[(spec.label, n)] = len(good)
            failures[(spec.label, n)] = len(cell) - len(good)
            if not good:
                continue
            for param in TABLE_PARAMS:
                if truth[param] is None:
                    continue
                errs = [(r.scc[param] - truth[param]) ** 2 for r in good]
                mse[(spec.label, n, "scc", param)] = float(np.mean(errs))
                if param in KM_PARAMS:
                    errs = [(r.km[param] - truth[param]) ** 2 for r in good]
                    mse[(spec.label, n, "km", param)] = float(np.mean(errs))
    return MseTable(mse=mse, counts=counts, failures=failures, records=records)


def _replicate_star(args) -> ReplicateRecord:
    return _replicate(*args)


@dataclass(frozen=True)
class StudyConfig:
    """Parsed contents of a study configuration file."""

    scenarios: list[ScenarioSpec]
    ns: list[int]
    reps: int
    seed: int | None
    tau: float
    bin_width: float | None


def load_study_config(path) -> StudyConfig:
    """Read a TOML study description (scenario laws, sizes, seed)."""
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    study = raw.get("study", {})
    scenarios = []
    for sc in raw.get("scenario", []):
        try:
            spec = ScenarioSpec(
                label=str(sc["label"]),
                dist0=PiecewiseExp(
                    breakpoints=tuple(sc.get("control_breakpoints", ())),
                    rates=tuple(sc["control_rates"]),
                ),
                dist1=PiecewiseExp(
                    breakpoints=tuple(sc.get("treatment_breakpoints", ())),
                    rates=tuple(sc["treatment_rates"]),
                ),
                censoring=tuple(sc["censoring"]) if "censoring" in sc else None,
                true_theta=sc.get("true_theta"),
                true_gamma=sc.get("true_gamma"),
            )
        except KeyError as err:
            raise ScsurvError(f"{path}: scenario missing key {err}") from None
        scenarios.append(spec)
    if not scenarios:
        raise ScsurvError(f"{path}: no [[scenario]] tables found")
    return StudyConfig(
        scenarios=scenarios,
        ns=[int(x) for x in study.get("ns", [200, 400, 800])],
        reps=int(study.get("replications", 200)),
        seed=study.get("seed"),
        tau=float(study.get("tau", 7.0)),
        bin_width=study.get("bin_width"),
    )
