"""Shared generators and independent reference fitters for the test suite."""

import numpy as np
import pytest
from scipy.optimize import minimize

from scsurv.data import CAP, Cohort, build_event_grid, km_logjumps
from scsurv.mle import log1mexp


def make_cohort(times, events, arms) -> Cohort:
    return Cohort.from_arrays(times, events, arms)


def random_tied_cohort(rng, n=None, tie_scale=2.0, rate0=0.30, rate_ratio=None,
                       cens_low=0.5, cens_high=6.0):
    """Two-arm sample with coarsened times so the event grid stays small."""
    if n is None:
        n = int(rng.integers(20, 120))
    half = n // 2
    n = 2 * half
    arms = np.repeat([0, 1], half)
    ratio = rate_ratio if rate_ratio is not None else rng.uniform(0.6, 1.4)
    lam = np.where(arms == 1, rate0 * ratio, rate0)
    t = rng.exponential(1.0 / lam)
    t = np.ceil(t * tie_scale) / tie_scale
    c = rng.uniform(cens_low, cens_high, n)
    return Cohort.from_arrays(np.minimum(t, c), t <= c, arms)


def grid_or_none(cohort):
    from scsurv.errors import EmptyArmError

    try:
        return build_event_grid(cohort)
    except EmptyArmError:
        return None


def slsqp_reference_fit(grid, system, starts=(1.0, 0.5, 1.5)):
    """Independent constrained fit of the same likelihood via SciPy SLSQP.

    Multistart from scaled Kaplan-Meier jumps; returns the best objective
    value found.  Used as an external check on the active-set solver.
    """
    d = np.concatenate([grid.d[:, 0], grid.d[:, 1]]).astype(float)
    r = np.concatenate([grid.r[:, 0], grid.r[:, 1]]).astype(float)
    ub = np.where(d > 0, -1e-10, 0.0)
    x0 = np.concatenate([km_logjumps(grid, 0), km_logjumps(grid, 1)])

    def neg(u):
        pos = d > 0
        return -(
            np.sum((r - d) * u)
            + np.sum(d[pos] * log1mexp(np.minimum(u[pos], -1e-12)))
        )

    def grad(u):
        g = (r - d).copy()
        pos = d > 0
        g[pos] -= d[pos] / np.expm1(-np.minimum(u[pos], -1e-12))
        return -g

    C = system.coupling_matrix()
    cons = [{"type": "ineq", "fun": lambda u: C @ u, "jac": lambda u: C}]
    bounds = [(-CAP, hi) for hi in ub]
    best = np.inf
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for scale in starts:
            res = minimize(
                neg,
                np.clip(x0 * scale, -CAP, ub),
                jac=grad,
                method="SLSQP",
                bounds=bounds,
                constraints=cons,
                options={"maxiter": 400, "ftol": 1e-14},
            )
            best = min(best, res.fun)
    return -best


def grid_refine_fit(grid, system, rounds=9, points=7):
    """Brute-force maximization of the likelihood over the feasible cone by
    iterated grid refinement, for very small m.  Fully independent of the
    production solver."""
    d = np.concatenate([grid.d[:, 0], grid.d[:, 1]]).astype(float)
    r = np.concatenate([grid.r[:, 0], grid.r[:, 1]]).astype(float)
    dim = d.shape[0]
    ub = np.where(d > 0, -1e-6, 0.0)
    lo = np.full(dim, -6.0)
    hi = ub.copy()
    best_val = -np.inf
    best_x = None
    for _ in range(rounds):
        axes = [np.linspace(lo[i], hi[i], points) for i in range(dim)]
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim)
        feas = np.array(
            [system.max_violation(x[: dim // 2], x[dim // 2 :]) <= 1e-12 for x in mesh]
        )
        mesh = mesh[feas]
        if mesh.shape[0] == 0:
            lo = lo - 0.5
            continue
        pos = d > 0
        vals = np.sum((r - d) * mesh, axis=1)
        vals += np.sum(d[pos] * log1mexp(np.minimum(mesh[:, pos], -1e-12)), axis=1)
        k = int(np.argmax(vals))
        if vals[k] > best_val:
            best_val = float(vals[k])
            best_x = mesh[k]
        span = (hi - lo) / (points - 1)
        lo = np.maximum(best_x - span, -12.0)
        hi = np.minimum(best_x + span, ub)
    return best_val, best_x


@pytest.fixture
def rng():
    return np.random.default_rng(20260811)
