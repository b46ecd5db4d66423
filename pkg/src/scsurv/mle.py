"""Constrained nonparametric maximum likelihood over a crossing-constraint cone.

The log-likelihood is separable and concave in the log-jumps, and every
constraint is linear, so the fit is computed with a feasible-point active-set
method: at each step a diagonal quadratic model is maximized exactly on the
current working set (a small KKT solve), a ratio test keeps the iterate
feasible, and Lagrange-multiplier signs drive working-set changes.  The same
engine solves the squared-distance projection used for initialization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog, nnls

from .constraints import ConstraintSystem, CrossingParams, build_constraints
from .data import CAP, EventGrid, km_logjumps
from .errors import DimensionMismatchError, InfeasibleStartError, SolverFailureError


@dataclass(frozen=True)
class SolverOptions:
    """Convergence controls for the constrained fit."""

    tol: float = 1e-7
    max_iter: int = 500
    barrier: float = 1e-10


@dataclass(frozen=True)
class FitResult:
    """Solution of one conditional fit: log-jumps, likelihood, diagnostics."""

    u0: np.ndarray
    u1: np.ndarray
    loglik: float
    converged: bool
    kkt_residual: float
    n_iter: int


def log1mexp(x):
    """Stable log(1 - exp(x)) for x < 0, split at -log 2."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    lo = x < -np.log(2.0)
    out[lo] = np.log1p(-np.exp(x[lo]))
    out[~lo] = np.log(-np.expm1(x[~lo]))
    return out


def loglik(u0, u1, grid: EventGrid) -> float:
    """Log-likelihood of a pair of log-jump vectors.

    Returns -inf when some jump is exactly 0 at a time with observed events
    (the likelihood degenerates there).
    """
    u0 = np.asarray(u0, dtype=float)
    u1 = np.asarray(u1, dtype=float)
    if u0.shape != (grid.m,) or u1.shape != (grid.m,):
        raise DimensionMismatchError(
            f"expected two vectors of length {grid.m}, got {u0.shape} and {u1.shape}"
        )
    u = np.concatenate([u0, u1])
    d = np.concatenate([grid.d[:, 0], grid.d[:, 1]]).astype(float)
    r = np.concatenate([grid.r[:, 0], grid.r[:, 1]]).astype(float)
    return _loglik_flat(u, d, r)


def _loglik_flat(u, d, r) -> float:
    pos = d > 0
    if np.any(u[pos] >= 0):
        return -np.inf
    total = float(np.sum((r - d) * u))
    total += float(np.sum(d[pos] * log1mexp(u[pos])))
    return total


def _grad_flat(u, d, r):
    # f'(u) = (r - d) - d / (exp(-u) - 1)
    g = (r - d).astype(float)
    pos = d > 0
    g[pos] -= d[pos] / np.expm1(-u[pos])
    return g


def _hess_flat(u, d, r):
    # f''(u) = -d * exp(-u) / (exp(-u) - 1)^2
    h = np.zeros_like(u)
    pos = d > 0
    em = np.expm1(-u[pos])
    h[pos] = -d[pos] * np.exp(-u[pos]) / (em * em)
    return h


class _LogLikObjective:
    def __init__(self, grid: EventGrid):
        self.d = np.concatenate([grid.d[:, 0], grid.d[:, 1]]).astype(float)
        self.r = np.concatenate([grid.r[:, 0], grid.r[:, 1]]).astype(float)

    def value(self, u):
        return _loglik_flat(u, self.d, self.r)

    def grad(self, u):
        return _grad_flat(u, self.d, self.r)

    def hess(self, u):
        return _hess_flat(u, self.d, self.r)


class _ProjectionObjective:
    """Maximize -(u - target)^2, i.e. project onto the feasible set."""

    def __init__(self, target):
        self.target = np.asarray(target, dtype=float)

    def value(self, u):
        diff = u - self.target
        return -float(diff @ diff)

    def grad(self, u):
        return -2.0 * (u - self.target)

    def hess(self, u):
        return np.full_like(u, -2.0)


def _upper_bounds(grid: EventGrid, barrier: float) -> np.ndarray:
    """u <= 0, tightened to -barrier on coordinates with observed events
    (the objective diverges at u = 0 there)."""
    d = np.concatenate([grid.d[:, 0], grid.d[:, 1]])
    ub = np.zeros(2 * grid.m)
    ub[d > 0] = -barrier
    return ub


def _repair_to_feasible(system: ConstraintSystem, u, ub):
    """Nudge a near-feasible point into the cone exactly, or return None.

    Wrong-signed coupling values are zeroed by adjusting the jump difference
    at the offending time, preferring whichever coordinate has bound slack.
    """
    m = system.m
    u = np.clip(u, -CAP, ub)
    s = system.signs
    if system.kind == "hazard":
        e = u[:m] - u[m:]
        for k in np.flatnonzero(s * e < 0):
            mid = min(max(0.5 * (u[k] + u[m + k]), -CAP), min(ub[k], ub[m + k]))
            u[k] = u[m + k] = mid
        if system.max_violation(u[:m], u[m:]) > 1e-9:
            return None
        return u
    # survival: walk the cumulative differences, zeroing wrong-signed ones
    cum = 0.0
    for k in range(m):
        e_k = u[k] - u[m + k]
        target = cum + e_k
        if s[k] * target < 0:
            need = -cum  # e_k must become -cum so the cumsum lands on 0
            delta = need - e_k
            # apply to arm 0 first, spill the remainder onto arm 1
            new0 = u[k] + delta
            if -CAP <= new0 <= ub[k]:
                u[k] = new0
            else:
                take = min(max(new0, -CAP), ub[k]) - u[k]
                u[k] += take
                new1 = u[m + k] - (delta - take)
                if not (-CAP <= new1 <= ub[m + k]):
                    return None
                u[m + k] = new1
            target = cum + (u[k] - u[m + k])
        cum = target
    if system.max_violation(u[:m], u[m:]) > 1e-9:
        return None
    return u


def _default_start(system: ConstraintSystem, ub):
    """A feasible point that always exists: every coordinate at its upper
    bound, repaired."""
    u = ub.copy()
    out = _repair_to_feasible(system, u, ub)
    if out is None:
        raise InfeasibleStartError(
            "could not construct a feasible starting point (internal bug)"
        )
    return out


# Working-set state codes for bounds
_FREE, _AT_UPPER, _AT_LOWER = 0, 1, -1


def _active_set_maximize(obj, system, ub, start, opts):
    """Maximize a separable concave objective over the constraint cone.

    Returns (u, kkt_residual, iterations) or raises SolverFailureError.
    The iterate stays feasible throughout: a ratio test limits every step,
    tiny feasibility drift on working rows is restored explicitly, and
    working-set changes are driven by Lagrange-multiplier signs.
    """
    m = system.m
    n = 2 * m
    lb = -CAP
    C = system.coupling_matrix()
    u = start.copy()

    bstate = np.full(n, _FREE, dtype=int)
    bstate[np.abs(u - ub) <= 1e-13] = _AT_UPPER
    bstate[np.abs(u - lb) <= 1e-13] = _AT_LOWER
    vals = system.coupling_values(u[:m], u[m:])
    wset = vals <= 1e-12

    release_tol = 0.1 * opts.tol
    stalls = 0
    banned: set = set()
    it = 0
    while it < opts.max_iter:
        it += 1
        if stalls > 4 * n + 100:
            break
        g = obj.grad(u)
        h = obj.hess(u)
        # Newton model: true curvature where the objective actually bends;
        # flat (locally linear) coordinates get a floor scaled so their step
        # spans at most the full box range
        flat = h > -1e-8
        H = h.copy()
        H[flat] = -np.maximum(1e-10, np.abs(g[flat]) / (2.0 * (CAP + 1.0)))

        # working rows that drifted strictly interior are no longer active
        wset &= ~(vals > 1e-12)

        free = bstate == _FREE
        fidx = np.flatnonzero(free)
        K = np.flatnonzero(wset)
        gf = g[fidx]
        Hf = H[fidx]
        Cf = C[np.ix_(K, fidx)] if K.size else None

        # restore working rows that drifted below zero; violations at the
        # barrier scale are feasibility artifacts of the u <= -barrier box
        # and stay within the feasibility contract, so leave them alone
        restore_tol = max(1e-11, 2.0 * opts.barrier)
        drift = float(np.max(-vals[K], initial=0.0))
        if drift > restore_tol and K.size and fidx.size:
            rhs = -vals[K]
            W = Cf / Hf
            S = W @ Cf.T
            try:
                mu = np.linalg.solve(S, rhs)
            except np.linalg.LinAlgError:
                mu = np.linalg.lstsq(S, rhs, rcond=None)[0]
            p = np.zeros(n)
            p[fidx] = (Cf.T @ mu) / Hf
            step = min(1.0, _ratio_to_feasible(u, p, ub, lb, fidx, C, vals, wset))
            u_new = np.clip(u + step * p, lb, ub)
            vals_new = system.coupling_values(u_new[:m], u_new[m:])
            if float(np.max(-vals_new[K], initial=0.0)) > 0.9 * drift:
                # blocked restoration: fall back to the exact sequential repair
                repaired = _repair_to_feasible(system, u.copy(), ub)
                if repaired is not None:
                    u_new = repaired
                    vals_new = system.coupling_values(u_new[:m], u_new[m:])
                    bstate = np.full(n, _FREE, dtype=int)
                    bstate[np.abs(u_new - ub) <= 1e-13] = _AT_UPPER
                    bstate[np.abs(u_new - lb) <= 1e-13] = _AT_LOWER
            u = u_new
            vals = vals_new
            wset |= (vals <= 0.0) & ~wset
            stalls += 1
            continue

        # Newton ascent step on the working set
        lam = np.zeros(K.size)
        if fidx.size:
            if K.size:
                W = Cf / Hf
                S = W @ Cf.T
                b = W @ gf
                try:
                    lam = np.linalg.solve(S, -b)
                except np.linalg.LinAlgError:
                    lam = np.linalg.lstsq(S, -b, rcond=None)[0]
                pf = -(gf + Cf.T @ lam) / Hf
            else:
                pf = -gf / Hf
            p = np.zeros(n)
            p[fidx] = pf
            pred = float(0.5 * (Hf * pf) @ pf)  # = model ascent when C p = 0
            pred = abs(pred)
        else:
            p = np.zeros(n)
            pred = 0.0

        step_norm = float(np.max(np.abs(p), initial=0.0))
        scale = max(1.0, abs(obj.value(u)))

        lp_direction = None
        if step_norm <= 1e-10 or pred <= 1e-13 * scale:
            # the model cannot improve on this working set: certify
            # optimality with sign-constrained (NNLS) multipliers, which
            # stay well-defined on degenerate faces
            kkt = _nnls_defect(system, u, g, C, wset, bstate)
            if kkt <= opts.tol:
                return u, kkt, it
            # not optimal: release active items with clearly negative
            # least-squares multipliers, unless recently proven unhelpful
            if K.size and fidx.size:
                lam = np.linalg.lstsq(Cf.T, -gf, rcond=None)[0]
            rho = g + (C[K].T @ lam if K.size else 0.0)
            released = False
            for j, k in enumerate(K):
                if lam[j] < -release_tol and ("coupling", k) not in banned:
                    wset[k] = False
                    banned.add(("coupling", k))
                    released = True
            for i in np.flatnonzero(bstate == _AT_UPPER):
                if rho[i] < -release_tol and ("bound", i) not in banned:
                    bstate[i] = _FREE
                    banned.add(("bound", i))
                    released = True
            for i in np.flatnonzero(bstate == _AT_LOWER):
                if -rho[i] < -release_tol and ("bound", i) not in banned:
                    bstate[i] = _FREE
                    banned.add(("bound", i))
                    released = True
            if released:
                stalls += 1
                continue
            if step_norm <= 1e-13:
                # Newton is exhausted on this working set: ask an LP for the
                # best feasible direction in the unit box; a non-positive
                # gain certifies optimality exactly
                gain, d = _lp_ascent(g, C, wset, bstate)
                if gain <= opts.tol or d is None:
                    return u, max(gain, system.max_violation(u[:m], u[m:])), it
                lp_direction = d
            # else fall through: the tiny Newton step polishes the gradient
            # defect even when its value gain is below float resolution
        if lp_direction is not None:
            p = lp_direction
        elif step_norm <= 1e-13:
            stalls += 1
            continue

        # ratio test against inactive constraints, then Armijo backtracking
        alpha, blocker = _ratio_test(u, p, ub, lb, fidx, C, vals, wset)
        if alpha <= 1e-15:
            if blocker is not None:
                _engage(blocker, wset, bstate, u, ub, lb)
            stalls += 1
            continue
        F0 = obj.value(u)
        ascent = max(float(g @ p), 0.0)
        step = alpha
        accepted = False
        F1 = F0
        if lp_direction is None and step_norm <= 1e-7:
            # polish step: too small for the objective to resolve the gain,
            # safe to take outright on a concave model
            u_try = np.clip(u + step * p, lb, ub)
            F1 = obj.value(u_try)
            accepted = True
        else:
            for _ in range(60):
                u_try = np.clip(u + step * p, lb, ub)
                F1 = obj.value(u_try)
                if F1 >= F0 + 1e-4 * step * ascent - 1e-15 * scale:
                    accepted = True
                    break
                step *= 0.5
        if not accepted:
            stalls += 1
            continue
        u = u_try
        if F1 - F0 > 1e-14 * scale:
            stalls = 0
            banned.clear()
        else:
            stalls += 1
        if step == alpha and blocker is not None:
            _engage(blocker, wset, bstate, u, ub, lb)
        # refresh bound states: a step may move marked coordinates off their
        # bound (LP escape directions do this deliberately)
        stale = ((bstate == _AT_UPPER) & (np.abs(u - ub) > 1e-13)) | (
            (bstate == _AT_LOWER) & (np.abs(u - lb) > 1e-13)
        )
        bstate[stale] = _FREE
        # snap coordinates that drifted onto their bounds
        on_ub = (bstate == _FREE) & (np.abs(u - ub) <= 1e-15)
        u[on_ub] = ub[on_ub]
        bstate[on_ub] = _AT_UPPER
        on_lb = (bstate == _FREE) & (np.abs(u - lb) <= 1e-15)
        u[on_lb] = lb
        bstate[on_lb] = _AT_LOWER
        vals = system.coupling_values(u[:m], u[m:])
        wset |= (vals <= 0.0) & ~wset
    raise SolverFailureError(
        f"active-set solver did not converge within {opts.max_iter} iterations"
    )


def _engage(blocker, wset, bstate, u, ub, lb):
    kind, idx = blocker
    if kind == "coupling":
        wset[idx] = True
    elif kind == "upper":
        bstate[idx] = _AT_UPPER
        u[idx] = ub[idx]
    else:
        bstate[idx] = _AT_LOWER
        u[idx] = lb


def _ratio_test(u, p, ub, lb, fidx, C, vals, wset):
    """Largest feasible fraction of the step p and the blocking constraint."""
    alpha = 1.0
    blocker = None
    cv = C @ p
    for k in np.flatnonzero(~wset):
        if cv[k] < -1e-14:
            ratio = max(vals[k], 0.0) / (-cv[k])
            if ratio < alpha:
                alpha, blocker = ratio, ("coupling", k)
    for i in fidx:
        if p[i] > 1e-18:
            ratio = (ub[i] - u[i]) / p[i]
            if ratio < alpha:
                alpha, blocker = ratio, ("upper", i)
        elif p[i] < -1e-18:
            ratio = (u[i] - lb) / (-p[i])
            if ratio < alpha:
                alpha, blocker = ratio, ("lower", i)
    return alpha, blocker


def _ratio_to_feasible(u, p, ub, lb, fidx, C, vals, wset):
    return _ratio_test(u, p, ub, lb, fidx, C, vals, wset)[0]


def _nnls_defect(system, u, g, C, wset, bstate):
    """Absolute KKT stationarity defect via non-negative least squares.

    Fits valid (sign-constrained) multipliers on the active constraints and
    returns the sup-norm of the remaining gradient defect plus any primal
    violation; 0 at an exact KKT point.
    """
    m = system.m
    n = 2 * m
    K = np.flatnonzero(wset)
    cols = []
    for k in K:
        cols.append(C[k])
    for i in np.flatnonzero(bstate == _AT_UPPER):
        e = np.zeros(n)
        e[i] = -1.0
        cols.append(e)
    for i in np.flatnonzero(bstate == _AT_LOWER):
        e = np.zeros(n)
        e[i] = 1.0
        cols.append(e)
    if cols:
        A = np.column_stack(cols)
        try:
            x, _ = nnls(A, -g)
        except RuntimeError:
            x = np.zeros(A.shape[1])
        defect = g + A @ x
    else:
        defect = g
    res = float(np.max(np.abs(defect), initial=0.0))
    return max(res, system.max_violation(u[:m], u[m:]))


def _lp_ascent(g, C, wset, bstate):
    """Best feasible ascent direction in the unit sup-norm box.

    Maximizes g . d subject to the working coupling rows staying feasible
    (C_K d >= 0) and active bounds only letting d point inward.  The optimal
    gain is the exact maximum directional derivative, so a tiny gain is a
    rigorous optimality certificate even on degenerate faces.
    """
    n = g.shape[0]
    K = np.flatnonzero(wset)
    bounds = []
    for i in range(n):
        if bstate[i] == _AT_UPPER:
            bounds.append((-1.0, 0.0))
        elif bstate[i] == _AT_LOWER:
            bounds.append((0.0, 1.0))
        else:
            bounds.append((-1.0, 1.0))
    res = linprog(
        c=-g,
        A_ub=-C[K] if K.size else None,
        b_ub=np.zeros(K.size) if K.size else None,
        bounds=bounds,
        method="highs",
    )
    if not res.success:
        return 0.0, None
    gain = float(-res.fun)
    return gain, (res.x if gain > 0 else None)


def init_from_km(grid: EventGrid, system: ConstraintSystem, opts: SolverOptions | None = None):
    """Project the Kaplan-Meier log-jumps onto the constraint cone.

    Returns the pair (u0, u1) minimizing the squared discrepancy from the
    KM jumps subject to the crossing constraints and u <= 0.
    """
    opts = opts or SolverOptions()
    km = np.concatenate([km_logjumps(grid, 0), km_logjumps(grid, 1)])
    ub = _upper_bounds(grid, opts.barrier)
    if system.max_violation(km[: grid.m], km[grid.m :]) <= 1e-12:
        return km[: grid.m].copy(), km[grid.m :].copy()
    start = _repair_to_feasible(system, km.copy(), ub)
    if start is None:
        start = _default_start(system, ub)
    try:
        u, _, _ = _active_set_maximize(
            _ProjectionObjective(km), system, ub, start, opts
        )
    except SolverFailureError:
        raise SolverFailureError("projection of the KM jumps did not converge") from None
    return u[: grid.m], u[grid.m :]


def fit_system(
    grid: EventGrid,
    system: ConstraintSystem,
    opts: SolverOptions | None = None,
    warm=None,
) -> FitResult:
    """Maximize the log-likelihood subject to an arbitrary crossing system."""
    opts = opts or SolverOptions()
    if opts.max_iter < 1:
        raise SolverFailureError("max_iter must be at least 1")
    m = grid.m
    obj = _LogLikObjective(grid)
    km = np.concatenate([km_logjumps(grid, 0), km_logjumps(grid, 1)])
    if system.max_violation(km[:m], km[m:]) <= 1e-12:
        value = _loglik_flat(km, obj.d, obj.r)
        return FitResult(
            u0=km[:m], u1=km[m:], loglik=value, converged=True, kkt_residual=0.0, n_iter=0
        )
    ub = _upper_bounds(grid, opts.barrier)
    start = None
    if warm is not None:
        start = _repair_to_feasible(system, np.asarray(warm, dtype=float).copy(), ub)
    if start is None:
        u0_init, u1_init = init_from_km(grid, system, opts)
        start = np.concatenate([u0_init, u1_init])
    try:
        u, kkt, iters = _active_set_maximize(obj, system, ub, start, opts)
    except SolverFailureError:
        # one retry from the canonical feasible point before giving up
        start = _default_start(system, ub)
        u, kkt, iters = _active_set_maximize(obj, system, ub, start, opts)
    if kkt > opts.tol:
        raise SolverFailureError(f"KKT residual {kkt:.3e} exceeds tolerance {opts.tol:.3e}")
    return FitResult(
        u0=u[:m],
        u1=u[m:],
        loglik=_loglik_flat(u, obj.d, obj.r),
        converged=True,
        kkt_residual=kkt,
        n_iter=iters,
    )


def fit_conditional(
    grid: EventGrid, params: CrossingParams, opts: SolverOptions | None = None
) -> FitResult:
    """Constrained MLE of both log-jump vectors for fixed (theta, gamma)
    under the survival-curve crossing constraints."""
    return fit_system(grid, build_constraints(grid, params), opts)
