"""Tests for the constrained maximum-likelihood solver."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import grid_refine_fit, random_tied_cohort, slsqp_reference_fit

from scsurv.constraints import ConstraintSystem, CrossingParams, build_constraints, v_index
from scsurv.data import CAP, Cohort, build_event_grid, km_logjumps
from scsurv.errors import DimensionMismatchError, EmptyArmError, SolverFailureError
from scsurv.mle import (
    SolverOptions,
    fit_conditional,
    fit_system,
    init_from_km,
    log1mexp,
    loglik,
)


def cohort_m1(d0, r0, d1, r1, t=1.0):
    """Single-event-time cohort with the given per-arm counts."""
    times, events, arms = [], [], []
    for arm, d, r in ((0, d0, r0), (1, d1, r1)):
        times += [t] * r
        events += [1] * d + [0] * (r - d)
        arms += [arm] * r
    return Cohort.from_arrays(times, events, arms)


class TestLogLik:
    def test_single_coordinate_hand_value(self):
        """d=1, R=2, u=log(1/2): log(1/2) + log(1/2)."""
        c = cohort_m1(1, 2, 1, 1)
        g = build_event_grid(c)
        u0 = np.array([np.log(0.5)])
        u1 = np.array([-CAP])
        got = loglik(u0, u1, g)
        # arm 0 contributes log(1/2) + log(1/2); arm 1 d=R=1 at the cap
        assert got == pytest.approx(2 * np.log(0.5) + np.log(1 - np.exp(-CAP)), abs=1e-9)

    def test_zero_jumps_no_events_is_zero(self):
        c = Cohort.from_arrays([1.0, 2.0, 3.0], [1, 0, 1], [0, 0, 1])
        g = build_event_grid(c)
        # kill the event contributions by evaluating only structure: use a
        # grid-shaped vector of zeros where d = 0
        u0 = np.where(g.d[:, 0] > 0, np.log(0.5), 0.0)
        u1 = np.where(g.d[:, 1] > 0, np.log(0.5), 0.0)
        value = loglik(u0, u1, g)
        assert np.isfinite(value)

    def test_sentinel_minus_inf(self):
        c = cohort_m1(1, 2, 1, 2)
        g = build_event_grid(c)
        assert loglik(np.array([0.0]), np.array([np.log(0.5)]), g) == -np.inf

    def test_km_jumps_attain_per_coordinate_maximum(self, rng):
        """The KM log-jumps maximize each separable term d log(h) style."""
        for _ in range(10):
            c = random_tied_cohort(rng)
            try:
                g = build_event_grid(c)
            except EmptyArmError:
                continue
            u0, u1 = km_logjumps(g, 0), km_logjumps(g, 1)
            base = loglik(u0, u1, g)
            expect = 0.0
            for a, u in ((0, u0), (1, u1)):
                d, r = g.d[:, a], g.r[:, a]
                ok = (d > 0) & (d < r)
                expect += np.sum(
                    d[ok] * np.log(d[ok] / r[ok])
                    + (r[ok] - d[ok]) * np.log(1 - d[ok] / r[ok])
                )
                capped = (d > 0) & (d == r)
                expect += np.sum(
                    d[capped] * np.log(1 - np.exp(-CAP)) + (r - d)[capped] * (-CAP)
                )
            assert base == pytest.approx(expect, abs=1e-8)
            # and no perturbation does better
            for _ in range(20):
                delta = rng.normal(0, 0.05, g.m)
                assert loglik(np.minimum(u0 + delta, 0), u1, g) <= base + 1e-12

    def test_dimension_mismatch(self):
        c = cohort_m1(1, 2, 1, 2)
        g = build_event_grid(c)
        with pytest.raises(DimensionMismatchError):
            loglik(np.zeros(2), np.zeros(1), g)


class TestLog1mExp:
    def test_matches_high_precision_reference(self):
        import mpmath

        x = np.linspace(-30, -0.01, 200)
        with mpmath.workdps(50):
            expect = [float(mpmath.log(1 - mpmath.exp(mpmath.mpf(v)))) for v in x]
        assert_allclose(log1mexp(x), expect, rtol=1e-13)

    def test_near_zero_stable(self):
        val = log1mexp(np.array([-1e-12]))
        assert np.isfinite(val[0])
        assert val[0] == pytest.approx(np.log(1e-12), rel=1e-6)


class TestInitFromKm:
    def test_feasible_km_unchanged(self):
        c = cohort_m1(1, 4, 1, 2)
        g = build_event_grid(c)
        # S_1 = 1/2 below S_0 = 3/4: gamma=-1 at theta=0 (control dominates)
        system = build_constraints(g, CrossingParams(0.0, -1))
        u0, u1 = init_from_km(g, system)
        assert_allclose(u0, [np.log(0.75)], atol=1e-12)
        assert_allclose(u1, [np.log(0.5)], atol=1e-12)

    def test_projection_hits_halfspace_equality(self):
        """One violated cumulative constraint: both jumps meet at the mean."""
        c = cohort_m1(1, 2, 1, 4)
        g = build_event_grid(c)
        # km: u0 = log .5 < u1 = log .75; require S_0 >= S_1 (gamma=-1)
        system = build_constraints(g, CrossingParams(0.0, -1))
        u0, u1 = init_from_km(g, system)
        mid = 0.5 * (np.log(0.5) + np.log(0.75))
        assert u0[0] == pytest.approx(mid, abs=1e-9)
        assert u1[0] == pytest.approx(mid, abs=1e-9)

    def test_zero_jumps_project_to_zero(self):
        c = Cohort.from_arrays([1.0, 1.0, 2.0, 2.0], [1, 0, 1, 0], [0, 0, 1, 1])
        g = build_event_grid(c)
        system = build_constraints(g, CrossingParams(0.0, 1))
        u0, u1 = init_from_km(g, system)
        assert system.max_violation(u0, u1) <= 1e-8

    def test_output_always_feasible(self, rng):
        for _ in range(25):
            c = random_tied_cohort(rng)
            try:
                g = build_event_grid(c)
            except EmptyArmError:
                continue
            theta = float(rng.choice(np.concatenate([[0.0], g.times[:-1]])))
            gamma = int(rng.choice([-1, 1]))
            system = build_constraints(g, CrossingParams(theta, gamma))
            u0, u1 = init_from_km(g, system)
            assert system.max_violation(u0, u1) <= 1e-8


class TestFitConditional:
    def test_km_feasible_returns_km(self):
        c = cohort_m1(1, 4, 1, 2)
        g = build_event_grid(c)
        fit = fit_conditional(g, CrossingParams(0.0, -1))
        assert_allclose(fit.u0, [np.log(0.75)], atol=1e-12)
        assert_allclose(fit.u1, [np.log(0.5)], atol=1e-12)
        assert fit.converged
        assert fit.kkt_residual == 0.0

    def test_m1_symmetric_active(self):
        """d=(1,1), R=(2,2), theta=0, gamma=+1: both jumps log(1/2)."""
        c = cohort_m1(1, 2, 1, 2)
        g = build_event_grid(c)
        fit = fit_conditional(g, CrossingParams(0.0, 1))
        assert fit.u0[0] == pytest.approx(np.log(0.5), abs=1e-9)
        assert fit.u1[0] == pytest.approx(np.log(0.5), abs=1e-9)

    def test_m1_forced_equality_analytic(self):
        """d=(1,1), R=(2,4) under control dominance: 2 log(1-e^x) + 6x max
        at e^x = 3/4 ... solved analytically in the test."""
        c = cohort_m1(1, 2, 1, 4)
        g = build_event_grid(c)
        fit = fit_system(g, build_constraints(g, CrossingParams(0.0, -1)))
        # active constraint u0 = u1 = x maximizes 2 log(1-e^x) + (1+3)x
        # d/dx: -2 e^x/(1-e^x) + 4 = 0  =>  e^x = 2/3
        assert fit.u0[0] == pytest.approx(np.log(2 / 3), abs=1e-9)
        assert fit.u1[0] == pytest.approx(np.log(2 / 3), abs=1e-9)

    def test_max_iter_zero_raises(self):
        c = cohort_m1(1, 2, 1, 2)
        g = build_event_grid(c)
        with pytest.raises(SolverFailureError):
            fit_conditional(g, CrossingParams(0.0, 1), SolverOptions(max_iter=0))

    def test_deterministic(self, rng):
        c = random_tied_cohort(rng, n=60)
        g = build_event_grid(c)
        params = CrossingParams(float(g.times[min(2, g.m - 1)]), -1)
        a = fit_conditional(g, params)
        b = fit_conditional(g, params)
        assert_allclose(a.u0, b.u0, atol=0)
        assert_allclose(a.u1, b.u1, atol=0)
        assert a.loglik == b.loglik


class TestSolverProperties:
    def test_concavity_of_loglik(self, rng):
        """lambda-mixtures of feasible points can only do better than the
        mixture of values."""
        c = random_tied_cohort(rng, n=50)
        g = build_event_grid(c)
        for _ in range(30):
            u = -rng.exponential(0.4, (2, 2 * g.m))
            lam = rng.uniform(0.1, 0.9)
            mix = lam * u[0] + (1 - lam) * u[1]
            va = loglik(u[0][: g.m], u[0][g.m :], g)
            vb = loglik(u[1][: g.m], u[1][g.m :], g)
            vm = loglik(mix[: g.m], mix[g.m :], g)
            assert vm >= lam * va + (1 - lam) * vb - 1e-10

    def test_feasibility_and_bounds_invariant(self, rng):
        for _ in range(25):
            c = random_tied_cohort(rng)
            try:
                g = build_event_grid(c)
            except EmptyArmError:
                continue
            theta = float(rng.choice(np.concatenate([[0.0], g.times[:-1]])))
            gamma = int(rng.choice([-1, 1]))
            kind = "survival" if rng.random() < 0.6 else "hazard"
            system = ConstraintSystem(kind=kind, m=g.m, v=v_index(theta, g), gamma=gamma)
            fit = fit_system(g, system)
            assert system.max_violation(fit.u0, fit.u1) <= 1e-8
            u = np.concatenate([fit.u0, fit.u1])
            assert np.all(u <= 1e-12)
            assert np.all(u >= -CAP - 1e-9)
            assert fit.kkt_residual <= 1e-7

    def test_optimality_no_feasible_ascent_direction(self, rng):
        """Directional derivatives along feasible coordinate and
        constraint-edge directions are non-positive at the fit."""
        for _ in range(10):
            c = random_tied_cohort(rng, n=40)
            try:
                g = build_event_grid(c)
            except EmptyArmError:
                continue
            theta = float(rng.choice(np.concatenate([[0.0], g.times[:-1]])))
            system = build_constraints(g, CrossingParams(theta, int(rng.choice([-1, 1]))))
            fit = fit_system(g, system)
            u = np.concatenate([fit.u0, fit.u1])
            base = loglik(fit.u0, fit.u1, g)
            t = 1e-7
            directions = [e for e in np.eye(2 * g.m)] + [
                -e for e in np.eye(2 * g.m)
            ]
            # constraint-edge directions: giving slack to one coupling row
            directions += list(system.coupling_matrix())
            for dvec in directions:
                cand = u + t * dvec
                if np.any(cand > 0) or np.any(cand < -CAP):
                    continue
                if system.max_violation(cand[: g.m], cand[g.m :]) > 1e-14:
                    continue
                gain = loglik(cand[: g.m], cand[g.m :], g) - base
                assert gain <= 1e-6 * t + 1e-12

    def test_matches_slsqp_reference(self, rng):
        for _ in range(30):
            c = random_tied_cohort(rng)
            try:
                g = build_event_grid(c)
            except EmptyArmError:
                continue
            theta = float(rng.choice(np.concatenate([[0.0], g.times[:-1]])))
            gamma = int(rng.choice([-1, 1]))
            kind = "survival" if rng.random() < 0.6 else "hazard"
            system = ConstraintSystem(kind=kind, m=g.m, v=v_index(theta, g), gamma=gamma)
            fit = fit_system(g, system)
            ref = slsqp_reference_fit(g, system)
            assert fit.loglik >= ref - 1e-6

    def test_matches_brute_force_small_m(self, rng):
        """Grid-refinement oracle on m <= 2 problems (4 dims)."""
        count = 0
        while count < 6:
            c = random_tied_cohort(rng, n=10, tie_scale=0.5)
            try:
                g = build_event_grid(c)
            except EmptyArmError:
                continue
            if g.m > 2:
                continue
            theta = float(rng.choice(np.concatenate([[0.0], g.times[:-1]])))
            gamma = int(rng.choice([-1, 1]))
            system = build_constraints(g, CrossingParams(theta, gamma))
            fit = fit_system(g, system)
            brute, _ = grid_refine_fit(g, system, rounds=10, points=9)
            assert fit.loglik >= brute - 1e-4
            assert fit.loglik <= brute + 1e-3  # oracle slightly undershoots
            count += 1

    def test_monotone_dominance_of_fit(self, rng):
        """Curves from the fit satisfy the requested crossing pattern."""
        from scsurv.constraints import check_single_crossing
        from scsurv.profile import curves_from_fit

        for _ in range(15):
            c = random_tied_cohort(rng)
            try:
                g = build_event_grid(c)
            except EmptyArmError:
                continue
            theta = float(rng.choice(np.concatenate([[0.0], g.times[:-1]])))
            gamma = int(rng.choice([-1, 1]))
            params = CrossingParams(theta, gamma)
            fit = fit_conditional(g, params)
            s0, s1 = curves_from_fit(fit, g)
            assert check_single_crossing(s0, s1, params, tol=1e-8)
