"""Acceptance suite: one test per shipped exit criterion.

Each test prints a PASS/FAIL line (run with ``pytest -s`` to see them on
success).  The Monte Carlo study criteria share one 200-replication run.
"""

import importlib.resources
import os
import time
import warnings

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import slsqp_reference_fit

from scsurv.constraints import (
    ConstraintSystem,
    CrossingParams,
    check_single_crossing,
    v_index,
)
from scsurv.data import (
    Cohort,
    StepSurvival,
    bin_followup,
    build_event_grid,
    kaplan_meier,
    read_cohort_csv,
)
from scsurv.errors import EmptyArmError
from scsurv.estimands import avg_hazard_ratios, rmst, rrml, surv_at_crossing
from scsurv.hazards import DiscreteHazards, scc_hazard_fit
from scsurv.inference import bootstrap_replicates, permutation_test
from scsurv.profile import candidate_thetas, km_loglik, scc_fit
from scsurv.rng import replicate_rng
from scsurv.simulation import (
    TABLE_PARAMS,
    load_study_config,
    run_mse_study,
    true_estimands,
)

WORKERS = min(2, os.cpu_count() or 1)


def announce(name: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    print(f"{status} {name}" + (f": {detail}" if detail else ""))
    assert ok, f"{name} failed: {detail}"


def km_rmst_diff_stat(cohort):
    grid = build_event_grid(cohort)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return rmst(kaplan_meier(grid, 1), 4.0) - rmst(kaplan_meier(grid, 0), 4.0)


@pytest.fixture(scope="module")
def study():
    """The full shipped study: 6 scenarios x {200, 400, 800} x 200 reps."""
    cfg = load_study_config(
        importlib.resources.files("scsurv").joinpath("configs/scenarios_default.toml")
    )
    table = run_mse_study(
        cfg.scenarios, cfg.ns, cfg.reps, seed=cfg.seed, tau=cfg.tau,
        bin_width=cfg.bin_width, workers=WORKERS,
    )
    return cfg, table


class TestKmFeasibilityOracle:
    def test_feasible_km_is_returned_unchanged(self):
        """On datasets whose KM curves already obey some crossing pattern,
        the profile fit must reproduce KM exactly (up to tolerance)."""
        rng = np.random.default_rng(90210)
        found = 0
        tried = 0
        start = time.time()
        worst_curve = 0.0
        worst_ll = 0.0
        while found < 100:
            tried += 1
            assert tried < 5000, "generator failed to produce feasible datasets"
            n = int(rng.integers(20, 201))
            half = n // 2
            arms = np.repeat([0, 1], half)
            ratio = rng.choice([0.35, 0.5, 1.9, 2.6])
            lam = np.where(arms == 1, 0.3 * ratio, 0.3)
            t = np.ceil(rng.exponential(1.0 / lam) * 2) / 2
            c = rng.uniform(1.0, 7.0, 2 * half)
            cohort = Cohort.from_arrays(np.minimum(t, c), t <= c, arms)
            try:
                grid = build_event_grid(cohort)
            except EmptyArmError:
                continue
            km0, km1 = kaplan_meier(grid, 0), kaplan_meier(grid, 1)
            feasible = any(
                check_single_crossing(km0, km1, CrossingParams(float(th), g), tol=0.0)
                for th in candidate_thetas(grid)
                for g in (1, -1)
            )
            if not feasible:
                continue
            found += 1
            fit = scc_fit(cohort)
            gap0 = np.max(np.abs(fit.s0.grid_survival - km0.grid_survival))
            gap1 = np.max(np.abs(fit.s1.grid_survival - km1.grid_survival))
            worst_curve = max(worst_curve, gap0, gap1)
            worst_ll = max(worst_ll, abs(fit.loglik - km_loglik(grid)))
        elapsed = time.time() - start
        ok = worst_curve <= 1e-6 and worst_ll <= 1e-8 and elapsed < 120
        announce(
            "km-feasibility-oracle", ok,
            f"100 datasets, sup-norm {worst_curve:.2e}, loglik gap {worst_ll:.2e}, "
            f"{elapsed:.0f}s",
        )


class TestBruteForceProfileEquivalence:
    def test_profile_tables_match_independent_refits(self):
        rng = np.random.default_rng(556677)
        done = 0
        start = time.time()
        worst = 0.0
        while done < 50:
            n = int(rng.integers(10, 26))
            half = n // 2
            arms = np.repeat([0, 1], half)
            t = np.ceil(rng.exponential(2.5, 2 * half))
            c = rng.uniform(1.0, 6.0, 2 * half)
            cohort = Cohort.from_arrays(np.minimum(t, c), t <= c, arms)
            try:
                grid = build_event_grid(cohort)
            except EmptyArmError:
                continue
            if grid.m > 6:
                continue
            done += 1
            for mode in ("survival", "hazard"):
                fit = (scc_fit if mode == "survival" else scc_hazard_fit)(cohort)
                table = {}
                for row in fit.profile:
                    ref = slsqp_reference_fit(
                        grid,
                        ConstraintSystem(
                            kind=mode, m=grid.m, v=v_index(row.theta, grid),
                            gamma=row.gamma,
                        ),
                    )
                    worst = max(worst, abs(row.loglik - ref))
                    table[(row.theta, row.gamma)] = ref
                # the chosen candidate attains the oracle maximum too
                top = max(table.values())
                assert table[(fit.theta_hat, fit.gamma_hat)] >= top - 2e-6
                # tie-break: no candidate with smaller theta (or same theta
                # and gamma=+1) is clearly better in the oracle table
                for (th, gm), value in table.items():
                    if value > table[(fit.theta_hat, fit.gamma_hat)] + 2e-6:
                        assert th > fit.theta_hat
        elapsed = time.time() - start
        ok = worst <= 1e-6 and elapsed < 300
        announce(
            "brute-force-profile-equivalence", ok,
            f"50 datasets x 2 modes, worst loglik gap {worst:.2e}, {elapsed:.0f}s",
        )


class TestClosedFormEstimands:
    def test_exponential_rmst_rrml_and_identity(self):
        rng = np.random.default_rng(314159)
        worst_rmst = 0.0
        for lam in (0.4, 1.0, 2.3):
            for gap in (0.01, 0.002):
                times = np.arange(gap, 9.0, gap)
                curve = StepSurvival(
                    times=times,
                    logjumps=np.diff(np.concatenate([[0.0], -lam * times])),
                )
                tau = 2.0
                got = rmst(curve, tau)
                want = (1 - np.exp(-lam * tau)) / lam
                assert abs(got - want) <= gap, (lam, gap)
                worst_rmst = max(worst_rmst, abs(got - want) / gap)
                t0 = 0.5
                got_r = rrml(curve, t0, tau)
                want_r = ((1 - np.exp(-lam * (tau - t0))) / lam)
                assert abs(got_r - want_r) <= 2 * gap
        # RRML / conditional-survival identity on 1000 random step curves
        worst_identity = 0.0
        for _ in range(1000):
            m = int(rng.integers(2, 10))
            times = np.sort(rng.uniform(0.1, 8.0, m)) + np.arange(m) * 1e-6
            u = -rng.exponential(0.3, m)
            s = StepSurvival(times=times, logjumps=u)
            theta = float(rng.uniform(0, times[-2]))
            tau = float(rng.uniform(theta + 0.1, 10.0))
            s_theta = s.evaluate(theta)
            if s_theta <= 1e-10:
                continue
            direct = rrml(s, theta, tau)
            knots = np.concatenate(
                [[theta], times[(times > theta) & (times < tau)], [tau]]
            )
            integral = sum(
                (s.evaluate(a) / s_theta) * (b - a)
                for a, b in zip(knots[:-1], knots[1:])
            )
            worst_identity = max(worst_identity, abs(direct - integral))
        ok = worst_identity <= 1e-12
        announce(
            "closed-form-estimands", ok,
            f"RMST within grid gap, identity defect {worst_identity:.2e}",
        )


class TestStudyCriteria:
    def test_table_ordering(self, study):
        cfg, table = study
        labels = [s.label for s in cfg.scenarios]
        ratios = {}
        for lab in labels:
            scc = table.get(lab, 400, "scc", "rmst_diff")
            km = table.get(lab, 400, "km", "rmst_diff")
            ratios[lab] = scc / km
        close = all(ratios[labels[i]] <= 1.05 for i in (0, 1, 2))
        hurt = ratios[labels[4]] >= 1.3
        detail = ", ".join(f"{lab}: {ratios[lab]:.3f}" for lab in labels)
        announce("table-ordering-reproduction", close and hurt, detail)

    def test_mse_monotone_in_n(self, study):
        cfg, table = study
        bad = []
        for spec in cfg.scenarios:
            truth = true_estimands(spec, cfg.tau)
            for param in TABLE_PARAMS:
                if truth[param] is None:
                    continue
                lo = table.get(spec.label, 800, "scc", param)
                hi = table.get(spec.label, 200, "scc", param)
                if not lo < hi:
                    bad.append((spec.label, param, lo, hi))
        announce(
            "mse-sample-size-monotonicity", not bad,
            "all parameters shrink from n=200 to n=800" if not bad else str(bad),
        )

    def test_censoring_band(self, study):
        cfg, table = study
        fractions = {}
        for spec in cfg.scenarios:
            recs = [r for r in table.records if r.scenario == spec.label]
            fractions[spec.label] = float(np.mean([r.event_fraction for r in recs]))
        ok = all(0.50 <= f <= 0.80 for f in fractions.values())
        announce(
            "censoring-band", ok,
            ", ".join(f"{k}: {v:.2f}" for k, v in fractions.items()),
        )


class TestInferenceDeterminism:
    def test_byte_identical_across_runs_and_workers(self):
        from scsurv.cli import _json_text
        from scsurv.simulation import PiecewiseExp, ScenarioSpec

        rng = replicate_rng(31337, 0)
        n = 80
        arms = np.repeat([0, 1], n // 2)
        t = np.ceil(rng.exponential(3.0, n) * 2) / 2
        c = rng.uniform(2.0, 8.0, n)
        cohort = Cohort.from_arrays(np.minimum(t, c), t <= c, arms)

        boot = [
            bootstrap_replicates(cohort, km_rmst_diff_stat, B=16, seed=5, workers=w)
            for w in (1, 2, 1)
        ]
        boot_ok = all(
            np.array_equal(boot[0][0], b[0]) and boot[0][1] == b[1] for b in boot
        )
        perm = [
            permutation_test(cohort, km_rmst_diff_stat, B=16, seed=5, workers=w)
            for w in (1, 2, 1)
        ]
        perm_ok = len(set(perm)) == 1
        spec = ScenarioSpec(
            label="det", dist0=PiecewiseExp((), (0.25,)),
            dist1=PiecewiseExp((), (0.15,)), censoring=(4.0, 8.0),
            true_theta=0.0, true_gamma=1,
        )
        sims = [
            run_mse_study([spec], ns=[60], reps=4, seed=3, bin_width=0.5, workers=w)
            for w in (1, 2, 1)
        ]
        sim_payloads = {
            _json_text({"|".join(map(str, k)): v for k, v in s.mse.items()})
            for s in sims
        }
        sim_ok = len(sim_payloads) == 1
        announce(
            "inference-determinism", boot_ok and perm_ok and sim_ok,
            f"bootstrap={boot_ok} permutation={perm_ok} simulation={sim_ok}",
        )


class TestNullPermutationCalibration:
    def test_rejection_rate_near_nominal(self):
        hits = 0
        total = 0
        start = time.time()
        for k in range(400):
            rng = replicate_rng(777000 + k, 0)
            n = 60
            t = np.ceil(rng.exponential(3.0, n) * 2) / 2
            c = rng.uniform(2.0, 8.0, n)
            cohort = Cohort.from_arrays(
                np.minimum(t, c), t <= c, np.repeat([0, 1], n // 2)
            )
            try:
                p = permutation_test(cohort, km_rmst_diff_stat, B=59, seed=k)
            except EmptyArmError:
                continue
            total += 1
            hits += p <= 0.05
        rate = hits / total
        ok = 0.02 <= rate <= 0.08
        announce(
            "null-permutation-calibration", ok,
            f"rejection rate {rate:.3f} over {total} null datasets "
            f"({time.time() - start:.0f}s)",
        )


RECONSTRUCTED_ENV = "SCSURV_RECONSTRUCTED_CSV"


class TestDataExampleReproduction:
    def test_companion_dataset_values(self):
        """Runs only when the reconstructed trial outcomes are supplied via
        the SCSURV_RECONSTRUCTED_CSV environment variable."""
        path = os.environ.get(RECONSTRUCTED_ENV)
        if not path or not os.path.exists(path):
            pytest.skip(
                f"companion dataset not supplied (set {RECONSTRUCTED_ENV})"
            )
        cohort = read_cohort_csv(path)
        fit = scc_fit(cohort)
        grid = fit.grid
        cell = float(np.max(np.diff(grid.times)))
        assert abs(fit.theta_hat - 7.36) <= cell + 1e-9
        assert fit.gamma_hat == 1
        assert surv_at_crossing(fit) == pytest.approx(0.73, abs=0.02)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            delta = rmst(fit.s1, 36.0) - rmst(fit.s0, 36.0)
        assert delta == pytest.approx(1.48, abs=0.10)
        hfit = scc_hazard_fit(cohort)
        assert abs(hfit.theta_hat - 2.4) <= cell + 1e-9
        pre, post = avg_hazard_ratios(
            DiscreteHazards.from_fit(hfit), hfit.theta_hat, hfit.grid
        )
        assert pre == pytest.approx(0.77, abs=0.03)
        assert post == pytest.approx(0.32, abs=0.03)
        announce("data-example-reproduction", True, "companion dataset matched")
