"""Command-line interface: fit, estimands, bootstrap, test, simulate."""

from __future__ import annotations

import argparse
import csv
import datetime
import functools
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    Cohort,
    StepSurvival,
    bin_followup,
    build_event_grid,
    kaplan_meier,
    read_cohort_csv,
)
from .errors import (
    InputFormatError,
    ScsurvError,
    SolverFailureError,
)
from .estimands import build_report, milestone_diff, rmst, surv_at_crossing
from .hazards import DiscreteHazards, scc_hazard_fit, smooth_hazards
from .inference import (
    joint_test_surv,
    joint_test_theta,
    permutation_test,
    stratified_bootstrap,
)
from .mle import SolverOptions
from .profile import SccFit, scc_fit
from .simulation import TABLE_PARAMS, KM_PARAMS, load_study_config, run_mse_study

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_SOLVER = 3


def _json_text(obj) -> str:
    """Deterministic JSON with 17-significant-digit floats (round-trip exact)."""
    if isinstance(obj, dict):
        items = ", ".join(
            f"{json.dumps(str(k))}: {_json_text(v)}" for k, v in sorted(obj.items())
        )
        return "{" + items + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_json_text(v) for v in obj) + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if np.isnan(x):
            return '"nan"'
        if np.isinf(x):
            return '"inf"' if x > 0 else '"-inf"'
        return format(x, ".17g")
    return json.dumps(obj)


def _write_json(path: Path, obj) -> None:
    path.write_text(_json_text(obj) + "\n", encoding="utf-8")


def _f17(x: float) -> str:
    return format(float(x), ".17g")


def _write_manifest(outdir: Path, command: str, input_path, options: dict, seed) -> None:
    digest = None
    if input_path is not None:
        digest = hashlib.sha256(Path(input_path).read_bytes()).hexdigest()
    manifest = {
        "command": command,
        "input_digest": digest,
        "options": options,
        "seed": seed,
        "version": __version__,
        "created_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    _write_json(outdir / "manifest.json", manifest)


# ---------------------------------------------------------------------------
# estimand specifications: "name" or "name:key=value,key=value"


def _parse_estimand_spec(text: str):
    name, _, argtext = text.partition(":")
    name = name.strip()
    kwargs = {}
    if argtext:
        for piece in argtext.split(","):
            key, _, value = piece.partition("=")
            if not _:
                raise InputFormatError(f"bad estimand argument {piece!r} in {text!r}")
            kwargs[key.strip()] = float(value)
    return name, kwargs


def _scc_estimand(cohort, name, kwargs, constraint, bin_width):
    if bin_width:
        cohort = bin_followup(cohort, bin_width)
    fit = scc_fit(cohort, constraint=constraint)
    if name == "theta":
        return fit.theta_hat
    if name == "surv_at_crossing":
        return surv_at_crossing(fit)
    if name == "rmst_diff":
        tau = kwargs.get("tau", float(fit.grid.times[-1]))
        return rmst(fit.s1, tau) - rmst(fit.s0, tau)
    if name == "milestone_diff":
        t = kwargs["t"]
        return milestone_diff(fit.s1, fit.s0, t)
    if name == "rrml_diff":
        from .estimands import rrml

        tau = kwargs.get("tau", float(fit.grid.times[-1]))
        return rrml(fit.s1, fit.theta_hat, tau) - rrml(fit.s0, fit.theta_hat, tau)
    if name == "cond_surv_diff":
        from .estimands import conditional_survival

        t = kwargs["t"]
        return conditional_survival(fit.s1, fit.theta_hat, t) - conditional_survival(
            fit.s0, fit.theta_hat, t
        )
    if name in ("ahr_pre", "ahr_post"):
        from .estimands import avg_hazard_ratios

        pre, post = avg_hazard_ratios(
            DiscreteHazards.from_fit(fit), fit.theta_hat, fit.grid
        )
        return pre if name == "ahr_pre" else post
    raise InputFormatError(f"unknown estimand {name!r}")


def _km_estimand(cohort, name, kwargs, bin_width):
    if bin_width:
        cohort = bin_followup(cohort, bin_width)
    grid = build_event_grid(cohort)
    s0, s1 = kaplan_meier(grid, 0), kaplan_meier(grid, 1)
    if name == "km_rmst_diff":
        tau = kwargs.get("tau", float(grid.times[-1]))
        return rmst(s1, tau) - rmst(s0, tau)
    if name == "km_milestone_diff":
        return milestone_diff(s1, s0, kwargs["t"])
    raise InputFormatError(f"unknown estimand {name!r}")


def make_estimand(text: str, constraint: str = "survival", bin_width: float | None = None):
    """Build a pure Cohort -> float callable from a spec string."""
    name, kwargs = _parse_estimand_spec(text)
    if name.startswith("km_"):
        fn = functools.partial(
            _km_estimand, name=name, kwargs=kwargs, bin_width=bin_width
        )
    else:
        fn = functools.partial(
            _scc_estimand,
            name=name,
            kwargs=kwargs,
            constraint=constraint,
            bin_width=bin_width,
        )
    # probe unknown names early on a trivial call path
    if name not in (
        "theta", "surv_at_crossing", "rmst_diff", "milestone_diff", "rrml_diff",
        "cond_surv_diff", "ahr_pre", "ahr_post", "km_rmst_diff", "km_milestone_diff",
    ):
        raise InputFormatError(f"unknown estimand {name!r}")
    return fn


# ---------------------------------------------------------------------------
# subcommands


def _multi_estimand(cohort, fns):
    return [fn(cohort) for fn in fns]


def cmd_fit(args) -> int:
    cohort = read_cohort_csv(args.input)
    if args.bin_width is not None:
        cohort = bin_followup(cohort, args.bin_width)
    fit = scc_fit(cohort, constraint=args.constraint)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "curves.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "S0", "S1"])
        for t, a, b in zip(fit.grid.times, fit.s0.grid_survival, fit.s1.grid_survival):
            writer.writerow([_f17(t), _f17(a), _f17(b)])
    with open(outdir / "profile.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["theta", "gamma", "loglik"])
        for row in fit.profile:
            writer.writerow([_f17(row.theta), row.gamma, _f17(row.loglik)])
    _write_json(
        outdir / "fit.json",
        {
            "theta_hat": fit.theta_hat,
            "gamma_hat": fit.gamma_hat,
            "loglik": fit.loglik,
            "constraint": fit.constraint,
            "m": int(fit.grid.m),
            "n": cohort.n,
            "kkt_residual": fit.fit.kkt_residual,
            "converged": fit.fit.converged,
        },
    )
    _write_manifest(
        outdir, "fit", args.input,
        {"constraint": args.constraint, "bin_width": args.bin_width, "out": str(outdir)},
        seed=None,
    )
    return EXIT_OK


def _load_fit_dir(fitdir: Path) -> tuple[SccFit, dict]:
    meta_path = fitdir / "fit.json"
    curves_path = fitdir / "curves.csv"
    if not meta_path.exists() or not curves_path.exists():
        raise InputFormatError(f"{fitdir}: missing fit.json or curves.csv")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    times, s0_vals, s1_vals = [], [], []
    with open(curves_path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["t", "S0", "S1"]:
            raise InputFormatError(f"{curves_path}: unexpected header {header}")
        for row in reader:
            times.append(float(row[0]))
            s0_vals.append(float(row[1]))
            s1_vals.append(float(row[2]))
    times = np.asarray(times)
    u0 = np.diff(np.concatenate([[0.0], np.log(np.maximum(s0_vals, 1e-300))]))
    u1 = np.diff(np.concatenate([[0.0], np.log(np.maximum(s1_vals, 1e-300))]))
    u0, u1 = np.minimum(u0, 0.0), np.minimum(u1, 0.0)
    s0 = StepSurvival(times=times, logjumps=u0)
    s1 = StepSurvival(times=times, logjumps=u1)
    from .data import EventGrid
    from .mle import FitResult
    from .profile import ProfileRow

    # at-risk/event counts are not needed to evaluate estimands; reconstruct
    # a minimal grid carrying the times
    grid = EventGrid(times=times, d=np.ones((times.size, 2), int), r=np.ones((times.size, 2), int))
    fit = SccFit(
        theta_hat=float(meta["theta_hat"]),
        gamma_hat=int(meta["gamma_hat"]),
        s0=s0,
        s1=s1,
        profile=(ProfileRow(float(meta["theta_hat"]), int(meta["gamma_hat"]), float(meta["loglik"])),),
        loglik=float(meta["loglik"]),
        grid=grid,
        constraint=str(meta["constraint"]),
        fit=FitResult(u0=u0, u1=u1, loglik=float(meta["loglik"]), converged=True,
                      kkt_residual=float(meta.get("kkt_residual", 0.0)), n_iter=0),
    )
    return fit, meta


def cmd_estimands(args) -> int:
    fitdir = Path(args.fitdir)
    fit, meta = _load_fit_dir(fitdir)
    if args.hazard_source is not None and args.hazard_source != meta["constraint"]:
        raise InputFormatError(
            f"fit directory holds a {meta['constraint']}-constrained fit; "
            f"re-run 'scsurv fit --constraint {args.hazard_source}' to use it "
            "as the hazard source"
        )
    milestones = tuple(float(x) for x in args.milestones.split(",")) if args.milestones else ()
    cond_times = tuple(float(x) for x in args.cond_times.split(",")) if args.cond_times else ()
    report = build_report(
        fit,
        tau=args.tau,
        milestones=milestones,
        conditional_times=cond_times,
    )
    outdir = Path(args.out) if args.out else fitdir
    outdir.mkdir(parents=True, exist_ok=True)
    _write_json(outdir / "estimands.json", report.to_json_dict())
    with open(outdir / "estimands.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["parameter", "estimate"])
        for key, value in report.rows():
            writer.writerow([key, _f17(value)])
    _write_manifest(
        outdir, "estimands", fitdir / "curves.csv",
        {"tau": args.tau, "milestones": args.milestones,
         "cond_times": args.cond_times, "hazard_source": args.hazard_source},
        seed=None,
    )
    return EXIT_OK


def cmd_bootstrap(args) -> int:
    cohort = read_cohort_csv(args.input)
    estimand = make_estimand(args.estimand, args.constraint, args.bin_width)
    result = stratified_bootstrap(
        cohort, estimand, B=args.B, level=args.level, seed=args.seed,
        estimand_id=args.estimand, workers=args.threads,
    )
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    _write_json(outdir / "bootstrap.json", result.to_json_dict())
    _write_manifest(
        outdir, "bootstrap", args.input,
        {"estimand": args.estimand, "B": args.B, "level": args.level,
         "constraint": args.constraint, "bin_width": args.bin_width},
        seed=args.seed,
    )
    return EXIT_OK


def cmd_test(args) -> int:
    cohort = read_cohort_csv(args.input)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    if args.type == "perm":
        if not args.stat:
            raise InputFormatError("--stat is required for --type perm")
        specs = [s.strip() for s in args.stat.split(";")]
        if not args.directions:
            raise InputFormatError(
                "--directions is required for --type perm (one per statistic)"
            )
        directions = [d.strip() for d in args.directions.split(",")]
        fns = [make_estimand(s, args.constraint, args.bin_width) for s in specs]
        statistic = functools.partial(_multi_estimand, fns=fns)

        pval = permutation_test(
            cohort, statistic, B=args.B, seed=args.seed, directions=directions,
            workers=args.threads,
        )
        payload = {
            "type": "perm", "statistics": specs, "directions": directions,
            "B": args.B, "seed": args.seed, "p_value": pval,
        }
        _write_json(outdir / "test.json", payload)
    else:
        if not args.phi:
            raise InputFormatError("--phi is required for joint tests")
        if args.phi_star is None:
            raise InputFormatError("--phi-star is required for joint tests")
        phi = make_estimand(args.phi, args.constraint, args.bin_width)
        if args.type == "theta":
            if args.theta_star is None:
                raise InputFormatError("--theta-star is required for --type theta")
            result = joint_test_theta(
                cohort, phi, args.phi_star, args.theta_star,
                B=args.B, level=args.level, seed=args.seed,
                constraint=args.constraint, workers=args.threads,
            )
        else:
            if args.p_star is None:
                raise InputFormatError("--p-star is required for --type surv")
            result = joint_test_surv(
                cohort, phi, args.phi_star, args.p_star,
                B=args.B, level=args.level, seed=args.seed,
                constraint=args.constraint, workers=args.threads,
            )
        payload = result.to_json_dict()
        payload["type"] = args.type
        payload["phi"] = args.phi
        _write_json(outdir / "test.json", payload)
    _write_manifest(
        outdir, "test", args.input,
        {"type": args.type, "phi": args.phi, "phi_star": args.phi_star,
         "theta_star": args.theta_star, "p_star": args.p_star,
         "stat": args.stat, "directions": args.directions,
         "B": args.B, "level": args.level, "constraint": args.constraint,
         "bin_width": args.bin_width},
        seed=args.seed,
    )
    return EXIT_OK


def cmd_simulate(args) -> int:
    config = load_study_config(args.config)
    seed = args.seed if args.seed is not None else config.seed
    if seed is None:
        raise InputFormatError(
            "a seed is required: set study.seed in the config or pass --seed"
        )
    table = run_mse_study(
        config.scenarios, config.ns, config.reps, seed=seed, tau=config.tau,
        bin_width=config.bin_width, workers=args.threads,
    )
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "mse.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        header = ["n", "scenario"]
        for param in TABLE_PARAMS:
            header.append(f"scc:{param}")
            if param in KM_PARAMS:
                header.append(f"km:{param}")
        header += ["replicates", "failures"]
        writer.writerow(header)
        for n in config.ns:
            for spec in config.scenarios:
                row = [n, spec.label]
                for param in TABLE_PARAMS:
                    key = (spec.label, n, "scc", param)
                    row.append(_f17(table.mse[key]) if key in table.mse else "NA")
                    if param in KM_PARAMS:
                        key = (spec.label, n, "km", param)
                        row.append(_f17(table.mse[key]) if key in table.mse else "NA")
                row.append(table.counts[(spec.label, n)])
                row.append(table.failures[(spec.label, n)])
                writer.writerow(row)
    with open(outdir / "replicates.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        params = list(TABLE_PARAMS)
        writer.writerow(
            ["scenario", "n", "rep", "event_fraction", "failed"]
            + [f"scc:{p}" for p in params]
            + [f"km:{p}" for p in KM_PARAMS]
        )
        for r in table.records:
            row = [r.scenario, r.n, r.rep, _f17(r.event_fraction), int(r.failed)]
            row += [_f17(r.scc[p]) if p in r.scc else "NA" for p in params]
            row += [_f17(r.km[p]) if p in r.km else "NA" for p in KM_PARAMS]
            writer.writerow(row)
    _write_manifest(
        outdir, "simulate", args.config,
        {"threads": args.threads, "ns": config.ns, "replications": config.reps,
         "bin_width": config.bin_width, "tau": config.tau},
        seed=seed,
    )
    return EXIT_OK


def cmd_smooth(args) -> int:
    fitdir = Path(args.fitdir)
    fit, _ = _load_fit_dir(fitdir)
    smoothed = smooth_hazards(DiscreteHazards.from_fit(fit), span=args.span)
    outdir = Path(args.out) if args.out else fitdir
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "smoothed_hazards.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time", "h0", "h1"])
        for t, a, b in zip(smoothed.times, smoothed.h0, smoothed.h1):
            writer.writerow([_f17(t), _f17(a), _f17(b)])
    _write_json(
        outdir / "smoothed_hazards.json",
        {
            "single_crossing": smoothed.single_crossing,
            "first_violation_time": smoothed.first_violation_time,
            "span": args.span,
        },
    )
    _write_manifest(outdir, "smooth", fitdir / "curves.csv", {"span": args.span}, seed=None)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scsurv",
        description="Two-arm survival estimation under a single-crossing constraint",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit both curves and the crossing parameters")
    p.add_argument("input", help="CSV with header time,event,arm")
    p.add_argument("--constraint", choices=["survival", "hazard"], default="survival")
    p.add_argument("--bin-width", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("estimands", help="efficacy measures from a fit directory")
    p.add_argument("fitdir")
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--milestones", default="")
    p.add_argument("--cond-times", default="")
    p.add_argument("--hazard-source", choices=["survival", "hazard"], default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_estimands)

    p = sub.add_parser("bootstrap", help="stratified bootstrap confidence interval")
    p.add_argument("input")
    p.add_argument("--estimand", required=True)
    p.add_argument("--B", type=int, required=True)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--constraint", choices=["survival", "hazard"], default="survival")
    p.add_argument("--bin-width", type=float, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bootstrap)

    p = sub.add_parser("test", help="joint hypothesis tests and permutation test")
    p.add_argument("input")
    p.add_argument("--type", choices=["theta", "surv", "perm"], required=True)
    p.add_argument("--phi", default=None, help="efficacy estimand spec")
    p.add_argument("--phi-star", type=float, default=None)
    p.add_argument("--theta-star", type=float, default=None)
    p.add_argument("--p-star", type=float, default=None)
    p.add_argument("--stat", default=None,
                   help="permutation statistic spec(s), ';'-separated")
    p.add_argument("--directions", default=None,
                   help="extremeness per component: greater,less,...")
    p.add_argument("--B", type=int, required=True)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--constraint", choices=["survival", "hazard"], default="survival")
    p.add_argument("--bin-width", type=float, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("simulate", help="run a piecewise-exponential MSE study")
    p.add_argument("config", help="TOML study configuration")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("smooth", help="smooth fitted discrete hazards for plotting")
    p.add_argument("fitdir")
    p.add_argument("--span", type=float, default=2.0 / 3.0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_smooth)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SolverFailureError as err:
        detail = ""
        if err.theta is not None:
            detail = f" (at theta={err.theta:g}, gamma={err.gamma:+d})"
        print(f"solver failure{detail}: {err}", file=sys.stderr)
        return EXIT_SOLVER
    except (InputFormatError, FileNotFoundError) as err:
        print(f"input error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except ScsurvError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as err:
        print(f"invalid arguments: {err}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
